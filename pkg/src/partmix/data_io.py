"""Dataset ingestion, model persistence, and run manifests.

Models go to JSON (schema_version 1) with floats written at 9 significant
digits, which keeps round-trip score drift below 1e-8. Images use PGM/PPM;
color inputs collapse to gray with the standard luma weights. Writes are
temp-file-then-rename so a crash never leaves a partial file.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ModelFormatError
from .models import MixtureModel, PartFilter, PlattScaling, StarModel, Template

SCHEMA_VERSION = 1
MODEL_TYPES = ("mixture", "dpm", "epm", "edpm")
LUMA = (0.299, 0.587, 0.114)


# ------------------------------------------------------------- pgm / ppm

def _read_header_tokens(data: bytes, count: int):
    """Magic + `count` integer tokens, skipping comments; returns (tokens, offset)."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count + 1 and i < n:
        if data[i:i + 1].isspace():
            i += 1
            continue
        if data[i:i + 1] == b"#":
            while i < n and data[i] not in (10, 13):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if len(tokens) < count + 1:
        raise DataError("truncated image header")
    return tokens, i + 1  # single whitespace after the last header token


def read_image(path) -> np.ndarray:
    """PGM (P2/P5) or PPM (P3/P6) to a float64 grayscale array."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise DataError(f"not a PNM file: {path}")
    magic = data[:2]
    if magic in (b"P2", b"P5"):
        channels = 1
    elif magic in (b"P3", b"P6"):
        channels = 3
    else:
        raise DataError(f"unsupported image magic {magic!r} in {path}")
    tokens, offset = _read_header_tokens(data, 3)
    width, height, maxval = (int(t) for t in tokens[1:4])
    n_values = width * height * channels
    if magic in (b"P2", b"P3"):
        values = np.array(data[offset - 1:].split()[:n_values], dtype=np.float64)
        if values.size != n_values:
            raise DataError(f"truncated ascii raster in {path}")
    else:
        itemsize = 1 if maxval < 256 else 2
        raster = data[offset:offset + n_values * itemsize]
        if len(raster) != n_values * itemsize:
            raise DataError(f"truncated raster in {path}")
        dtype = np.uint8 if itemsize == 1 else ">u2"
        values = np.frombuffer(raster, dtype=dtype).astype(np.float64)
    if channels == 1:
        return values.reshape(height, width)
    rgb = values.reshape(height, width, 3)
    return LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary (P5) grayscale write; values clipped and rounded to [0, maxval]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DataError(f"pgm needs a 2-D array, got shape {image.shape}")
    quant = np.clip(np.rint(image), 0, maxval).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode()
    _atomic_write_bytes(path, header + quant.tobytes())


def _atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode())


# ------------------------------------------------------------- models

def _round9(obj):
    """Recursively format floats at 9 significant digits."""
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, (np.floating,)):
        return float(f"{float(obj):.9g}")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round9(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _round9(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round9(v) for v in obj]
    return obj


def _platt_doc(platt):
    if platt is None:
        return None
    return {"a": platt.a, "b": platt.b, "clamped": bool(platt.clamped)}


def _platt_from(doc):
    if doc is None:
        return None
    return PlattScaling(a=float(doc["a"]), b=float(doc["b"]),
                        clamped=bool(doc.get("clamped", False)))


def save_model(model, path, metadata: dict | None = None) -> None:
    """Serialize a MixtureModel or StarModel (any variant) to JSON."""
    meta = dict(getattr(model, "meta", {}) or {})
    if metadata:
        meta.update(metadata)
    if isinstance(model, Template):
        model = MixtureModel(templates=[model])
    if isinstance(model, MixtureModel):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "type": "mixture",
            "D": int(model.templates[0].weights.shape[2]),
            "templates": [
                {
                    "weights": t.weights,
                    "bias": t.bias,
                    "mixture_id": int(t.mixture_id),
                    "platt": _platt_doc(t.platt),
                }
                for t in model.templates
            ],
            "platt": None,
            "metadata": {"K": model.K, **meta},
        }
    elif isinstance(model, StarModel):
        doc = {
            "schema_version": SCHEMA_VERSION,
            "type": model.variant,
            "D": int(model.parts[0].weights.shape[2]),
            "parts": {
                "filters": [
                    {"part_id": int(p.part_id), "weights": p.weights}
                    for p in model.parts
                ],
                "anchors": model.anchors,
                "anchor_sets": model.anchor_sets,
                "betas": model.springs,
            },
            "bias": model.bias,
            "platt": _platt_doc(model.platt),
            "metadata": meta,
        }
    else:
        raise ModelFormatError(f"cannot serialize {type(model).__name__}")
    _atomic_write_text(path, json.dumps(_round9(doc), indent=1))


def load_model(path):
    """Inverse of save_model; raises ModelFormatError on any defect."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"unreadable model file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"model file {path} is not a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"schema version {version} unsupported, this build reads {SCHEMA_VERSION}"
        )
    mtype = doc.get("type")
    if mtype not in MODEL_TYPES:
        raise ModelFormatError(
            f"unknown model type {mtype!r}; supported: {', '.join(MODEL_TYPES)}"
        )
    try:
        if mtype == "mixture":
            templates = [
                Template(
                    weights=np.asarray(t["weights"], dtype=np.float64),
                    bias=float(t["bias"]),
                    mixture_id=int(t["mixture_id"]),
                    platt=_platt_from(t.get("platt")),
                )
                for t in doc["templates"]
            ]
            return MixtureModel(templates=templates, meta=doc.get("metadata", {}))
        parts_doc = doc["parts"]
        parts = [
            PartFilter(int(p["part_id"]),
                       np.asarray(p["weights"], dtype=np.float64))
            for p in parts_doc["filters"]
        ]
        def opt(key):
            return None if parts_doc.get(key) is None else np.asarray(parts_doc[key])

        return StarModel(
            parts=parts,
            springs=opt("betas"),
            anchors=opt("anchors"),
            anchor_sets=opt("anchor_sets"),
            variant=mtype,
            bias=float(doc.get("bias", 0.0)),
            platt=_platt_from(doc.get("platt")),
            meta=doc.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file {path}: {exc}") from exc


# ------------------------------------------------------------- datasets

@dataclass
class DatasetManifest:
    """Index of a dataset on disk; all paths relative to the manifest file."""

    images: list  # [{"id", "path", "size": [h, w], "sha256"}]
    annotations: str | None = None
    splits: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e["id"] for e in self.images]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate image ids in manifest")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(image_paths, ids, root, annotations=None, splits=None) -> DatasetManifest:
    """Manifest entries with sizes and checksums for existing image files."""
    root = Path(root)
    entries = []
    for img_id, p in zip(ids, image_paths):
        rel = os.path.relpath(p, root)
        img = read_image(p)
        entries.append({
            "id": str(img_id),
            "path": rel,
            "size": [int(img.shape[0]), int(img.shape[1])],
            "sha256": sha256_file(p),
        })
    return DatasetManifest(images=entries, annotations=annotations,
                           splits=splits or {}, root=root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "images": manifest.images,
        "annotations": manifest.annotations,
        "splits": manifest.splits,
    }
    _atomic_write_text(path, json.dumps(doc, indent=1))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable manifest {path}: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"manifest schema {doc.get('schema_version')} unsupported")
    return DatasetManifest(images=doc["images"],
                           annotations=doc.get("annotations"),
                           splits=doc.get("splits", {}),
                           root=path.parent)


def load_dataset(manifest_path):
    """Validated dataset handle: (image entries, ground truths by image id).

    Every problem found (missing file, checksum mismatch, annotation for an
    unknown id) is collected and reported in one DataError.
    """
    manifest = load_manifest(manifest_path)
    problems = []
    entries = []
    for e in manifest.images:
        p = manifest.root / e["path"]
        if not p.exists():
            problems.append(f"missing image file {e['path']} (id {e['id']})")
            continue
        digest = sha256_file(p)
        if digest != e["sha256"]:
            problems.append(f"checksum mismatch for {e['path']} (id {e['id']})")
            continue
        entry = dict(e)
        entry["abspath"] = p
        entry["load"] = (lambda q=p: read_image(q))
        entries.append(entry)
    known = {str(e["id"]) for e in entries}

    truths = {}
    if manifest.annotations is not None:
        from .evaluate import load_ground_truth
        ann_path = manifest.root / manifest.annotations
        if not ann_path.exists():
            problems.append(f"missing annotation file {manifest.annotations}")
        else:
            for gt in load_ground_truth(ann_path):
                if str(gt.image_id) not in known:
                    problems.append(f"annotation references unknown id {gt.image_id}")
                else:
                    truths[gt.image_id] = gt
    if problems:
        raise DataError("dataset load failed:\n  " + "\n  ".join(problems))
    return entries, truths
