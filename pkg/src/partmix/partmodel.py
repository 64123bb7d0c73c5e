"""Star-model scoring: distance transforms, dynamic programming, exemplar
placement spaces, shape scores, template synthesis, and brute-force oracles.

Score of a placement z = (z_1..z_P) on feature grid phi:

    S(z) = sum_i alpha_i . phi(z_i) + b_shape(z) + bias

where b_shape depends on the variant (quadratic springs around anchors for
dpm, max over exemplar anchor sets for edpm, exact-match restriction for
epm). All tie-breaks are smallest index: raster order over locations,
then smallest exemplar index.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import OracleGuardError, SizedInputError, ValidationError
from .features import FeatureGrid
from .models import PartFilter, StarModel, Template

BRUTEFORCE_GUARD = 10 ** 7

# dt_2d invocation counter, used to verify message sharing across mixtures
_DT_CALLS = 0


def reset_dt_calls() -> None:
    global _DT_CALLS
    _DT_CALLS = 0


def dt_calls() -> int:
    return _DT_CALLS


@njit(cache=True)
def _envelope_1d(f, beta, g, arg):
    """Lower-envelope max transform: g[x] = max_x' f[x'] - beta (x-x')^2."""
    L = f.shape[0]
    if beta == 0.0:
        best = f[0]
        bi = 0
        for i in range(1, L):
            if f[i] > best:
                best = f[i]
                bi = i
        for x in range(L):
            g[x] = best
            arg[x] = bi
        return
    v = np.empty(L, dtype=np.int64)
    z = np.empty(L + 1, dtype=np.float64)
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, L):
        s = 0.0
        while True:
            p = v[k]
            s = ((f[p] - f[q]) / beta + (q + p) * (q - p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for x in range(L):
        while z[k + 1] < x:
            k += 1
        xp = v[k]
        d = x - xp
        g[x] = f[xp] - beta * (d * d)
        arg[x] = xp


@njit(cache=True)
def _dt2d_kernel(resp, beta_x, beta_y, g2, arg_y, arg_x):
    R, C = resp.shape
    g1 = np.empty((R, C), dtype=np.float64)
    ax1 = np.empty((R, C), dtype=np.int64)
    for y in range(R):
        _envelope_1d(resp[y], beta_x, g1[y], ax1[y])
    col = np.empty(R, dtype=np.float64)
    gcol = np.empty(R, dtype=np.float64)
    acol = np.empty(R, dtype=np.int64)
    for x in range(C):
        for y in range(R):
            col[y] = g1[y, x]
        _envelope_1d(col, beta_y, gcol, acol)
        for y in range(R):
            yp = acol[y]
            g2[y, x] = gcol[y]
            arg_y[y, x] = yp
            arg_x[y, x] = ax1[yp, x]


def gdt_1d(f, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Max transform of a 1-D array under a quadratic spring.

    Returns (g, arg) with g[x] = max_x' f[x'] - beta (x - x')^2 and arg the
    maximizing x' (exact value ties resolve to the smallest x'). O(L).
    """
    f = np.ascontiguousarray(f, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValidationError("gdt_1d needs a nonempty 1-D array")
    if not np.all(np.isfinite(f)):
        raise ValidationError("gdt_1d input must be finite")
    if beta < 0:
        raise ValidationError(f"spring coefficient must be >= 0, got {beta}")
    g = np.empty_like(f)
    arg = np.empty(f.shape[0], dtype=np.int64)
    _envelope_1d(f, float(beta), g, arg)
    return g, arg


def dt_2d(response, beta_x: float, beta_y: float) -> tuple[np.ndarray, np.ndarray]:
    """Separable 2-D max transform: rows (x, beta_x) then columns (y, beta_y).

    Returns (g, args) with args[..., 0] = y' and args[..., 1] = x' of the
    maximizer; equals the brute-force max over all (x', y') exactly, with
    raster-order tie-breaking.
    """
    global _DT_CALLS
    response = np.ascontiguousarray(response, dtype=np.float64)
    if response.ndim != 2 or response.size == 0:
        raise ValidationError("dt_2d needs a nonempty 2-D map")
    if not np.all(np.isfinite(response)):
        raise ValidationError("dt_2d input must be finite")
    if beta_x < 0 or beta_y < 0:
        raise ValidationError("spring coefficients must be >= 0")
    _DT_CALLS += 1
    R, C = response.shape
    g = np.empty((R, C), dtype=np.float64)
    args = np.empty((R, C, 2), dtype=np.int64)
    _dt2d_kernel(response, float(beta_x), float(beta_y),
                 g, args[:, :, 0], args[:, :, 1])
    return g, args


def _correlate(weights: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Valid-mode correlation of an (h, w, D) filter over (R, C, D) cells."""
    h, w, d = weights.shape
    R, C, D = cells.shape
    if d != D:
        raise ValidationError(f"filter depth {d} != grid depth {D}")
    if h > R or w > C:
        raise SizedInputError(
            f"filter ({h},{w}) larger than grid ({R},{C})"
        )
    sw = np.lib.stride_tricks.sliding_window_view(cells, (h, w), axis=(0, 1))
    # sw: (R-h+1, C-w+1, D, h, w); contract against (D, h, w)
    return np.tensordot(sw, np.moveaxis(weights, 2, 0), axes=([2, 3, 4], [0, 1, 2]))


def template_response(template: Template, grid: FeatureGrid) -> np.ndarray:
    """Raw (uncalibrated) response map of a rigid template: w . phi + b."""
    return _correlate(template.weights, grid.cells) + template.bias


def part_responses(model: StarModel, grid: FeatureGrid) -> list[np.ndarray]:
    """Per-part appearance response maps alpha_i . phi at every placement."""
    return [_correlate(p.weights, grid.cells) for p in model.parts]


def _shape_terms(springs_j, delta) -> float:
    """Deformation score of one link: -(beta_y dy^2) - (beta_x dx^2)."""
    by, bx = float(springs_j[0]), float(springs_j[1])
    dy, dx = int(delta[0]), int(delta[1])
    return (0.0 - by * (dy * dy)) - bx * (dx * dx)


def exemplar_shape_constants(model: StarModel) -> np.ndarray:
    """Per-exemplar dpm shape score c_m = sum_j spring cost of (a^m_j - a_j).

    Used by the epm variant: restricting placements to exemplar shapes
    leaves the anchored quadratic cost as a constant per exemplar.
    """
    if model.anchor_sets is None or model.anchors is None:
        raise ValidationError("exemplar shape constants need anchors and anchor_sets")
    out = np.zeros(model.M, dtype=np.float64)
    for m in range(model.M):
        c = 0.0
        for j in range(model.P - 1):
            c += _shape_terms(model.springs[j], model.anchor_sets[m, j] - model.anchors[j])
        out[m] = c
    return out


def shape_score(model: StarModel, z) -> float:
    """Deformation score of an absolute placement z ((P, 2) of (y, x))."""
    z = np.asarray(z, dtype=np.int64).reshape(model.P, 2)
    if model.P == 1:
        return 0.0
    rel = z[1:] - z[0]
    if model.variant == "dpm":
        s = 0.0
        for j in range(model.P - 1):
            s += _shape_terms(model.springs[j], rel[j] - model.anchors[j])
        return s
    if model.variant == "edpm":
        best = -np.inf
        for m in range(model.M):
            s = 0.0
            for j in range(model.P - 1):
                s += _shape_terms(model.springs[j], rel[j] - model.anchor_sets[m, j])
            if s > best:
                best = s
        return best
    # epm: placement must match some exemplar shape exactly, then the
    # anchored dpm cost applies
    for m in range(model.M):
        if np.array_equal(rel, model.anchor_sets[m]):
            s = 0.0
            for j in range(model.P - 1):
                s += _shape_terms(model.springs[j], rel[j] - model.anchors[j])
            return s
    return -np.inf


def synthesize_template(model: StarModel, z) -> tuple[Template, tuple[int, int]]:
    """Rigid template equivalent to placement z: parts summed at their offsets.

    Returns (template, origin) where origin is the absolute (y, x) cell of
    the template's top-left corner; template.bias folds in the placement's
    shape score plus the model bias, so
    template.weights . phi(window at origin) + template.bias = S(z).
    """
    z = np.asarray(z, dtype=np.int64).reshape(model.P, 2)
    dims = np.asarray([p.dims for p in model.parts], dtype=np.int64)
    lo = z.min(axis=0)
    hi = (z + dims).max(axis=0)
    h, w = (hi - lo).tolist()
    depth = model.parts[0].weights.shape[2]
    weights = np.zeros((h, w, depth), dtype=np.float64)
    for i, part in enumerate(model.parts):
        oy, ox = (z[i] - lo).tolist()
        ph, pw = part.dims
        weights[oy:oy + ph, ox:ox + pw, :] += part.weights
    bias = shape_score(model, z) + model.bias
    tpl = Template(weights=weights, bias=float(bias), mixture_id=-1)
    return tpl, (int(lo[0]), int(lo[1]))


def _shifted_add(acc: np.ndarray, other: np.ndarray, ay: int, ax: int) -> np.ndarray:
    """acc(z) + other(z + (ay, ax)), -inf where the lookup leaves other."""
    R1, C1 = acc.shape
    Rj, Cj = other.shape
    y0, y1 = max(0, -ay), min(R1, Rj - ay)
    x0, x1 = max(0, -ax), min(C1, Cj - ax)
    out = np.full_like(acc, -np.inf)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = acc[y0:y1, x0:x1] + other[y0 + ay:y1 + ay, x0 + ax:x1 + ax]
    return out


def score_dpm(model: StarModel, grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Best-placement score map over root locations, via distance transforms.

    Returns (scores, placements): scores[y, x] is the max over all part
    placements with the root at (y, x); placements[y, x] is the (P, 2)
    argmax configuration ((-1, -1) where the location is invalid).
    """
    if model.variant != "dpm":
        raise ValidationError(f"score_dpm needs a dpm model, got {model.variant}")
    responses = part_responses(model, grid)
    acc = responses[0] + model.bias
    R1, C1 = acc.shape
    placements = np.full((R1, C1, model.P, 2), -1, dtype=np.int64)
    placements[:, :, 0, 0] = np.arange(R1)[:, None]
    placements[:, :, 0, 1] = np.arange(C1)[None, :]
    for j in range(model.P - 1):
        by, bx = model.springs[j]
        msg, args = dt_2d(responses[j + 1], bx, by)
        ay, ax = (int(v) for v in model.anchors[j])
        acc = _shifted_add(acc, msg, ay, ax)
        y0, y1 = max(0, -ay), min(R1, msg.shape[0] - ay)
        x0, x1 = max(0, -ax), min(C1, msg.shape[1] - ax)
        if y0 < y1 and x0 < x1:
            placements[y0:y1, x0:x1, j + 1, :] = args[y0 + ay:y1 + ay, x0 + ax:x1 + ax]
    placements[~np.isfinite(acc)] = -1
    return acc, placements


def score_epm(model: StarModel, grid: FeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Exemplar-restricted score map: max over exemplar shapes, no springs
    at inference beyond the per-exemplar anchored-cost constant.

    Returns (scores, best_m) with exemplar ties resolved to the smaller
    index.
    """
    if model.variant != "epm":
        raise ValidationError(f"score_epm needs an epm model, got {model.variant}")
    responses = part_responses(model, grid)
    consts = exemplar_shape_constants(model) if model.P > 1 else np.zeros(model.M)
    root_base = responses[0] + model.bias
    R1, C1 = root_base.shape
    best = np.full((R1, C1), -np.inf)
    best_m = np.zeros((R1, C1), dtype=np.int64)
    for m in range(model.M):
        acc = root_base
        for j in range(model.P - 1):
            ay, ax = (int(v) for v in model.anchor_sets[m, j])
            acc = _shifted_add(acc, responses[j + 1], ay, ax)
        acc = acc + consts[m]
        improved = acc > best
        best = np.where(improved, acc, best)
        best_m = np.where(improved, m, best_m)
    return best, best_m


def score_edpm(
    model: StarModel, grid: FeatureGrid, chunk_size: int = 256
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exemplar-set deformable scoring with messages shared across mixtures.

    The P-1 distance transforms are computed once; each exemplar costs only
    shifted lookups. Returns (scores, best_m, placements); equals the max
    over per-exemplar dpm runs exactly, ties to the smaller exemplar index.
    """
    if model.variant != "edpm":
        raise ValidationError(f"score_edpm needs an edpm model, got {model.variant}")
    responses = part_responses(model, grid)
    root_base = responses[0] + model.bias
    R1, C1 = root_base.shape
    n_links = model.P - 1

    msgs = []
    for j in range(n_links):
        by, bx = model.springs[j]
        msgs.append(dt_2d(responses[j + 1], bx, by))

    if n_links == 0:
        placements = np.full((R1, C1, 1, 2), -1, dtype=np.int64)
        placements[:, :, 0, 0] = np.arange(R1)[:, None]
        placements[:, :, 0, 1] = np.arange(C1)[None, :]
        return root_base.copy(), np.zeros((R1, C1), dtype=np.int64), placements

    yy = np.arange(R1)[:, None]
    xx = np.arange(C1)[None, :]
    best = np.full((R1, C1), -np.inf)
    best_m = np.zeros((R1, C1), dtype=np.int64)
    for c0 in range(0, model.M, chunk_size):
        sets = model.anchor_sets[c0:c0 + chunk_size]  # (Mc, P-1, 2)
        mc = sets.shape[0]
        acc = np.broadcast_to(root_base, (mc, R1, C1)).copy()
        for j in range(n_links):
            gj = msgs[j][0]
            rj, cj = gj.shape
            vy = yy[None, :, :] + sets[:, j, 0][:, None, None]
            vx = xx[None, :, :] + sets[:, j, 1][:, None, None]
            valid = (vy >= 0) & (vy < rj) & (vx >= 0) & (vx < cj)
            gathered = gj[np.clip(vy, 0, rj - 1), np.clip(vx, 0, cj - 1)]
            acc = np.where(valid, acc + gathered, -np.inf)
        cmax = acc.max(axis=0)
        carg = acc.argmax(axis=0) + c0
        improved = cmax > best
        best = np.where(improved, cmax, best)
        best_m = np.where(improved, carg, best_m)

    placements = np.full((R1, C1, model.P, 2), -1, dtype=np.int64)
    placements[:, :, 0, 0] = yy
    placements[:, :, 0, 1] = xx
    chosen = model.anchor_sets[best_m]  # (R1, C1, P-1, 2)
    for j in range(n_links):
        _, args = msgs[j]
        rj, cj = msgs[j][0].shape
        vy = yy + chosen[:, :, j, 0]
        vx = xx + chosen[:, :, j, 1]
        valid = (vy >= 0) & (vy < rj) & (vx >= 0) & (vx < cj)
        vyc = np.clip(vy, 0, rj - 1)
        vxc = np.clip(vx, 0, cj - 1)
        placements[:, :, j + 1, 0] = np.where(valid, args[vyc, vxc, 0], -1)
        placements[:, :, j + 1, 1] = np.where(valid, args[vyc, vxc, 1], -1)
    placements[~np.isfinite(best)] = -1
    return best, best_m, placements


def _bruteforce_guard(n_configs: int) -> None:
    if n_configs > BRUTEFORCE_GUARD:
        raise OracleGuardError(
            f"brute-force enumeration of {n_configs} placements exceeds the "
            f"{BRUTEFORCE_GUARD} test-scale guard"
        )


def score_bruteforce(model: StarModel, grid: FeatureGrid) -> float:
    """Exhaustive max of S(z) over the model's placement space.

    Oracle for the dynamic-programming scorers; refuses placement spaces
    larger than the test-scale guard.
    """
    responses = part_responses(model, grid)
    root_base = responses[0] + model.bias
    R1, C1 = root_base.shape
    if model.P == 1:
        return float(np.max(root_base))

    part_sizes = [responses[j + 1].shape for j in range(model.P - 1)]
    if model.variant == "epm":
        _bruteforce_guard(R1 * C1 * model.M)
        consts = exemplar_shape_constants(model)
        best = -np.inf
        for m in range(model.M):
            for y1 in range(R1):
                for x1 in range(C1):
                    s = root_base[y1, x1]
                    ok = True
                    for j in range(model.P - 1):
                        vy = y1 + int(model.anchor_sets[m, j, 0])
                        vx = x1 + int(model.anchor_sets[m, j, 1])
                        rj, cj = part_sizes[j]
                        if vy < 0 or vy >= rj or vx < 0 or vx >= cj:
                            ok = False
                            break
                        s = s + responses[j + 1][vy, vx]
                    if not ok:
                        continue
                    s = s + consts[m]
                    if s > best:
                        best = float(s)
        return best

    n_joint = 1
    for rj, cj in part_sizes:
        n_joint *= rj * cj
    _bruteforce_guard(R1 * C1 * n_joint)

    if model.variant == "dpm":
        anchor_lists = model.anchors[None, :, :]
    else:
        anchor_lists = model.anchor_sets

    best = -np.inf
    for y1 in range(R1):
        for x1 in range(C1):
            for anchors in anchor_lists:
                cur = np.asarray(root_base[y1, x1])
                invalid = False
                for j in range(model.P - 1):
                    rj, cj = part_sizes[j]
                    vy = y1 + int(anchors[j, 0])
                    vx = x1 + int(anchors[j, 1])
                    if vy < 0 or vy >= rj or vx < 0 or vx >= cj:
                        invalid = True
                        break
                    by, bx = model.springs[j]
                    dysq = (np.arange(rj)[:, None] - vy) ** 2
                    dxsq = (np.arange(cj)[None, :] - vx) ** 2
                    term = (responses[j + 1] - bx * dxsq) - by * dysq
                    cur = cur[..., None, None] + term
                if invalid:
                    continue
                val = float(np.max(cur))
                if val > best:
                    best = val
    return best
