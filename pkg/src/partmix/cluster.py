"""Hierarchical 2-means clustering and partitioned subset sampling.

The sampler produces nested training subsets: for each requested size the
subset is drawn from the previous level by repeatedly picking a cluster
with probability proportional to its current size and removing one random
member. This keeps two properties by construction: smaller sets are
subsets of larger ones (fixed K), and fine clusterings refine coarse ones
(fixed N, groupings read off one shared tree).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import OrderingError, ProvenanceError, ValidationError

KMEANS_MAX_ITER = 100


@dataclass
class ClusterNode:
    node_id: int
    members: np.ndarray  # example ids, sorted
    depth: int
    left: "ClusterNode | None" = None
    right: "ClusterNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


@dataclass
class ClusterTree:
    root: ClusterNode
    depth: int
    seed: int | None = None
    short_leaves: list = field(default_factory=list)  # node ids stopped early

    def leaves(self) -> list[ClusterNode]:
        """Leaves in depth-first (left-to-right) order."""
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                out.append(node)
            else:
                stack.append(node.right)
                stack.append(node.left)
        return out

    def groups_at_level(self, k: int) -> list[list[ClusterNode]]:
        """Leaf groups forming the K<=k clustering read off the hierarchy.

        Nodes at depth log2(k) each contribute one group (their leaf
        descendants); short leaves shallower than that depth form their own
        groups. k must be a power of two not exceeding 2**tree depth.
        """
        if k < 1 or (k & (k - 1)) != 0:
            raise ValidationError(f"cluster count must be a power of two, got {k}")
        level = k.bit_length() - 1
        if level > self.depth:
            raise ValidationError(f"K={k} exceeds tree depth {self.depth}")
        groups = []

        def descend(node, d):
            if d == level or node.is_leaf:
                groups.append(self._leaf_list(node))
                return
            descend(node.left, d + 1)
            descend(node.right, d + 1)

        descend(self.root, 0)
        return groups

    @staticmethod
    def _leaf_list(node) -> list[ClusterNode]:
        out = []
        stack = [node]
        while stack:
            n = stack.pop()
            if n.is_leaf:
                out.append(n)
            else:
                stack.append(n.right)
                stack.append(n.left)
        return out


def _kmeans_pp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared distance."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide
        else:
            r = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centers[i] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def two_means(points: np.ndarray, rng) -> np.ndarray:
    """Deterministic 2-means labels; assignment ties go to the lower center."""
    n = points.shape[0]
    if n < 2:
        raise ValidationError("two_means needs at least 2 points")
    centers = _kmeans_pp_init(points, 2, rng)
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d0 = np.sum((points - centers[0]) ** 2, axis=1)
        d1 = np.sum((points - centers[1]) ** 2, axis=1)
        new_labels = (d1 < d0).astype(np.int64)  # tie -> center 0
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in (0, 1):
            mask = labels == c
            if np.any(mask):
                centers[c] = points[mask].mean(axis=0)
    if np.all(labels == labels[0]):
        # degenerate: force a split so the hierarchy can proceed
        d = np.sum((points - centers[labels[0]]) ** 2, axis=1)
        far = int(np.argmax(d))
        labels = np.zeros(n, dtype=np.int64)
        labels[far] = 1
    return labels


def hierarchical_kmeans(descriptors: np.ndarray, depth: int, seed: int) -> ClusterTree:
    """Binary k-means hierarchy of the given depth over row vectors.

    Nodes with fewer than 2 members stop splitting early and are recorded
    as short leaves. Deterministic: each node splits with its own RNG
    stream derived from (seed, node_id).
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if descriptors.ndim != 2:
        raise ValidationError("descriptors must be a 2-D array")
    if descriptors.shape[0] < 2 ** depth:
        raise ValidationError(
            f"{descriptors.shape[0]} examples cannot fill depth {depth}"
        )
    counter = [0]
    short = []

    def build(ids: np.ndarray, d: int) -> ClusterNode:
        node_id = counter[0]
        counter[0] += 1
        node = ClusterNode(node_id=node_id, members=np.sort(ids), depth=d)
        if d == depth:
            return node
        if ids.size < 2:
            short.append(node_id)
            return node
        rng = np.random.default_rng([seed, node_id])
        labels = two_means(descriptors[ids], rng)
        node.left = build(ids[labels == 0], d + 1)
        node.right = build(ids[labels == 1], d + 1)
        return node

    root = build(np.arange(descriptors.shape[0]), 0)
    return ClusterTree(root=root, depth=depth, seed=seed, short_leaves=short)


@dataclass
class SampledPartition:
    n: int                 # total examples at this level
    clusters: list         # list of example-id lists, aligned with leaves


def partitioned_sample(leaf_clusters, sizes, seed: int) -> list[SampledPartition]:
    """Nested subsets of decreasing size, cluster-proportional at each draw.

    leaf_clusters is a list of id collections; sizes must start at the total
    count and strictly decrease. Level 0 is the input itself; each later
    level removes (N_prev - N_next) examples one at a time, picking a
    cluster with probability proportional to its current size, then a
    uniform member of it.
    """
    clusters = [list(c) for c in leaf_clusters]
    total = sum(len(c) for c in clusters)
    sizes = [int(s) for s in sizes]
    if not sizes or sizes[0] != total:
        raise OrderingError(f"sizes must start at the total count {total}, got {sizes[:1]}")
    if any(b >= a for a, b in zip(sizes, sizes[1:])):
        raise OrderingError(f"sizes must be strictly decreasing, got {sizes}")
    if sizes[-1] < 0:
        raise OrderingError("sizes must be nonnegative")

    rng = np.random.default_rng(seed)
    out = [SampledPartition(n=total, clusters=[list(c) for c in clusters])]
    prev = [list(c) for c in clusters]
    for target in sizes[1:]:
        pool = [list(c) for c in prev]
        sampled = [[] for _ in pool]
        for _ in range(target):
            remaining = sum(len(c) for c in pool)
            # integer-exact proportional draw: uniform slot over all examples
            slot = int(rng.integers(remaining))
            for ci, members in enumerate(pool):
                if slot < len(members):
                    pick = int(rng.integers(len(members)))
                    sampled[ci].append(members.pop(pick))
                    break
                slot -= len(members)
        sampled = [sorted(c) for c in sampled]
        out.append(SampledPartition(n=target, clusters=sampled))
        prev = sampled
    return out


def refine_consistency(tree: ClusterTree, partitions, k_list) -> dict:
    """Training sets indexed by (K, N), merged up the tree from sampled leaves.

    partitions come from partitioned_sample over the tree's leaves in
    depth-first order. Returns {(K, N): list of id lists (one per cluster)}.
    Raises ProvenanceError when sampled clusters are not subsets of the
    tree's leaves.
    """
    leaves = tree.leaves()
    for part in partitions:
        if len(part.clusters) != len(leaves):
            raise ProvenanceError(
                f"partition has {len(part.clusters)} clusters, tree has {len(leaves)} leaves"
            )
        for ids, leaf in zip(part.clusters, leaves):
            if not set(ids) <= set(leaf.members.tolist()):
                raise ProvenanceError(
                    f"sampled cluster is not a subset of leaf {leaf.node_id}"
                )

    leaf_pos = {id(leaf): i for i, leaf in enumerate(leaves)}
    out = {}
    for k in k_list:
        groups = tree.groups_at_level(k)
        for part in partitions:
            merged = []
            for group in groups:
                ids = []
                for leaf in group:
                    ids.extend(part.clusters[leaf_pos[id(leaf)]])
                merged.append(sorted(ids))
            out[(k, part.n)] = merged
    return out


def merge_clusters(tree: ClusterTree, merge_map) -> ClusterTree:
    """Rebuild the hierarchy with each merge group fused into one leaf.

    merge_map is a list of leaf-id groups that must exactly partition the
    tree's leaf node ids. The merged groups become the new leaves; a
    balanced binary hierarchy is rebuilt above them in the given order.
    """
    leaves = tree.leaves()
    by_id = {leaf.node_id: leaf for leaf in leaves}
    seen = [lid for group in merge_map for lid in group]
    if sorted(seen) != sorted(by_id.keys()):
        raise ValidationError(
            "merge_map must list every leaf id exactly once; "
            f"got {sorted(seen)} vs leaves {sorted(by_id.keys())}"
        )

    merged_members = []
    for group in merge_map:
        ids = np.sort(np.concatenate([by_id[lid].members for lid in group]))
        merged_members.append(ids)

    counter = [0]

    def build(groups, depth):
        node_id = counter[0]
        counter[0] += 1
        members = np.sort(np.concatenate(groups)) if len(groups) > 1 else groups[0]
        node = ClusterNode(node_id=node_id, members=members, depth=depth)
        if len(groups) > 1:
            half = (len(groups) + 1) // 2
            node.left = build(groups[:half], depth + 1)
            node.right = build(groups[half:], depth + 1)
        return node

    root = build(merged_members, 0)
    new_depth = 0
    stack = [(root, 0)]
    while stack:
        node, d = stack.pop()
        if node.is_leaf:
            new_depth = max(new_depth, d)
        else:
            stack.append((node.left, d + 1))
            stack.append((node.right, d + 1))
    return ClusterTree(root=root, depth=new_depth, seed=tree.seed)


def save_partitions(partitions, sizes, seed: int, path) -> None:
    payload = {
        "seed": int(seed),
        "sizes": [int(s) for s in sizes],
        "levels": [
            {"N": int(p.n), "clusters": [[int(i) for i in c] for c in p.clusters]}
            for p in partitions
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_partitions(path) -> tuple[list[SampledPartition], list[int], int]:
    with open(path) as f:
        payload = json.load(f)
    parts = [
        SampledPartition(n=level["N"], clusters=[list(c) for c in level["clusters"]])
        for level in payload["levels"]
    ]
    return parts, [int(s) for s in payload["sizes"]], int(payload["seed"])
