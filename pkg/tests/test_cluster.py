"""Clustering and partitioned-sampling tests, including Alg.-style
Monte-Carlo checks of the proportional draw."""

import numpy as np
import pytest

from partmix.cluster import (
    ClusterTree,
    hierarchical_kmeans,
    load_partitions,
    merge_clusters,
    partitioned_sample,
    refine_consistency,
    save_partitions,
    two_means,
)
from partmix.errors import OrderingError, ProvenanceError, ValidationError


def blob_data(rng, centers, per_blob, scale=0.1):
    pts = []
    labels = []
    for i, c in enumerate(centers):
        pts.append(np.asarray(c) + rng.normal(scale=scale, size=(per_blob, len(c))))
        labels.extend([i] * per_blob)
    return np.vstack(pts), np.asarray(labels)


class TestHierarchicalKmeans:
    def test_depth_zero_single_cluster(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(10, 3))
        tree = hierarchical_kmeans(data, depth=0, seed=1)
        leaves = tree.leaves()
        assert len(leaves) == 1
        np.testing.assert_array_equal(leaves[0].members, np.arange(10))

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(1)
        data, truth = blob_data(rng, [(0, 0), (10, 10)], per_blob=20)
        tree = hierarchical_kmeans(data, depth=1, seed=2)
        leaves = tree.leaves()
        assert len(leaves) == 2
        # oracle: label each point by its nearest true center
        oracle = np.argmin(
            [np.sum((data - np.array(c)) ** 2, axis=1) for c in [(0, 0), (10, 10)]],
            axis=0,
        )
        sets = [set(leaf.members.tolist()) for leaf in leaves]
        want = [set(np.where(oracle == i)[0].tolist()) for i in range(2)]
        assert sets == want or sets == want[::-1]

    def test_depth_four_partitions_input(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(40, 5))
        tree = hierarchical_kmeans(data, depth=4, seed=3)
        leaves = tree.leaves()
        assert len(leaves) <= 16
        all_ids = np.sort(np.concatenate([leaf.members for leaf in leaves]))
        np.testing.assert_array_equal(all_ids, np.arange(40))

    def test_children_partition_parent(self):
        rng = np.random.default_rng(3)
        data = rng.normal(size=(32, 4))
        tree = hierarchical_kmeans(data, depth=3, seed=4)
        stack = [tree.root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            left = set(node.left.members.tolist())
            right = set(node.right.members.tolist())
            assert left.isdisjoint(right)
            assert left | right == set(node.members.tolist())
            stack += [node.left, node.right]

    def test_short_leaf_recorded(self):
        rng = np.random.default_rng(4)
        data = np.vstack([rng.normal(scale=0.01, size=(4, 2)), [[100.0, 100.0]]])
        tree = hierarchical_kmeans(data, depth=2, seed=5)
        assert tree.short_leaves  # the singleton outlier branch stops early
        leaves = tree.leaves()
        total = sum(leaf.members.size for leaf in leaves)
        assert total == 5

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(50, 6))
        t1 = hierarchical_kmeans(data, depth=3, seed=9)
        t2 = hierarchical_kmeans(data.copy(), depth=3, seed=9)
        for a, b in zip(t1.leaves(), t2.leaves()):
            np.testing.assert_array_equal(a.members, b.members)

    def test_too_few_points_rejected(self):
        with pytest.raises(ValidationError):
            hierarchical_kmeans(np.zeros((3, 2)), depth=2, seed=0)

    def test_identical_points_still_split(self):
        labels = two_means(np.ones((6, 3)), np.random.default_rng(0))
        assert set(labels.tolist()) == {0, 1}

    def test_groups_at_level_requires_power_of_two(self):
        rng = np.random.default_rng(6)
        tree = hierarchical_kmeans(rng.normal(size=(16, 3)), depth=2, seed=0)
        with pytest.raises(ValidationError):
            tree.groups_at_level(3)
        with pytest.raises(ValidationError):
            tree.groups_at_level(8)  # deeper than the tree


class TestPartitionedSample:
    def make_clusters(self):
        return [list(range(0, 8)), list(range(8, 20)), list(range(20, 26))]

    def test_level_zero_identity(self):
        clusters = self.make_clusters()
        parts = partitioned_sample(clusters, [26], seed=0)
        assert len(parts) == 1
        assert [sorted(c) for c in parts[0].clusters] == clusters

    def test_sizes_must_start_at_total(self):
        with pytest.raises(OrderingError):
            partitioned_sample(self.make_clusters(), [20, 10], seed=0)

    def test_sizes_must_strictly_decrease(self):
        with pytest.raises(OrderingError):
            partitioned_sample(self.make_clusters(), [26, 13, 13], seed=0)

    def test_nesting_over_100_seeds(self):
        clusters = self.make_clusters()
        for seed in range(100):
            parts = partitioned_sample(clusters, [26, 13, 6, 3], seed=seed)
            sizes = [p.n for p in parts]
            assert sizes == [26, 13, 6, 3]
            for a, b in zip(parts, parts[1:]):
                assert sum(len(c) for c in b.clusters) == b.n
                for ca, cb in zip(a.clusters, b.clusters):
                    assert set(cb) <= set(ca)

    def test_monte_carlo_proportional_sizes(self):
        # clusters (80, 20), N=50: remaining counts are hypergeometric with
        # mean (40, 10); check the empirical mean within 3 sigma of it
        clusters = [list(range(80)), list(range(80, 100))]
        runs = 2000
        sizes = np.zeros((runs, 2))
        for seed in range(runs):
            parts = partitioned_sample(clusters, [100, 50], seed=seed)
            sizes[seed] = [len(c) for c in parts[1].clusters]
        var = 50 * 0.8 * 0.2 * (100 - 50) / (100 - 1)
        sigma_mean = np.sqrt(var / runs)
        assert abs(sizes[:, 0].mean() - 40.0) < 3 * sigma_mean
        assert abs(sizes[:, 1].mean() - 10.0) < 3 * sigma_mean
        assert np.all(sizes.sum(axis=1) == 50)

    def test_deterministic_given_seed(self):
        clusters = self.make_clusters()
        a = partitioned_sample(clusters, [26, 10, 4], seed=7)
        b = partitioned_sample(clusters, [26, 10, 4], seed=7)
        for pa, pb in zip(a, b):
            assert pa.clusters == pb.clusters

    def test_roundtrip_json(self, tmp_path):
        clusters = self.make_clusters()
        parts = partitioned_sample(clusters, [26, 12], seed=3)
        path = tmp_path / "parts.json"
        save_partitions(parts, [26, 12], 3, path)
        back, sizes, seed = load_partitions(path)
        assert sizes == [26, 12]
        assert seed == 3
        for pa, pb in zip(parts, back):
            assert pa.n == pb.n
            assert pa.clusters == pb.clusters


class TestRefineConsistency:
    def build(self, seed=0, n=64, depth=3):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(n, 4))
        tree = hierarchical_kmeans(data, depth=depth, seed=seed)
        leaf_sets = [leaf.members.tolist() for leaf in tree.leaves()]
        parts = partitioned_sample(leaf_sets, [n, n // 2, n // 4], seed=seed)
        return tree, parts

    def test_k1_is_union_of_sampled_leaves(self):
        tree, parts = self.build()
        table = refine_consistency(tree, parts, [1, 2, 4, 8])
        for part in parts:
            union = sorted(i for c in part.clusters for i in c)
            assert table[(1, part.n)] == [union]

    def test_k8_refines_k4(self):
        tree, parts = self.build(seed=1)
        table = refine_consistency(tree, parts, [4, 8])
        for part in parts:
            fine = table[(8, part.n)]
            coarse = table[(4, part.n)]
            for fc in fine:
                if not fc:
                    continue  # empty after sampling, vacuously refined
                parents = [c for c in coarse if set(fc) <= set(c)]
                assert len(parents) == 1

    def test_counts_sum_to_n(self):
        tree, parts = self.build(seed=2)
        table = refine_consistency(tree, parts, [1, 2, 4, 8])
        for (k, n), groups in table.items():
            assert sum(len(g) for g in groups) == n

    def test_foreign_ids_raise_provenance_error(self):
        tree, parts = self.build(seed=3)
        parts[1].clusters[0] = [9999]
        with pytest.raises(ProvenanceError):
            refine_consistency(tree, parts, [1, 2])


class TestMergeClusters:
    def build_tree(self, seed=0):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(32, 3))
        return hierarchical_kmeans(data, depth=2, seed=seed)

    def test_identity_merge_preserves_leaves(self):
        tree = self.build_tree()
        ids = [[leaf.node_id] for leaf in tree.leaves()]
        merged = merge_clusters(tree, ids)
        a = [leaf.members.tolist() for leaf in tree.leaves()]
        b = [leaf.members.tolist() for leaf in merged.leaves()]
        assert a == b

    def test_merge_all_gives_single_cluster(self):
        tree = self.build_tree(seed=1)
        merged = merge_clusters(tree, [[leaf.node_id for leaf in tree.leaves()]])
        leaves = merged.leaves()
        assert len(leaves) == 1
        assert leaves[0].members.size == 32

    def test_pair_merge_halves_k_conserves_members(self):
        tree = self.build_tree(seed=2)
        leaf_ids = [leaf.node_id for leaf in tree.leaves()]
        pairs = [leaf_ids[i:i + 2] for i in range(0, len(leaf_ids), 2)]
        merged = merge_clusters(tree, pairs)
        assert len(merged.leaves()) == len(leaf_ids) // 2
        total = sum(leaf.members.size for leaf in merged.leaves())
        assert total == 32

    def test_downstream_sampling_mechanics_unchanged(self):
        tree = self.build_tree(seed=3)
        leaf_ids = [leaf.node_id for leaf in tree.leaves()]
        merged = merge_clusters(tree, [leaf_ids[:2], leaf_ids[2:]])
        leaf_sets = [leaf.members.tolist() for leaf in merged.leaves()]
        parts = partitioned_sample(leaf_sets, [32, 16], seed=0)
        assert sum(len(c) for c in parts[1].clusters) == 16
        refined = refine_consistency(merged, parts, [1, 2])
        assert len(refined[(2, 16)]) == 2

    def test_non_partition_rejected(self):
        tree = self.build_tree(seed=4)
        leaf_ids = [leaf.node_id for leaf in tree.leaves()]
        with pytest.raises(ValidationError):
            merge_clusters(tree, [leaf_ids[:2]])  # missing leaves
        with pytest.raises(ValidationError):
            merge_clusters(tree, [leaf_ids, leaf_ids[:1]])  # duplicate
