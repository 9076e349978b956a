import numpy as np
import pytest

from scopegnn.graph import (
    Graph,
    GraphValidationError,
    drop_edges,
    erdos_renyi,
    load_graph,
    normalize_adjacency,
    sbm_classification_graph,
)


def write_dataset(tmp_path, edges, features, labels, masks):
    paths = {}
    paths["edge_path"] = tmp_path / "edges.tsv"
    paths["edge_path"].write_text(edges)
    paths["feature_path"] = tmp_path / "features.csv"
    paths["feature_path"].write_text(features)
    paths["label_path"] = tmp_path / "labels.csv"
    paths["label_path"].write_text(labels)
    paths["mask_path"] = tmp_path / "masks.txt"
    paths["mask_path"].write_text(masks)
    return paths


@pytest.fixture
def tiny_files(tmp_path):
    return write_dataset(
        tmp_path,
        edges="# comment line\n0\t1\n1\t2\n",
        features="1.0,0.0\n0.0,1.0\n1.0,1.0\n",
        labels="0,0\n1,1\n2,0\n",
        masks="train: 0\nval: 1\ntest: 2\n",
    )


class TestLoadGraph:
    def test_loads_small_graph(self, tiny_files):
        g = load_graph(**tiny_files)
        assert g.n_nodes == 3
        assert g.n_features == 2
        assert g.n_classes == 2
        assert g.edges.shape == (2, 2)

    def test_single_node_no_edges(self, tmp_path):
        paths = write_dataset(tmp_path, "", "0.5\n", "0,0\n", "train: 0\nval:\ntest:\n")
        g = load_graph(**paths)
        assert g.n_nodes == 1
        np.testing.assert_array_equal(g.a_hat, [[1.0]])

    def test_duplicate_edge_deduplicated(self, tmp_path):
        paths = write_dataset(
            tmp_path, "0\t1\n1\t0\n0\t1\n", "1.0\n2.0\n", "0,0\n1,1\n", "train: 0\nval: 1\ntest:\n"
        )
        assert load_graph(**paths).edges.shape[0] == 1

    def test_self_loop_in_input_ignored(self, tmp_path):
        paths = write_dataset(
            tmp_path, "0\t0\n0\t1\n", "1.0\n2.0\n", "0,0\n1,1\n", "train: 0\nval: 1\ntest:\n"
        )
        assert load_graph(**paths).edges.shape[0] == 1

    def test_out_of_range_edge_names_line(self, tiny_files, tmp_path):
        tiny_files["edge_path"].write_text("0\t9\n")
        with pytest.raises(GraphValidationError, match=":1:"):
            load_graph(**tiny_files)

    def test_overlapping_masks_rejected(self, tiny_files):
        tiny_files["mask_path"].write_text("train: 0 1\nval: 1\ntest: 2\n")
        with pytest.raises(GraphValidationError, match="two masks"):
            load_graph(**tiny_files)

    def test_ragged_features_rejected(self, tiny_files):
        tiny_files["feature_path"].write_text("1.0,0.0\n0.0\n1.0,1.0\n")
        with pytest.raises(GraphValidationError, match="width"):
            load_graph(**tiny_files)

    def test_masked_node_must_be_labeled(self, tiny_files):
        tiny_files["label_path"].write_text("0,0\n1,1\n")  # node 2 unlabeled but in test mask
        with pytest.raises(GraphValidationError, match="unlabeled"):
            load_graph(**tiny_files)


class TestNormalizeAdjacency:
    def test_isolated_node(self):
        a = normalize_adjacency(1, np.zeros((0, 2), dtype=np.int64))
        np.testing.assert_array_equal(a, [[1.0]])

    def test_two_node_path(self):
        a = normalize_adjacency(2, np.array([[0, 1]]))
        np.testing.assert_allclose(a, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
        eigs = np.sort(np.linalg.eigvalsh(a))
        np.testing.assert_allclose(eigs, [0.0, 1.0], atol=1e-12)

    def test_exact_symmetry_and_spectral_cap(self, rng):
        edges = erdos_renyi(20, 0.3, rng)
        a = normalize_adjacency(20, edges)
        assert np.max(np.abs(a - a.T)) == 0.0
        top = np.linalg.eigvalsh(a)[-1]
        assert abs(top - 1.0) < 1e-8

    def test_eigenvalue_one_multiplicity_counts_components(self, rng):
        # two disjoint triangles
        edges = np.array([[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5]])
        eigs = np.linalg.eigvalsh(normalize_adjacency(6, edges))
        assert np.sum(eigs > 1 - 1e-8) == 2


class TestDropEdges:
    def graph(self, n_edges, rng):
        edges = np.array([(i, i + 1) for i in range(n_edges)], dtype=np.int64)
        n = n_edges + 1
        feats = rng.normal(size=(n, 2))
        labels = np.zeros(n, dtype=np.int64)
        return Graph(n, edges, feats, labels, np.array([0]), np.array([1]), np.array([2]))

    def test_rate_zero_is_identity(self, rng):
        g = self.graph(10, rng)
        view = drop_edges(g, 0.0, rng)
        np.testing.assert_array_equal(view.a_hat, g.a_hat)

    def test_rate_half_keeps_floor(self, rng):
        g = self.graph(100, rng)
        assert drop_edges(g, 0.5, rng).edges.shape[0] == 50

    def test_original_untouched(self, rng):
        g = self.graph(10, rng)
        before = g.edges.copy()
        drop_edges(g, 0.5, rng)
        np.testing.assert_array_equal(g.edges, before)

    def test_bad_rate_rejected(self, rng):
        g = self.graph(5, rng)
        with pytest.raises(ValueError):
            drop_edges(g, 1.0, rng)
        with pytest.raises(ValueError):
            drop_edges(g, -0.1, rng)

    def test_retention_frequency(self, rng):
        g = self.graph(100, rng)
        counts = np.zeros(100)
        n_trials = 10_000
        for _ in range(n_trials):
            kept = drop_edges(g, 0.1, rng).edges
            counts[kept[:, 0]] += 1
        freq = counts / n_trials
        assert np.all(np.abs(freq - 0.9) < 0.01)

    def test_seeded_reproducibility(self):
        g = self.graph(50, np.random.default_rng(0))
        e1 = drop_edges(g, 0.3, np.random.default_rng(99)).edges
        e2 = drop_edges(g, 0.3, np.random.default_rng(99)).edges
        assert np.array_equal(e1, e2)


class TestSyntheticGraphs:
    def test_sbm_masks_are_disjoint_and_cover(self):
        g = sbm_classification_graph(nodes_per_block=30, rng=np.random.default_rng(0))
        all_ids = np.concatenate([g.train_mask, g.val_mask, g.test_mask])
        assert np.unique(all_ids).size == all_ids.size == g.n_nodes

    def test_sbm_features_separable_by_logistic_regression(self):
        # independent separability oracle for the end-to-end fixture
        from sklearn.linear_model import LogisticRegression

        g = sbm_classification_graph(nodes_per_block=30, rng=np.random.default_rng(7))
        clf = LogisticRegression(max_iter=1000).fit(
            g.features[g.train_mask], g.labels[g.train_mask]
        )
        assert clf.score(g.features[g.test_mask], g.labels[g.test_mask]) >= 0.8
