import numpy as np
import pytest

from gatfusion.errors import ConfigError, FormatError, ValidationError
from gatfusion import graphs as gr
from gatfusion.numerics import make_rng


def brute_force_knn_neighborhoods(feats, k, avail):
    """Exhaustive k-NN with (distance, index) sorting, then union symmetrize."""
    n = feats.shape[0]
    selected = {}
    for i in range(n):
        if not avail[i]:
            continue
        cands = []
        for j in range(n):
            if j == i or not avail[j]:
                continue
            d = float(np.sum((feats[i] - feats[j]) ** 2))
            cands.append((d, j))
        cands.sort()
        selected[i] = {j for _, j in cands[:k]}
    nbrs = {i: ({i} if avail[i] else set()) for i in range(n)}
    for i, js in selected.items():
        for j in js:
            nbrs[i].add(j)
            nbrs[j].add(i)
    return nbrs


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def union_find_components(g):
    uf = UnionFind(g.num_nodes)
    for i in range(g.num_nodes):
        for j in g.in_neighbors(i):
            uf.union(i, int(j))
    touched = {i for i in range(g.num_nodes) if g.degrees[i] > 0}
    return len({uf.find(i) for i in touched})


class TestKnnGraph:
    def test_three_points_on_a_line(self):
        feats = np.array([[0.0], [1.0], [10.0]])
        g = gr.knn_graph(feats, k=1)
        np.testing.assert_array_equal(g.in_neighbors(0), [0, 1])
        np.testing.assert_array_equal(g.in_neighbors(1), [0, 1, 2])
        np.testing.assert_array_equal(g.in_neighbors(2), [1, 2])

    @pytest.mark.parametrize("seed,k,p_avail", [
        (0, 1, 1.0), (1, 3, 1.0), (2, 10, 1.0),
        (3, 3, 0.8), (4, 5, 0.6), (5, 1, 0.5),
    ])
    def test_matches_brute_force(self, seed, k, p_avail):
        rng = make_rng(seed)
        n = 40
        feats = rng.normal(size=(n, 4))
        avail = rng.random(n) < p_avail
        avail[: k + 2] = True  # keep enough available nodes for k
        g = gr.knn_graph(feats, k, available=avail)
        expected = brute_force_knn_neighborhoods(feats, k, avail)
        for i in range(n):
            np.testing.assert_array_equal(
                g.in_neighbors(i), sorted(expected[i]), err_msg=f"node {i}"
            )

    def test_duplicate_rows_tie_break_to_lower_index(self):
        feats = np.zeros((4, 2))
        g = gr.knn_graph(feats, k=1)
        # 0 picks 1; 1, 2, 3 all pick 0
        np.testing.assert_array_equal(g.in_neighbors(0), [0, 1, 2, 3])
        np.testing.assert_array_equal(g.in_neighbors(1), [0, 1])
        np.testing.assert_array_equal(g.in_neighbors(2), [0, 2])
        np.testing.assert_array_equal(g.in_neighbors(3), [0, 3])

    def test_unavailable_rows_are_never_read(self):
        rng = make_rng(6)
        feats = rng.normal(size=(20, 3))
        avail = np.ones(20, dtype=bool)
        avail[[3, 11, 17]] = False
        poisoned = feats.copy()
        poisoned[~avail] = np.nan
        g1 = gr.knn_graph(feats, k=4, available=avail)
        g2 = gr.knn_graph(poisoned, k=4, available=avail)
        assert g1.equals(g2)
        for i in (3, 11, 17):
            assert g1.degrees[i] == 0

    def test_every_available_node_has_self_loop(self):
        rng = make_rng(7)
        feats = rng.normal(size=(15, 2))
        avail = rng.random(15) < 0.7
        avail[:5] = True
        g = gr.knn_graph(feats, k=2, available=avail)
        for i in range(15):
            assert (i in g.in_neighbors(i)) == bool(avail[i])

    def test_symmetry_of_union(self):
        rng = make_rng(8)
        g = gr.knn_graph(rng.normal(size=(30, 3)), k=4)
        nbrs = [set(map(int, g.in_neighbors(i))) for i in range(30)]
        for i in range(30):
            for j in nbrs[i]:
                assert i in nbrs[j]

    def test_relabeling_permutes_adjacency(self):
        rng = make_rng(9)
        feats = rng.normal(size=(25, 3))
        perm = rng.permutation(25)
        pos = np.argsort(perm)  # original id -> new id
        g1 = gr.knn_graph(feats, k=3)
        g2 = gr.knn_graph(feats[perm], k=3)
        for new_i in range(25):
            expected = sorted(pos[j] for j in g1.in_neighbors(perm[new_i]))
            np.testing.assert_array_equal(g2.in_neighbors(new_i), expected)

    def test_deterministic(self):
        feats = make_rng(10).normal(size=(20, 4))
        assert gr.knn_graph(feats, k=3).equals(gr.knn_graph(feats, k=3))

    def test_k_bounds(self):
        feats = np.zeros((5, 2))
        with pytest.raises(ConfigError):
            gr.knn_graph(feats, k=0)
        with pytest.raises(ConfigError):
            gr.knn_graph(feats, k=5)
        avail = np.array([True, True, True, False, False])
        with pytest.raises(ConfigError):
            gr.knn_graph(feats, k=3, available=avail)


class TestMiGraph:
    def test_weight_accumulates_gender_and_age(self):
        meta = gr.MetaInfo(
            apoe4=np.array([1, 1, 0]),
            gender=np.array([0, 0, 0]),
            age=np.array([30.0, 31.0, 30.0]),
        )
        g = gr.mi_graph(meta)
        np.testing.assert_array_equal(g.in_neighbors(0), [0, 1])
        e01 = g.indptr[0] + 1
        assert g.src[e01] == 1
        assert g.weights[e01] == 3  # base + same gender + ages within 2
        np.testing.assert_array_equal(g.in_neighbors(2), [2])

    def test_age_window_is_inclusive_at_two_years(self):
        meta = gr.MetaInfo(
            apoe4=np.array([0, 0, 0]),
            gender=np.array([0, 1, 1]),
            age=np.array([50.0, 52.0, 52.1]),
        )
        g = gr.mi_graph(meta)
        w = {(int(s), int(d)): int(wt) for s, d, wt in zip(g.src, g.dst, g.weights)}
        assert w[(1, 0)] == 2  # genders differ, ages within 2
        assert w[(2, 0)] == 1  # genders differ, gap 2.1
        assert w[(2, 1)] == 3

    def test_self_loop_weight_is_reflexive_rule(self):
        meta = gr.MetaInfo(
            apoe4=np.array([2]), gender=np.array([1]), age=np.array([70.0])
        )
        g = gr.mi_graph(meta)
        assert g.weights[0] == 3

    def test_different_apoe4_never_connects(self):
        meta = gr.MetaInfo(
            apoe4=np.array([0, 1, 2]),
            gender=np.array([0, 0, 0]),
            age=np.array([60.0, 60.0, 60.0]),
        )
        g = gr.mi_graph(meta)
        for i in range(3):
            np.testing.assert_array_equal(g.in_neighbors(i), [i])

    def test_validation(self):
        with pytest.raises(ValidationError):
            gr.mi_graph(gr.MetaInfo(np.array([3]), np.array([0]), np.array([60.0])))
        with pytest.raises(ValidationError):
            gr.mi_graph(gr.MetaInfo(np.array([1]), np.array([0]), np.array([np.nan])))
        # invalid meta on unavailable nodes is ignored
        meta = gr.MetaInfo(np.array([1, 9]), np.array([0, 0]), np.array([60.0, np.nan]))
        g = gr.mi_graph(meta, available=np.array([True, False]))
        assert g.degrees[1] == 0

    def test_symmetric(self):
        rng = make_rng(11)
        n = 30
        meta = gr.MetaInfo(
            apoe4=rng.integers(0, 3, n),
            gender=rng.integers(0, 2, n),
            age=rng.uniform(50, 90, n),
        )
        g = gr.mi_graph(meta)
        pairs = {(int(s), int(d)): int(w) for s, d, w in zip(g.src, g.dst, g.weights)}
        for (s, d), w in pairs.items():
            assert pairs[(d, s)] == w


class TestFcGraph:
    def test_stats_of_complete_graph(self):
        g = gr.fc_graph(4)
        stats = gr.graph_stats(g)
        np.testing.assert_array_equal(stats.degree_histogram, [0, 0, 0, 0, 4])
        assert stats.component_count == 1
        assert stats.disconnected_count == 0

    def test_fully_unavailable_graph_has_zero_components(self):
        g = gr.fc_graph(5, available=np.zeros(5, dtype=bool))
        assert g.num_edges == 0
        stats = gr.graph_stats(g)
        assert stats.component_count == 0
        assert stats.disconnected_count == 5


class TestGraphStats:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_component_count_matches_union_find(self, seed):
        rng = make_rng(seed)
        n = 30
        feats = rng.normal(size=(n, 2))
        avail = rng.random(n) < 0.7
        avail[:4] = True
        g = gr.knn_graph(feats, k=2, available=avail)
        assert gr.graph_stats(g).component_count == union_find_components(g)

    def test_two_cliques(self):
        a = gr.fc_graph(6, available=np.array([1, 1, 1, 0, 0, 0], dtype=bool))
        b = gr.fc_graph(6, available=np.array([0, 0, 0, 1, 1, 1], dtype=bool))
        merged_src = np.concatenate([
            a.in_neighbors(i) if i < 3 else b.in_neighbors(i) for i in range(6)
        ])
        degs = [3] * 6
        indptr = np.concatenate(([0], np.cumsum(degs)))
        g = gr.Graph(6, indptr, merged_src, np.ones(merged_src.size, dtype=np.int64))
        stats = gr.graph_stats(g)
        assert stats.component_count == 2
        assert stats.disconnected_count == 0


class TestAttachTestNodes:
    def test_line_example(self):
        train = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
        test = np.array([[0.4], [3.6]])
        g_train = gr.knn_graph(train, k=2)
        g = gr.attach_test_nodes(g_train, train, test, k=2)
        assert g.num_nodes == 7
        np.testing.assert_array_equal(g.in_neighbors(5), [0, 1, 5])
        np.testing.assert_array_equal(g.in_neighbors(6), [3, 4, 6])

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_matches_brute_force(self, seed):
        rng = make_rng(seed)
        n_train, n_test, k = 30, 8, 4
        train = rng.normal(size=(n_train, 3))
        test = rng.normal(size=(n_test, 3))
        train_avail = rng.random(n_train) < 0.8
        train_avail[: k + 1] = True
        test_avail = rng.random(n_test) < 0.8
        g_train = gr.knn_graph(train, k, available=train_avail)
        g = gr.attach_test_nodes(
            g_train, train, test, k,
            train_available=train_avail, test_available=test_avail,
        )
        for t in range(n_test):
            node = n_train + t
            if not test_avail[t]:
                assert g.degrees[node] == 0
                continue
            cands = sorted(
                (float(np.sum((test[t] - train[j]) ** 2)), j)
                for j in range(n_train) if train_avail[j]
            )
            expected = sorted(j for _, j in cands[:k]) + [node]
            np.testing.assert_array_equal(g.in_neighbors(node), expected)

    def test_train_rows_carried_byte_identically(self):
        rng = make_rng(5)
        train = rng.normal(size=(20, 3))
        g_train = gr.knn_graph(train, k=3)
        g = gr.attach_test_nodes(g_train, train, rng.normal(size=(4, 3)), k=3)
        n_e = g_train.num_edges
        np.testing.assert_array_equal(g.indptr[:21], g_train.indptr)
        np.testing.assert_array_equal(g.src[:n_e], g_train.src)
        np.testing.assert_array_equal(g.weights[:n_e], g_train.weights)

    def test_no_test_to_test_edges(self):
        rng = make_rng(6)
        train = rng.normal(size=(15, 2))
        test = rng.normal(size=(6, 2))
        g = gr.attach_test_nodes(gr.knn_graph(train, k=2), train, test, k=2)
        for t in range(6):
            node = 15 + t
            others = [v for v in g.in_neighbors(node) if v != node]
            assert all(v < 15 for v in others)

    def test_perturbing_test_features_leaves_train_rows_alone(self):
        rng = make_rng(7)
        train = rng.normal(size=(12, 2))
        g_train = gr.knn_graph(train, k=2)
        g1 = gr.attach_test_nodes(g_train, train, rng.normal(size=(3, 2)), k=2)
        g2 = gr.attach_test_nodes(g_train, train, rng.normal(size=(3, 2)) + 50.0, k=2)
        np.testing.assert_array_equal(g1.indptr[:13], g2.indptr[:13])
        np.testing.assert_array_equal(
            g1.src[: g_train.num_edges], g2.src[: g_train.num_edges]
        )

    def test_errors(self):
        train = np.zeros((4, 2))
        g_train = gr.fc_graph(4)
        test = np.zeros((2, 2))
        with pytest.raises(ConfigError):
            gr.attach_test_nodes(g_train, train, test, k=5)
        with pytest.raises(ConfigError):
            gr.attach_test_nodes(g_train, train, test, k=0)
        with pytest.raises(ConfigError):
            gr.attach_test_nodes(
                gr.fc_graph(4, available=np.zeros(4, dtype=bool)),
                train, test, k=1,
                train_available=np.zeros(4, dtype=bool),
            )


class TestEdgeListIo:
    def test_round_trip(self, tmp_path):
        rng = make_rng(8)
        g = gr.knn_graph(rng.normal(size=(12, 3)), k=3)
        path = tmp_path / "g.edges"
        gr.write_edgelist(g, path)
        assert g.equals(gr.read_edgelist(path))

    def test_round_trip_preserves_weights(self, tmp_path):
        meta = gr.MetaInfo(
            apoe4=np.array([0, 0, 1, 0]),
            gender=np.array([0, 0, 1, 1]),
            age=np.array([60.0, 61.0, 70.0, 80.0]),
        )
        g = gr.mi_graph(meta)
        path = tmp_path / "mi.edges"
        gr.write_edgelist(g, path)
        assert g.equals(gr.read_edgelist(path))

    def test_header_and_sorted_lines(self, tmp_path):
        g = gr.fc_graph(3)
        path = tmp_path / "fc.edges"
        gr.write_edgelist(g, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "nodes 3"
        triples = [tuple(map(int, ln.split())) for ln in lines[1:]]
        assert triples == sorted(triples)
        assert len(triples) == 9

    @pytest.mark.parametrize("content,fragment", [
        ("", "empty"),
        ("vertices 3\n0 1 1\n", "nodes"),
        ("nodes x\n", "integer"),
        ("nodes 2\n0 1\n", "src dst weight"),
        ("nodes 2\n0 2 1\n", "out of range"),
        ("nodes 2\n0 1 0\n", "positive"),
        ("nodes 2\n0 1 1\n0 1 2\n", "duplicate"),
        ("nodes 2\n0 a 1\n", "non-integer"),
    ])
    def test_malformed_inputs(self, tmp_path, content, fragment):
        path = tmp_path / "bad.edges"
        path.write_text(content)
        with pytest.raises(FormatError, match=fragment):
            gr.read_edgelist(path)


class TestGraphValidation:
    def test_unsorted_neighbor_list_rejected(self):
        with pytest.raises(ValidationError, match="increasing"):
            gr.Graph(
                num_nodes=2,
                indptr=np.array([0, 2, 2]),
                src=np.array([1, 0]),
                weights=np.ones(2, dtype=np.int64),
            )

    def test_out_of_range_src_rejected(self):
        with pytest.raises(ValidationError):
            gr.Graph(
                num_nodes=2,
                indptr=np.array([0, 1, 1]),
                src=np.array([5]),
                weights=np.ones(1, dtype=np.int64),
            )

    def test_duplicate_in_neighbor_rejected(self):
        with pytest.raises(ValidationError):
            gr.Graph(
                num_nodes=2,
                indptr=np.array([0, 2, 2]),
                src=np.array([1, 1]),
                weights=np.ones(2, dtype=np.int64),
            )
