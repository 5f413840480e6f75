import numpy as np
import pytest
from helpers import fd_grad

from topolidar import tensor as T
from topolidar.errors import ConfigError, InvariantError, ShapeError
from topolidar.graph import (
    GraphEncoder,
    GraphLayerParams,
    LatentGraph,
    PatchEmbed,
    add_positional_encoding,
    graph_layer,
    knn_edges,
    positional_encoding,
    write_graph_csvs,
)
from topolidar.rng import substream


def random_graph(seed, n=6, d=4, k=2):
    rng = substream(seed, "graph")
    nodes = T.Tensor(rng.normal(size=(n, d)), requires_grad=True)
    rows, cols = np.divmod(np.arange(n), 3)
    g = LatentGraph(nodes, None, np.stack([rows, cols], axis=1))
    return knn_edges(g, k, space="feature")


class TestPatchEmbed:
    def test_default_geometry_gives_full_scale_grid(self):
        embed = PatchEmbed(4, 8, 16, seed=0)
        img = T.Tensor(substream(0, "img").uniform(size=(1, 64, 1024)))
        g = embed(img)
        assert g.nodes.shape == (2048, 16)
        assert g.grid_shape == (16, 128)
        assert g.anchors.shape == (2048, 2)
        # anchors cover the grid exactly once
        assert len({tuple(a) for a in g.anchors}) == 2048

    def test_single_patch_degenerates_to_one_node(self):
        embed = PatchEmbed(8, 8, 6, seed=1)
        g = embed(T.Tensor(np.random.default_rng(0).uniform(size=(1, 8, 8))))
        assert g.nodes.shape == (1, 6)
        np.testing.assert_array_equal(g.anchors, [[0, 0]])

    def test_rolling_a_patch_width_permutes_grid_columns_exactly(self):
        embed = PatchEmbed(4, 8, 10, seed=2)
        img = substream(3, "roll").uniform(size=(1, 16, 64))
        base = embed(T.Tensor(img)).nodes.data.reshape(4, 8, 10)
        rolled = embed(T.Tensor(np.roll(img, 8, axis=2))).nodes.data.reshape(4, 8, 10)
        assert np.array_equal(rolled, np.roll(base, 1, axis=1))

    def test_non_divisible_dims_rejected(self):
        embed = PatchEmbed(4, 8, 8, seed=0)
        with pytest.raises(ShapeError):
            embed(T.Tensor(np.zeros((1, 10, 64))))

    def test_gradient_flows_to_conv_weights(self):
        embed = PatchEmbed(2, 2, 4, conv_channels=(3,), seed=4)
        img = T.Tensor(substream(4, "g").uniform(size=(1, 4, 4)))
        embed(img).nodes.sum().backward()
        assert embed.conv_w[0].grad is not None
        assert np.any(embed.conv_w[0].grad != 0)


class TestPositionalEncoding:
    def test_origin_anchor_alternates_zero_one(self):
        code = positional_encoding(np.array([[0, 0]]), 8)
        np.testing.assert_array_equal(code[0], [0, 1, 0, 1, 0, 1, 0, 1])

    def test_distinct_for_every_grid_cell(self):
        rows, cols = np.divmod(np.arange(16 * 128), 128)
        code = positional_encoding(np.stack([rows, cols], axis=1), 16)
        assert np.unique(code, axis=0).shape[0] == 16 * 128

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            positional_encoding(np.array([[0, 0]]), 7)

    def test_added_in_place_semantics(self):
        nodes = T.Tensor(np.ones((2, 8)))
        g = LatentGraph(nodes, None, np.array([[0, 0], [0, 1]]))
        out = add_positional_encoding(g)
        want = 1.0 + positional_encoding(g.anchors, 8)
        np.testing.assert_allclose(out.nodes.data, want)


class TestKnnEdges:
    def test_collinear_anchor_example(self):
        g = LatentGraph(T.Tensor(np.zeros((3, 2))), None, np.array([[0, 0], [0, 1], [0, 3]]))
        out = knn_edges(g, 1, space="anchor")
        np.testing.assert_array_equal(out.edges, [[1], [0], [1]])

    def test_complete_graph_at_k_n_minus_1(self):
        g = random_graph(0, n=5, d=3, k=4)
        for i, nbrs in enumerate(g.edges):
            assert sorted(nbrs) == sorted(set(range(5)) - {i})

    def test_wrapped_column_distance(self):
        anchors = np.stack([np.zeros(8, dtype=int), np.arange(8)], axis=1)
        g = LatentGraph(T.Tensor(np.zeros((8, 2))), None, anchors)
        out = knn_edges(g, 2, space="anchor", wrap_width=8)
        np.testing.assert_array_equal(out.edges[0], [1, 7])  # wrap tie, index order

    def test_duplicated_feature_rows_deterministic(self):
        feats = np.zeros((5, 3))
        feats[3] = 1.0
        g = LatentGraph(T.Tensor(feats), None, np.stack([np.zeros(5, int), np.arange(5)], axis=1))
        a = knn_edges(g, 2, space="feature").edges
        b = knn_edges(g, 2, space="feature").edges
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a[0], [1, 2])  # ties resolve to low indices

    def test_too_few_nodes_rejected(self):
        with pytest.raises(ConfigError):
            knn_edges(random_graph(0, n=3, d=2, k=1), 3)

    def test_unknown_space_rejected(self):
        with pytest.raises(ConfigError):
            knn_edges(random_graph(0), 2, space="hyperbolic")

    def test_no_self_loops(self):
        g = random_graph(5, n=9, d=4, k=5)
        for i, nbrs in enumerate(g.edges):
            assert i not in nbrs
            assert len(set(nbrs)) == 5


def make_params(seed, d_in, d_out, sum_branch=True):
    rng = substream(seed, "params")
    w_conv = T.Tensor(rng.normal(size=(2 * d_in, d_out)), requires_grad=True)
    w_sum = T.Tensor(rng.normal(size=(d_in, d_out)), requires_grad=True) if sum_branch else None
    return GraphLayerParams(w_conv, w_sum)


class TestGraphLayer:
    def test_requires_edges(self):
        g = LatentGraph(T.Tensor(np.zeros((3, 2))), None, np.zeros((3, 2), dtype=int))
        with pytest.raises(InvariantError):
            graph_layer(g, make_params(0, 2, 2))

    def test_k1_max_is_identity_over_single_candidate(self):
        g = random_graph(1, n=5, d=3, k=1)
        p = make_params(1, 3, 4)
        out = graph_layer(g, p)
        h = g.nodes.data
        nbr = h[g.edges[:, 0]]
        pre = np.hstack([h, nbr - h]) @ p.w_conv.data + nbr @ p.w_sum.data
        want = np.where(pre > 0, pre, 0.2 * pre)
        np.testing.assert_allclose(out.nodes.data, want, rtol=1e-12)

    def test_zero_features_give_zero_output(self):
        g = LatentGraph(
            T.Tensor(np.zeros((4, 3))), np.array([[1], [2], [3], [0]]), np.zeros((4, 2), int)
        )
        out = graph_layer(g, make_params(2, 3, 5))
        np.testing.assert_array_equal(out.nodes.data, np.zeros((4, 5)))

    def test_output_graph_bookkeeping(self):
        g = random_graph(3, n=6, d=4, k=2)
        out = graph_layer(g, make_params(3, 4, 4))
        assert out.edges is None
        assert out.layer_index == g.layer_index + 1
        np.testing.assert_array_equal(out.anchors, g.anchors)

    def test_gradients_match_finite_differences(self):
        rng = substream(6, "fd")
        nodes = rng.normal(size=(6, 3))
        edges = knn_edges(
            LatentGraph(T.Tensor(nodes), None, np.stack([np.zeros(6, int), np.arange(6)], axis=1)),
            2,
            space="feature",
        ).edges
        w_conv = rng.normal(size=(6, 3))
        w_sum = rng.normal(size=(3, 3))

        def run(nodes_a, wc_a, ws_a):
            g = LatentGraph(T.Tensor(nodes_a, requires_grad=True), edges, np.zeros((6, 2), int))
            p = GraphLayerParams(
                T.Tensor(wc_a, requires_grad=True), T.Tensor(ws_a, requires_grad=True)
            )
            return g, p, graph_layer(g, p).nodes.sum()

        g, p, loss = run(nodes, w_conv, w_sum)
        loss.backward()
        for i, (arr, grad) in enumerate(
            [(nodes, g.nodes.grad), (w_conv, p.w_conv.grad), (w_sum, p.w_sum.grad)]
        ):
            want = fd_grad(lambda *a: run(*a)[2].item(), [nodes, w_conv, w_sum], i)
            np.testing.assert_allclose(grad, want, rtol=1e-5, atol=1e-8)

    def test_permutation_equivariance_bit_exact(self):
        g = random_graph(7, n=8, d=4, k=3)
        p = make_params(7, 4, 4)
        base = graph_layer(g, p).nodes.data

        perm = substream(7, "perm").permutation(8)
        inv = np.argsort(perm)
        g2 = LatentGraph(
            T.Tensor(g.nodes.data[perm]), inv[g.edges[perm]], g.anchors[perm], g.layer_index
        )
        permuted = graph_layer(g2, p).nodes.data
        assert np.array_equal(permuted, base[perm])

    def test_neighbor_order_invariance(self):
        g = random_graph(8, n=8, d=4, k=3)
        p = make_params(8, 4, 4)
        base = graph_layer(g, p).nodes.data
        rng = substream(8, "shuffle")
        shuffled = np.stack([rng.permutation(row) for row in g.edges])
        g2 = LatentGraph(g.nodes, shuffled, g.anchors, g.layer_index)
        np.testing.assert_allclose(graph_layer(g2, p).nodes.data, base, rtol=1e-12, atol=1e-14)

    def test_sum_branch_flag_changes_output(self):
        g = random_graph(9, n=6, d=3, k=2)
        with_sum = graph_layer(g, make_params(9, 3, 3, sum_branch=True)).nodes.data
        without = graph_layer(g, make_params(9, 3, 3, sum_branch=False)).nodes.data
        assert not np.allclose(with_sum, without)

    def test_wrong_w_conv_rows_rejected(self):
        g = random_graph(10, n=6, d=3, k=2)
        bad = GraphLayerParams(T.Tensor(np.zeros((5, 3))), None)
        with pytest.raises(ShapeError):
            graph_layer(g, bad)


class TestEncoder:
    def test_toy_shapes_and_taps(self):
        enc = GraphEncoder(patch_h=4, patch_w=8, dim=16, k=6, n_layers=4, seed=0)
        img = T.Tensor(substream(0, "enc").uniform(size=(1, 16, 64)))
        latent, taps = enc(img)
        assert latent.shape == (4, 8, 16)
        assert sorted(taps) == [2, 4]
        assert taps[2].shape == (32, 16)
        assert taps[4].shape == (32, 16)

    def test_short_stack_only_taps_existing_layers(self):
        enc = GraphEncoder(patch_h=4, patch_w=8, dim=8, k=4, n_layers=2, seed=1)
        _, taps = enc(T.Tensor(np.zeros((1, 16, 64))))
        assert sorted(taps) == [2]

    def test_param_dict_covers_all_layers(self):
        enc = GraphEncoder(patch_h=4, patch_w=8, dim=8, k=4, n_layers=3, seed=2)
        names = set(enc.params())
        assert {"layer0.w_conv", "layer1.w_conv", "layer2.w_conv"} <= names
        assert {"embed.conv0.w", "embed.out.w"} <= names

    def test_horizontal_shift_equivariance_without_positional_code(self):
        gh, gw = 4, 8
        # pick a k whose k-th and (k+1)-th wrapped anchor distances differ
        # for every node, so the neighbor *set* is shift-invariant
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        dr = rows[:, None] - rows[None, :]
        dc = np.abs(cols[:, None] - cols[None, :])
        dc = np.minimum(dc, gw - dc)
        d2 = np.sort(dr * dr + dc * dc, axis=1)[:, 1:]  # drop self
        valid = [k for k in range(4, 16) if (d2[:, k - 1] < d2[:, k]).all()]
        assert valid, "no shell-closing k for this grid"
        k = valid[0]

        enc = GraphEncoder(
            patch_h=4, patch_w=8, dim=12, k=k, n_layers=3, use_positional=False, seed=3
        )
        img = substream(3, "shift").uniform(size=(1, 16, 64))
        base, _ = enc(T.Tensor(img))
        rolled, _ = enc(T.Tensor(np.roll(img, 8, axis=2)))
        np.testing.assert_allclose(
            rolled.data, np.roll(base.data, 1, axis=1), rtol=1e-9, atol=1e-12
        )

    def test_positional_code_breaks_shift_symmetry(self):
        enc = GraphEncoder(patch_h=4, patch_w=8, dim=12, k=6, n_layers=1, seed=4)
        img = substream(4, "shift2").uniform(size=(1, 16, 64))
        base, _ = enc(T.Tensor(img))
        rolled, _ = enc(T.Tensor(np.roll(img, 8, axis=2)))
        assert not np.allclose(rolled.data, np.roll(base.data, 1, axis=1))

    def test_needs_one_layer(self):
        with pytest.raises(ConfigError):
            GraphEncoder(n_layers=0)


def test_graph_csv_export(tmp_path):
    g = random_graph(11, n=5, d=3, k=2)
    edge_p, node_p = tmp_path / "edges.csv", tmp_path / "nodes.csv"
    write_graph_csvs(edge_p, node_p, g)
    edge_lines = edge_p.read_text().splitlines()
    assert edge_lines[0] == "node_id,neighbor_id,layer_index"
    assert len(edge_lines) == 1 + 5 * 2
    node_lines = node_p.read_text().splitlines()
    assert node_lines[0] == "id,anchor_row,anchor_col,feature_norm"
    assert len(node_lines) == 6
