"""Graph encoder: patch embedding, k-NN graphs, and max-pool message passing.

A range image is cut into a (gh, gw) grid of patches, each embedded by a
circular-convolution stack (columns wrap like the LiDAR azimuth does),
giving one node per patch. Layers rebuild a k-NN graph — over patch-grid
anchors at layer 0 (with wrapped column distance, keeping the cylinder
symmetry), over current features afterwards — and update each node by
max-pooling edge-conditioned candidates over its neighbors.

The per-neighbor candidate is LeakyReLU(W_conv . [h_v ; h_u - h_v] (+
W_sum . sum_u h_u)): the difference term carries local structure, the
optional sum branch carries the neighborhood aggregate, and the max picks
the strongest response. The aggregate branch is on by default and can be
disabled to ablate against the pure edge-difference form.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvariantError, ShapeError
from .rng import substream


@dataclass
class LatentGraph:
    nodes: T.Tensor  # (N, D)
    edges: np.ndarray | None  # (N, k) neighbor indices, or None before knn_edges
    anchors: np.ndarray  # (N, 2) integer (row, col) patch-grid coordinates
    layer_index: int = 0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return int(self.anchors[:, 0].max()) + 1, int(self.anchors[:, 1].max()) + 1


@dataclass
class GraphLayerParams:
    w_conv: T.Tensor  # (2*D_in, D_out)
    w_sum: T.Tensor | None  # (D_in, D_out); None disables the aggregate branch
    slope: float = 0.2


def _he(rng, fan_in: int, shape) -> T.Tensor:
    return T.Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class PatchEmbed:
    """Circular conv stack + per-patch flatten+linear, one node per patch."""

    def __init__(
        self,
        patch_h: int,
        patch_w: int,
        dim: int,
        in_channels: int = 1,
        conv_channels: tuple[int, ...] = (8, 16),
        slope: float = 0.2,
        seed: int = 0,
    ):
        self.patch_h, self.patch_w, self.dim = patch_h, patch_w, dim
        self.slope = slope
        self.conv_w: list[T.Tensor] = []
        self.conv_b: list[T.Tensor] = []
        cin = in_channels
        for i, cout in enumerate(conv_channels):
            rng = substream(seed, f"patch-conv{i}")
            self.conv_w.append(_he(rng, cin * 9, (cout, cin, 3, 3)))
            self.conv_b.append(T.Tensor(np.zeros((cout, 1, 1)), requires_grad=True))
            cin = cout
        rng = substream(seed, "patch-linear")
        flat = cin * patch_h * patch_w
        self.w_out = _he(rng, flat, (flat, dim))
        self.b_out = T.Tensor(np.zeros(dim), requires_grad=True)

    def params(self, prefix: str = "embed") -> dict[str, T.Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}.conv{i}.w"] = w
            out[f"{prefix}.conv{i}.b"] = b
        out[f"{prefix}.out.w"] = self.w_out
        out[f"{prefix}.out.b"] = self.b_out
        return out

    def __call__(self, values: T.Tensor) -> LatentGraph:
        """values: (C, H, W) image tensor -> graph over the patch grid."""
        c, h, w = values.shape
        if h % self.patch_h or w % self.patch_w:
            raise ShapeError(
                f"image {h}x{w} not divisible by patch {self.patch_h}x{self.patch_w}"
            )
        x = values
        for wk, bk in zip(self.conv_w, self.conv_b):
            x = T.leaky_relu(T.conv2d(T.pad2d(x, 1, 1, "zero"), wk) + bk, self.slope)
        gh, gw = h // self.patch_h, w // self.patch_w
        cc = x.shape[0]
        # (C, H, W) -> (gh, gw, C*ph*pw) patch-major
        x = x.reshape((cc, gh, self.patch_h, gw, self.patch_w))
        x = T.transpose(x, (1, 3, 0, 2, 4))
        x = x.reshape((gh * gw, cc * self.patch_h * self.patch_w))
        nodes = x @ self.w_out + self.b_out
        rows, cols = np.divmod(np.arange(gh * gw), gw)
        return LatentGraph(nodes, None, np.stack([rows, cols], axis=1))


def positional_encoding(anchors: np.ndarray, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal code: D/2 dims for the row axis, D/2 for column.

    Per axis the classic interleaved sin/cos over a geometric frequency
    progression (base 10000), so anchor (0, 0) reads sin(0)=0, cos(0)=1
    alternating.
    """
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dim, got {dim}")
    half = dim // 2
    out = np.empty((anchors.shape[0], dim))
    for axis in (0, 1):
        pos = anchors[:, axis].astype(np.float64)[:, None]
        j = np.arange(half)[None, :]
        angle = pos / np.power(10000.0, (j - j % 2) / half)
        block = np.where(j % 2 == 0, np.sin(angle), np.cos(angle))
        out[:, axis * half:(axis + 1) * half] = block
    return out


def add_positional_encoding(g: LatentGraph) -> LatentGraph:
    code = positional_encoding(g.anchors, g.nodes.shape[1])
    return replace(g, nodes=g.nodes + T.Tensor(code))


def knn_edges(g: LatentGraph, k: int, space: str = "feature", wrap_width: int | None = None) -> LatentGraph:
    """Attach k-nearest-neighbor lists; ties broken by smaller node index.

    space="anchor" measures on the integer patch-grid coordinates (with the
    column axis wrapped cylindrically when wrap_width is given);
    space="feature" measures on current node features.
    """
    n = g.n_nodes
    if n <= k:
        raise ConfigError(f"k-NN needs more nodes than neighbors: N={n}, k={k}")
    if space == "anchor":
        pts = g.anchors.astype(np.float64)
        dr = pts[:, None, 0] - pts[None, :, 0]
        dc = np.abs(pts[:, None, 1] - pts[None, :, 1])
        if wrap_width is not None:
            dc = np.minimum(dc, wrap_width - dc)
        d2 = dr * dr + dc * dc
    elif space == "feature":
        pts = g.nodes.data
        d2 = np.einsum("id,jd->ij", pts, pts)
        sq = np.einsum("id,id->i", pts, pts)
        d2 = sq[:, None] + sq[None, :] - 2.0 * d2
    else:
        raise ConfigError(f"unknown k-NN space {space!r}")
    np.fill_diagonal(d2, np.inf)
    # stable argsort keeps equal distances in index order
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return replace(g, edges=idx.astype(np.intp))


def graph_layer(g: LatentGraph, p: GraphLayerParams) -> LatentGraph:
    """Max-pool the per-neighbor candidates; returns a graph with edges cleared."""
    if g.edges is None or g.edges.shape[1] == 0:
        raise InvariantError("graph layer needs populated neighbor lists; run knn_edges first")
    n, d_in = g.nodes.shape
    k = g.edges.shape[1]
    d_out = p.w_conv.shape[1]
    if p.w_conv.shape[0] != 2 * d_in:
        raise ShapeError(f"w_conv expects rows 2*{d_in}, got {p.w_conv.shape[0]}")

    neigh = T.gather(g.nodes, g.edges.reshape(-1)).reshape((n, k, d_in))
    center = T.broadcast_to(g.nodes.reshape((n, 1, d_in)), (n, k, d_in))
    pair = T.concatenate([center, neigh - center], axis=2)
    pre = (pair.reshape((n * k, 2 * d_in)) @ p.w_conv).reshape((n, k, d_out))
    if p.w_sum is not None:
        agg = neigh.sum(axis=1) @ p.w_sum
        pre = pre + agg.reshape((n, 1, d_out))
    cand = T.leaky_relu(pre, p.slope)
    return LatentGraph(cand.max(axis=1), None, g.anchors, g.layer_index + 1)


class GraphEncoder:
    """patch_embed -> (+ positional code) -> L x (knn_edges, graph_layer)."""

    def __init__(
        self,
        patch_h: int = 4,
        patch_w: int = 8,
        dim: int = 16,
        k: int = 20,
        n_layers: int = 4,
        conv_channels: tuple[int, ...] = (8, 16),
        sum_branch: bool = True,
        use_positional: bool = True,
        tap_layers: tuple[int, ...] = (2, 4),
        slope: float = 0.2,
        seed: int = 0,
    ):
        if n_layers < 1:
            raise ConfigError(f"need at least one graph layer, got {n_layers}")
        self.k = k
        self.n_layers = n_layers
        self.use_positional = use_positional
        self.tap_layers = tuple(tap_layers)
        self.embed = PatchEmbed(patch_h, patch_w, dim, 1, conv_channels, slope, seed)
        self.layers: list[GraphLayerParams] = []
        for i in range(n_layers):
            rng = substream(seed, f"graph-layer{i}")
            w_conv = _he(rng, 2 * dim, (2 * dim, dim))
            # the aggregate branch sees a sum over k neighbors, so its
            # effective fan-in is k*dim; He at plain dim explodes the scale
            w_sum = _he(rng, k * dim, (dim, dim)) if sum_branch else None
            self.layers.append(GraphLayerParams(w_conv, w_sum, slope))

    def params(self) -> dict[str, T.Tensor]:
        out = self.embed.params()
        for i, lp in enumerate(self.layers):
            out[f"layer{i}.w_conv"] = lp.w_conv
            if lp.w_sum is not None:
                out[f"layer{i}.w_sum"] = lp.w_sum
        return out

    def __call__(self, values: T.Tensor) -> tuple[T.Tensor, dict[int, T.Tensor]]:
        """Returns (latent grid (gh, gw, D), taps {layer_no: (N, D) nodes})."""
        g = self.embed(values)
        if self.use_positional:
            g = add_positional_encoding(g)
        gh, gw = g.grid_shape
        taps: dict[int, T.Tensor] = {}
        for i in range(self.n_layers):
            if i == 0:
                g = knn_edges(g, self.k, space="anchor", wrap_width=gw)
            else:
                g = knn_edges(g, self.k, space="feature")
            g = graph_layer(g, self.layers[i])
            if g.layer_index in self.tap_layers:
                taps[g.layer_index] = g.nodes
        return g.nodes.reshape((gh, gw, g.nodes.shape[1])), taps


def write_graph_csvs(edge_path, node_path, g: LatentGraph) -> None:
    """Edge list (node_id, neighbor_id, layer_index) and node table for viewers."""
    from pathlib import Path

    edge_lines = ["node_id,neighbor_id,layer_index"]
    if g.edges is not None:
        for u, nbrs in enumerate(g.edges):
            edge_lines.extend(f"{u},{int(v)},{g.layer_index}" for v in nbrs)
    Path(edge_path).write_text("\n".join(edge_lines) + "\n", encoding="ascii")

    norms = np.linalg.norm(g.nodes.data, axis=1)
    node_lines = ["id,anchor_row,anchor_col,feature_norm"]
    node_lines.extend(
        f"{i},{int(r)},{int(c)},{norms[i]!r}" for i, (r, c) in enumerate(g.anchors)
    )
    Path(node_path).write_text("\n".join(node_lines) + "\n", encoding="ascii")
