"""0-dimensional persistent homology of point sets and the connectivity penalty.

For a Vietoris-Rips filtration on a finite point set, the 0-dim diagram is
determined by the Euclidean minimum spanning tree: every component is born
at radius 0, a component dies when an MST edge merges it into an older one,
and one essential component never dies. We compute the MST with Kruskal
over all pairwise distances plus union-find, record the merging ("critical")
edge for each finite pair, and define the penalty as total finite
persistence = total MST edge length. Its gradient pulls the endpoints of
every critical edge together, which is exactly the single-connected-
component attractor the loss is meant to enforce.

Ties between equal-length edges are broken lexicographically by (i, j)
index; the subgradient at a tie follows the selected edge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import EmptyInputError
from .rangeimage import RangeImage, ray_grid

INF = float("inf")


@dataclass(frozen=True)
class PersistencePair:
    birth: float
    death: float  # +inf for the essential pair
    edge: tuple[int, int] | None  # (u, v) killing edge; None for essential


@dataclass
class PersistenceDiagram:
    pairs: list[PersistencePair]

    def finite(self) -> list[PersistencePair]:
        return [p for p in self.pairs if p.death != INF]

    def total_persistence(self) -> float:
        return float(sum(p.death - p.birth for p in self.finite()))


class _UnionFind:
    __slots__ = ("parent", "rank")

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def _sorted_edges(coords: np.ndarray):
    """All (length, i, j) pairs, ascending by length then lexicographic index."""
    n = coords.shape[0]
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    iu, ju = np.triu_indices(n, k=1)
    lengths = dist[iu, ju]
    order = np.lexsort((ju, iu, lengths))  # length primary, then (i, j)
    return lengths[order], iu[order], ju[order]


def _mst_edges(coords: np.ndarray) -> list[tuple[float, int, int]]:
    """Kruskal MST edge list in merge order; empty for n < 2."""
    n = coords.shape[0]
    if n < 2:
        return []
    lengths, iu, ju = _sorted_edges(coords)
    uf = _UnionFind(n)
    out: list[tuple[float, int, int]] = []
    for d, u, v in zip(lengths, iu, ju):
        if uf.union(int(u), int(v)):
            out.append((float(d), int(u), int(v)))
            if len(out) == n - 1:
                break
    return out


def persistence_0d(points) -> PersistenceDiagram:
    """Diagram of the Vietoris-Rips filtration; pairs sorted death-descending.

    The essential pair (0, inf) comes first, so index 1 is the most
    persistent finite component and onwards.
    """
    coords = points.data if isinstance(points, T.Tensor) else np.asarray(points, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] == 0:
        raise EmptyInputError(f"persistence needs an N x D point set with N >= 1, got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise EmptyInputError("persistence input has non-finite coordinates")
    finite = [PersistencePair(0.0, d, (u, v)) for d, u, v in _mst_edges(coords)]
    finite.sort(key=lambda p: -p.death)
    return PersistenceDiagram([PersistencePair(0.0, INF, None)] + finite)


def topo_loss(points: T.Tensor, signed: bool = False) -> T.Tensor:
    """Total finite persistence = total MST length, differentiable in `points`.

    `signed=True` gives the literal sum of (birth - death), i.e., the
    negated value, for ablation against the connectivity-enforcing default.
    """
    n = points.shape[0]
    if n < 2:
        return T.Tensor(0.0)
    edges = _mst_edges(points.data)
    us = [u for _, u, v in edges]
    vs = [v for _, u, v in edges]
    diff = T.gather(points, us) - T.gather(points, vs)
    sq = (diff * diff).sum(axis=1)
    # a zero-length edge (duplicated point) contributes 0 loss and 0 gradient
    lengths = T.sqrt(sq)
    total = lengths.sum()
    return -total if signed else total


def stratified_pixel_sample(mask: np.ndarray, cap: int) -> np.ndarray:
    """Deterministic spread of at most `cap` True cells of an (H, W) mask.

    Occupied cells are taken in row-major order and thinned by an even
    stride, so a fixed image yields the same sample at any call site.
    """
    flat = np.flatnonzero(mask.reshape(-1))
    if flat.size <= cap:
        return flat
    idx = np.floor(np.arange(cap) * flat.size / cap).astype(np.intp)
    return flat[idx]


def differentiable_unprojection(values: T.Tensor, img: RangeImage, pixel_idx: np.ndarray) -> T.Tensor:
    """Points for the chosen pixels with coordinates differentiable in `values`.

    `values` is the (H, W) tensor the image was built from (e.g. a decoder
    output); ranges are denormalized along the fixed bin-center rays, so
    d(point)/d(value) = ray_dir * dr/dv.
    """
    h, w = img.height, img.width
    cfg = img.meta
    dirs = ray_grid(cfg, h, w).reshape(-1, 3)[pixel_idx]
    v = T.gather(values.reshape((h * w, 1)), pixel_idx)
    if cfg.log_scale:
        span = float(np.log(cfg.r_max) - np.log(cfg.r_min))
        r = T.exp(v * span + float(np.log(cfg.r_min)))
    else:
        r = v * (cfg.r_max - cfg.r_min) + cfg.r_min
    return r * T.Tensor(dirs)


def topo_loss_on_image(
    values: T.Tensor,
    img: RangeImage,
    sample_cap: int = 512,
    signed: bool = False,
) -> tuple[T.Tensor, bool]:
    """Connectivity penalty of a decoded range image.

    Returns (loss, degenerate): degenerate is True when fewer than two
    occupied pixels exist, in which case the loss is 0.
    """
    mask = img.occupancy()
    idx = stratified_pixel_sample(mask, sample_cap)
    if idx.size < 2:
        warnings.warn("topology penalty skipped: fewer than 2 occupied pixels", stacklevel=2)
        return T.Tensor(0.0), True
    pts = differentiable_unprojection(values, img, idx)
    return topo_loss(pts, signed=signed), False


def write_diagram_csv(path: str | Path, diagram: PersistenceDiagram) -> None:
    """Rows of (birth, death, u, v); death "inf" and empty endpoints when essential."""
    lines = ["birth,death,u,v"]
    for p in diagram.pairs:
        death = "inf" if p.death == INF else repr(p.death)
        u, v = ("", "") if p.edge is None else (str(p.edge[0]), str(p.edge[1]))
        lines.append(f"{p.birth!r},{death},{u},{v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")
