"""Shared oracles for the test suite."""

import math

import numpy as np

from topolidar import tensor as T


def fd_grad(f, arrays, index, h=1e-6):
    """Central finite differences of scalar f w.r.t. arrays[index]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[index])
    flat = g.reshape(-1)
    target = base[index].reshape(-1)
    for i in range(flat.size):
        orig = target[i]
        target[i] = orig + h
        hi = f(*base)
        target[i] = orig - h
        lo = f(*base)
        target[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return g


def check_grads(make_scalar, arrays, rtol=1e-5, atol=1e-7, h=1e-6):
    """Backward-pass gradients must match the finite-difference oracle."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = make_scalar(*ts)
    out.backward()

    def f(*raw):
        return make_scalar(*[T.Tensor(r) for r in raw]).item()

    for i, t in enumerate(ts):
        want = fd_grad(f, arrays, i, h=h)
        assert t.grad is not None
        np.testing.assert_allclose(t.grad, want, rtol=rtol, atol=atol)


def prim_mst_length(coords):
    """Total Euclidean MST length by Prim's algorithm; fsum for exactness."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if n < 2:
        return 0.0
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    in_tree = np.zeros(n, dtype=bool)
    in_tree[0] = True
    best = dist[0].copy()
    picked = []
    for _ in range(n - 1):
        j = int(np.argmin(np.where(in_tree, np.inf, best)))
        picked.append(float(best[j]))
        in_tree[j] = True
        best = np.minimum(best, dist[j])
    return math.fsum(picked)
