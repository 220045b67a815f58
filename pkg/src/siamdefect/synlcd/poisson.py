"""Gradient-domain (Poisson) compositing on a 4-connected pixel grid."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

_OFFSETS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def poisson_blend(source: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend ``source`` into ``target`` inside ``mask``.

    Solves, for every masked pixel p,
    ``4 f_p - sum_{q in N(p)} f_q = sum_{q in N(p)} (g_p - g_q)`` where ``g`` is
    the source and ``f_q`` is the target value for neighbours outside the
    mask (Dirichlet boundary). Returns a float64 array; pixels outside the
    mask equal the target.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if source.shape != target.shape or source.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: source {source.shape}, target {target.shape}, mask {mask.shape}")
    out = target.copy()
    if not mask.any():
        return out
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise ValueError("mask touches the image border; no boundary pixels to anchor the solution")

    squeeze = source.ndim == 2
    if squeeze:
        source, target, out = source[..., None], target[..., None], out[..., None]

    ys, xs = np.nonzero(mask)
    n = ys.size
    index = -np.ones(mask.shape, dtype=np.int64)
    index[ys, xs] = np.arange(n)

    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 4.0)]
    rhs = np.zeros((n, source.shape[2]))
    for dy, dx in _OFFSETS:
        ny, nx = ys + dy, xs + dx
        rhs += source[ys, xs] - source[ny, nx]
        inside = mask[ny, nx]
        rows.append(np.nonzero(inside)[0])
        cols.append(index[ny[inside], nx[inside]])
        vals.append(np.full(int(inside.sum()), -1.0))
        outside = ~inside
        rhs[outside] += target[ny[outside], nx[outside]]

    a = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    solved = splu(a).solve(rhs)
    out[ys, xs] = solved
    return out[..., 0] if squeeze else out


def laplacian_residual(result: np.ndarray, guidance: np.ndarray, mask: np.ndarray) -> float:
    """Max |Laplacian(result) - Laplacian(guidance)| over masked pixels."""
    result = np.asarray(result, dtype=np.float64)
    guidance = np.asarray(guidance, dtype=np.float64)
    ys, xs = np.nonzero(np.asarray(mask).astype(bool))

    def lap(img):
        total = 4 * img[ys, xs]
        for dy, dx in _OFFSETS:
            total = total - img[ys + dy, xs + dx]
        return total

    if ys.size == 0:
        return 0.0
    return float(np.abs(lap(result) - lap(guidance)).max())
