"""Affine sampling grids and differentiable bilinear sampling.

Normalized coordinates are corner-aligned: -1 and +1 land on the centers of
the first and last pixel, so the identity transform and quarter turns map
pixels exactly onto pixels. Samples falling outside the map read zeros.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSize, ShapeMismatch
from .tensor import Tensor, record

IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    """``theta = (t1..t6)`` for the map ``[[t1, t2, t3], [t4, t5, t6]] @ (x, y, 1)``."""

    theta: tuple[float, float, float, float, float, float] = IDENTITY

    def __post_init__(self) -> None:
        t = tuple(float(v) for v in self.theta)
        if len(t) != 6 or not all(np.isfinite(t)):
            raise ValueError(f"AffineParams needs 6 finite values, got {self.theta!r}")
        object.__setattr__(self, "theta", t)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(IDENTITY)

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 form."""
        m = np.eye(3)
        m[:2] = np.reshape(self.theta, (2, 3))
        return m

    def as_tensor(self) -> Tensor:
        return Tensor(np.array(self.theta))


def compose_affine(a: AffineParams, b: AffineParams) -> AffineParams:
    """Parameters of sampling with ``a`` and then sampling the result with ``b``.

    ``grid_sample(grid_sample(x, a), b)`` reads ``x`` at ``A @ B @ p``, so the
    composite matrix is ``A @ B``.
    """
    m = a.matrix() @ b.matrix()
    return AffineParams(tuple(m[:2].reshape(-1)))


def _base_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    xt = (2.0 * np.arange(w) - (w - 1)) / (w - 1)
    yt = (2.0 * np.arange(h) - (h - 1)) / (h - 1)
    return xt, yt


def affine_grid(theta: Tensor | AffineParams, h: int, w: int) -> Tensor:
    """Source coordinates ``(x_s, y_s)`` for every pixel of an ``h x w`` output.

    ``theta`` of shape ``(6,)`` gives an ``h x w x 2`` grid; ``(N, 6)`` gives
    ``N x h x w x 2``.
    """
    if h < 2 or w < 2:
        raise DegenerateSize(f"affine_grid needs H, W >= 2, got {h}x{w}")
    if isinstance(theta, AffineParams):
        theta = theta.as_tensor()
    if theta.shape[-1] != 6 or theta.ndim not in (1, 2):
        raise ShapeMismatch(f"theta must have shape (6,) or (N, 6), got {theta.shape}")
    t = theta.data.reshape(-1, 2, 3)
    xt, yt = _base_coords(h, w)
    X = np.broadcast_to(xt[None, :], (h, w))
    Y = np.broadcast_to(yt[:, None], (h, w))
    # (x_s, y_s) = t[:, :, 0] * x_t + t[:, :, 1] * y_t + t[:, :, 2]
    grid = (
        t[:, None, None, :, 0] * X[None, :, :, None]
        + t[:, None, None, :, 1] * Y[None, :, :, None]
        + t[:, None, None, :, 2]
    )

    def bw(g):
        g = g.reshape(-1, h, w, 2)
        d = np.empty((g.shape[0], 2, 3))
        d[:, :, 0] = np.einsum("nhwk,hw->nk", g, X)
        d[:, :, 1] = np.einsum("nhwk,hw->nk", g, Y)
        d[:, :, 2] = g.sum(axis=(1, 2))
        return (d.reshape(theta.shape),)

    out = grid if theta.ndim == 2 else grid[0]
    return record("affine_grid", (theta,), out, bw)


def _unnormalize(coord: np.ndarray, size: int) -> np.ndarray:
    pix = (coord + 1.0) * (size - 1) * 0.5
    # Corner-aligned identity/quarter-turn grids can miss integers by an ulp.
    nearest = np.rint(pix)
    snap = np.abs(pix - nearest) <= 64 * np.finfo(float).eps * max(size, 1)
    return np.where(snap, nearest, pix)


def grid_sample(inp: Tensor, grid: Tensor) -> Tensor:
    """Bilinear read of ``inp`` (``C x H x W`` or ``N x C x H x W``) at ``grid``.

    Out-of-range neighbours contribute zero. The gradient with respect to a
    coordinate that sits exactly on an integer is the left derivative.
    """
    batched = inp.ndim == 4
    if inp.ndim not in (3, 4) or grid.ndim != inp.ndim or grid.shape[-1] != 2:
        raise ShapeMismatch(f"grid_sample: input {inp.shape}, grid {grid.shape}")
    U = inp.data if batched else inp.data[None]
    G = grid.data if batched else grid.data[None]
    n, c, h, w = U.shape
    if G.shape[0] != n:
        raise ShapeMismatch(f"grid_sample: batch {n} vs grid batch {G.shape[0]}")
    ho, wo = G.shape[1:3]
    p = ho * wo

    ws = _unnormalize(G[..., 0].reshape(n, p), w)
    hs = _unnormalize(G[..., 1].reshape(n, p), h)
    x0 = np.ceil(ws) - 1.0
    y0 = np.ceil(hs) - 1.0
    fx = ws - x0
    fy = hs - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat = U.reshape(n, c, h * w)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        vals = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (n, c, p)), axis=2)
        corners.append((idx, valid, vals * valid[:, None, :]))
    (i00, m00, u00), (i01, m01, u01), (i10, m10, u10), (i11, m11, u11) = corners

    wx1, wy1 = fx[:, None, :], fy[:, None, :]
    wx0, wy0 = 1.0 - wx1, 1.0 - wy1
    out = wy0 * (wx0 * u00 + wx1 * u01) + wy1 * (wx0 * u10 + wx1 * u11)
    out = out.reshape(n, c, ho, wo)

    def bw(g):
        g3 = g.reshape(n, c, p)
        d_inp = None
        if inp.requires_grad:
            base = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None] * (h * w)
            keys, weights = [], []
            for idx, valid, wgt in (
                (i00, m00, wy0 * wx0),
                (i01, m01, wy0 * wx1),
                (i10, m10, wy1 * wx0),
                (i11, m11, wy1 * wx1),
            ):
                keys.append((base + idx[:, None, :]).reshape(-1))
                weights.append((g3 * wgt * valid[:, None, :]).reshape(-1))
            d_inp = np.bincount(
                np.concatenate(keys), np.concatenate(weights), minlength=n * c * h * w
            ).reshape(n, c, h, w)
            d_inp = d_inp if batched else d_inp[0]
        d_grid = None
        if grid.requires_grad:
            d_ws = (g3 * (wy0 * (u01 - u00) + wy1 * (u11 - u10))).sum(axis=1)
            d_hs = (g3 * (wx0 * (u10 - u00) + wx1 * (u11 - u01))).sum(axis=1)
            d_grid = np.stack([d_ws * ((w - 1) * 0.5), d_hs * ((h - 1) * 0.5)], axis=-1)
            d_grid = d_grid.reshape(G.shape) if batched else d_grid.reshape(G.shape[1:])
        return d_inp, d_grid

    return record("grid_sample", (inp, grid), out if batched else out[0], bw)


def warp(inp: Tensor, theta: Tensor | AffineParams) -> Tensor:
    """``T_theta(inp)``: sample ``inp`` on the affine grid of its own size."""
    h, w = inp.shape[-2:]
    return grid_sample(inp, affine_grid(theta, h, w))
