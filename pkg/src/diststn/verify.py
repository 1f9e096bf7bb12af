"""Finite-difference gradient suites for ops, the spatial transformer and the model."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .model import DistStnModel, ModelConfig
from .nn import dense, mae_loss, softmax_cross_entropy
from .stn import affine_grid, grid_sample, warp
from .tensor import Tensor

SCOPES = ("ops", "stn", "model")


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.where(np.abs(x) < margin, np.copysign(margin, x) + x, x)


def _project(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Scalarize an output with a fixed random weighting so every entry matters."""
    w = Tensor(rng.normal(size=shape))
    return lambda t: ops.reduce_sum(ops.mul(t, w))


def ops_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []

    def check(name, fn, inputs, **kw):
        out.append((name, grad_check(fn, inputs, step=step, tol=tol, **kw)))

    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    for kind in ("add", "sub", "mul"):
        proj = _project(rng, (3, 4))
        check(kind, lambda a, b, k=kind, p=proj: p(ops.elementwise(a, b, k)), [a, b])

    m1, m2 = _param(rng, 3, 4), _param(rng, 4, 2)
    proj = _project(rng, (3, 2))
    check("matmul", lambda x, y: proj(ops.matmul(x, y)), [m1, m2])

    x, k, bias = _param(rng, 2, 5, 5), _param(rng, 3, 2, 3, 3), _param(rng, 3)
    proj = _project(rng, (3, 3, 3))
    check("conv2d", lambda x, k: proj(ops.conv2d(x, k)), [x, k])
    proj = _project(rng, (3, 3, 3))
    check("conv2d_strided_bias", lambda x, k, b: proj(ops.conv2d(x, k, b, stride=2, pad=1)), [x, k, bias])

    y, kt = _param(rng, 2, 3, 3), _param(rng, 2, 3, 4, 4)
    proj = _project(rng, (3, 6, 6))
    check("conv2d_transpose", lambda y, k: proj(ops.conv2d_transpose(y, k, stride=2, pad=1)), [y, kt])

    r = Tensor(_away_from_zero(rng.normal(size=(4, 5))), requires_grad=True)
    proj = _project(rng, (4, 5))
    check("relu", lambda t: proj(ops.relu(t)), [r])

    c1, c2 = _param(rng, 2, 3, 3), _param(rng, 3, 3, 3)
    proj = _project(rng, (5, 3, 3))
    check("concat_channels", lambda p, q: proj(ops.concat_channels(p, q)), [c1, c2])
    s = _param(rng, 5, 3, 3)
    pa, pb = _project(rng, (2, 3, 3)), _project(rng, (3, 3, 3))

    def split_fn(t):
        h, tl = ops.split_channels(t, 2)
        return ops.add(pa(h), pb(tl))

    check("split_channels", split_fn, [s])

    check("reduce_mean", lambda t: ops.reduce_mean(ops.mul(t, t)), [_param(rng, 6)])

    xv, w, bv = _param(rng, 5), _param(rng, 3, 5), _param(rng, 3)
    proj = _project(rng, (3,))
    check("dense", lambda x, w, b: proj(dense(x, w, b)), [xv, w, bv])

    logits = _param(rng, 4, 5)
    check("softmax_cross_entropy", lambda z: softmax_cross_entropy(z, [0, 3, 1, 4]), [logits])

    ma = _param(rng, 3, 4)
    mb = Tensor(ma.data + _away_from_zero(rng.normal(size=(3, 4))), requires_grad=True)
    check("mae_loss", lambda p, q: mae_loss(p, q), [ma, mb])
    return out


def _theta_off_lattice(rng: np.random.Generator, h: int, w: int, margin: float = 1e-3) -> np.ndarray:
    """A random near-identity theta whose sample points all sit >= margin from integers."""
    xt = (2.0 * np.arange(w) - (w - 1)) / (w - 1)
    yt = (2.0 * np.arange(h) - (h - 1)) / (h - 1)
    X, Y = np.meshgrid(xt, yt)
    while True:
        theta = np.array([1, 0, 0, 0, 1, 0]) + rng.normal(scale=0.15, size=6)
        xs = theta[0] * X + theta[1] * Y + theta[2]
        ys = theta[3] * X + theta[4] * Y + theta[5]
        ws = (xs + 1) * (w - 1) / 2
        hs = (ys + 1) * (h - 1) / 2
        frac = np.concatenate([ws.ravel(), hs.ravel()])
        frac = np.abs(frac - np.rint(frac))
        if frac.min() > margin:
            return theta


def stn_suite(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    out = []
    for c, h, w in ((1, 5, 5), (2, 6, 7), (3, 8, 8)):
        theta = Tensor(_theta_off_lattice(rng, h, w), requires_grad=True)
        u = _param(rng, c, h, w)
        proj = _project(rng, (c, h, w))
        rep = grad_check(lambda t, u: proj(warp(u, t)), [theta, u], step=step, tol=tol)
        out.append((f"warp_{c}x{h}x{w}", rep))

    theta = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    proj = _project(rng, (2, 4, 5, 2))
    rep = grad_check(lambda t: proj(affine_grid(t, 4, 5)), [theta], step=step, tol=tol)
    out.append(("affine_grid_batched", rep))

    g = Tensor(rng.uniform(-0.9, 0.9, size=(2, 6, 6, 2)), requires_grad=True)
    u = _param(rng, 2, 3, 6, 6)
    proj = _project(rng, (2, 3, 6, 6))
    rep = grad_check(lambda u, g: proj(grid_sample(u, g)), [u, g], step=step, tol=tol)
    out.append(("grid_sample_batched", rep))
    return out


def tiny_model(seed: int = 0) -> DistStnModel:
    """Small model with a pose network pushed off its identity initialization."""
    model = DistStnModel(ModelConfig.tiny(seed=seed))
    rng = np.random.default_rng(seed + 1)
    last = len(model.config.pose_hidden) + 1
    w = model.p(f"pose.fc{last}.weight")
    w.data[...] = rng.normal(scale=0.02, size=w.shape)
    b = model.p(f"pose.fc{last}.bias")
    b.data[...] += rng.normal(scale=0.05, size=6)
    for name, t in model.named_parameters():
        if name.endswith("bias") and name != f"pose.fc{last}.bias":
            t.data[...] = rng.normal(scale=0.05, size=t.shape)
    return model


def model_suite(
    seed: int = 0, step: float = 1e-5, tol: float = 1e-4, max_coords: int = 24
) -> list[tuple[str, GradCheckReport]]:
    model = tiny_model(seed)
    rng = np.random.default_rng(seed + 2)
    s = model.config.image_size
    x_i = rng.random((2, s, s))
    x_j = rng.random((2, s, s))
    y_i = np.array([0, 2])
    y_j = np.array([1, 1])
    out = []
    for group, grp in model.groups.items():
        names = list(grp.params)
        tensors = list(grp.params.values())

        def fn(*_):
            loss, _ = model.pair_loss(x_i, y_i, x_j, y_j, alpha=1.0, beta=1.0)
            return loss

        rep = grad_check(fn, tensors, step=step, tol=tol, max_coords=max_coords, seed=seed)
        out.append((f"pair_loss/{group}({','.join(names)})", rep))
    return out


def run_scope(scope: str, tol: float = 1e-4, step: float = 1e-5, seed: int = 0):
    if scope == "ops":
        return ops_suite(seed, step, tol)
    if scope == "stn":
        return stn_suite(seed, step, tol)
    if scope == "model":
        return model_suite(seed, step, tol)
    raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
