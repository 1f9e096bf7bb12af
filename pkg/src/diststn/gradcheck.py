"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NotScalar
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    checked: int
    tol: float
    failing: list[tuple[int, int, float]] = field(default_factory=list)
    excluded: list[tuple[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} "
            f"checked={self.checked} excluded={len(self.excluded)} failing={len(self.failing)}"
        )


def _scalar(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    out = fn(*inputs)
    if out.size != 1:
        raise NotScalar(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    kink_tol: float | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*inputs)`` against central differences.

    Every input with ``requires_grad`` is probed. With ``max_coords`` set, at
    most that many coordinates per input are sampled (seeded).

    Each coordinate is probed at ``+-step`` and ``+-step/2``. On a smooth
    function the two central estimates agree to O(step^2) and the one-sided
    slope gap halves with the step; a kink inside the stencil breaks one of
    those. Such coordinates go to ``excluded`` instead of being scored.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
    with ``floor = 1e-5 * max(1, |f(x)|)`` so that zero gradients compare
    against rounding noise rather than against zero.
    """
    kink_tol = tol if kink_tol is None else kink_tol
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.size != 1:
        raise NotScalar(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    f0 = float(out.data.reshape(-1)[0])
    floor = 1e-5 * max(1.0, abs(f0))
    half = step / 2

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_err=0.0, checked=0, tol=tol)
    for which, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for k in coords:
            orig = flat[k]
            vals = []
            for delta in (step, -step, half, -half):
                flat[k] = orig + delta
                vals.append(_scalar(fn, inputs))
            flat[k] = orig
            fp, fm, fp2, fm2 = vals
            numeric = (fp - fm) / (2 * step)
            numeric_half = (fp2 - fm2) / step
            gap = (fp - 2 * f0 + fm) / step
            gap_half = (fp2 - 2 * f0 + fm2) / half
            a = float(analytic[k])
            scale = max(abs(a), abs(numeric), floor)
            kink = max(abs(numeric - numeric_half), abs(gap - 2 * gap_half) / 2)
            if kink > kink_tol * scale:
                report.excluded.append((which, int(k)))
                continue
            err = abs(a - numeric) / scale
            report.checked += 1
            if err >= tol:
                report.failing.append((which, int(k), err))
            report.max_rel_err = max(report.max_rel_err, err)
    for t in inputs:
        t.grad = None
    return report
