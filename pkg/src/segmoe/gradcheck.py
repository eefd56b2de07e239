"""Finite-difference gradient oracle.

Central differences on 64-bit floats are the independent check against the
autodiff engine: both must agree wherever the function is smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: int
    autodiff_at_worst: float
    fd_at_worst: float
    n_flagged: int


@dataclass
class GradCheckReport:
    step: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def ok(self) -> bool:
        return all(p.n_flagged == 0 for p in self.params)

    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if p.n_flagged > 0]

    def summary(self) -> str:
        lines = [f"gradcheck step={self.step:g} tol={self.tol:g}"]
        for p in self.params:
            mark = "FAIL" if p.n_flagged else "ok"
            lines.append(
                f"  {mark:4s} {p.name}: max_rel={p.max_rel_err:.3e}"
                f" (ad={p.autodiff_at_worst:.6e} fd={p.fd_at_worst:.6e} at flat index {p.worst_index})"
            )
        return "\n".join(lines)


def check_gradients(
    f: Callable[[Sequence[tuple[str, Tensor]]], Tensor],
    params: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar `f(params)` against central differences.

    Relative error uses denominator max(|ad|, |fd|, rel_floor); the floor keeps
    near-zero gradients from amplifying finite-difference noise into spurious
    flags. Raises on a non-finite loss.
    """
    named = [p if isinstance(p, tuple) else (f"p{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.zero_grad()
    loss = f(named)
    value = float(loss.data)
    if not math.isfinite(value):
        raise ValueError(f"gradcheck: non-finite loss {value}")
    loss.backward()
    autodiff = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named
    }

    report = GradCheckReport(step=step, tol=tol)
    for name, p in named:
        flat = p.data.reshape(-1)
        ad = autodiff[name].reshape(-1)
        worst = (0.0, 0, 0.0, 0.0)
        flagged = 0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                hi = float(f(named).data)
                flat[i] = orig - step
                lo = float(f(named).data)
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise ValueError(f"gradcheck: non-finite loss while perturbing {name}[{i}]")
            fd = (hi - lo) / (2.0 * step)
            rel = abs(ad[i] - fd) / max(abs(ad[i]), abs(fd), rel_floor)
            if rel > worst[0]:
                worst = (rel, i, ad[i], fd)
            if rel > tol:
                flagged += 1
        report.params.append(ParamCheck(name, worst[0], worst[1], worst[2], worst[3], flagged))
    return report
