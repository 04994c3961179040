"""Central-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    checked: int
    max_rel_error: float
    tol: float
    failures: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status}: {self.checked} coordinates, max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"]
        for name, idx, a, n in self.failures[:20]:
            lines.append(f"  {name}{list(idx)}: analytic={a:.10g} numeric={n:.10g}")
        return "\n".join(lines)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    tol: float = 1e-4, max_coords: int | None = None,
                    names: Sequence[str] | None = None, seed: int = 0,
                    floor: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Error per coordinate is ``|a - n| / max(|a|, |n|, floor)``: relative for
    ordinary gradients, absolute (scaled by 1/floor) for near-zero ones whose
    finite-difference estimate is dominated by rounding.
    ``max_coords`` caps the coordinates probed per parameter (sampled without
    replacement, seeded); ``None`` probes every coordinate.
    """
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError(loss.op)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    failures = []
    worst = 0.0
    checked = 0
    with no_grad():
        for name, p, ga in zip(names, params, analytic):
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            if max_coords is None or max_coords >= flat.size:
                coords = np.arange(flat.size)
            else:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                fp = float(f().data)
                flat[c] = orig - h
                fm = float(f().data)
                flat[c] = orig
                num = (fp - fm) / (2.0 * h)
                a = float(ga.reshape(-1)[c])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
                checked += 1
                if err > tol:
                    failures.append((name, np.unravel_index(c, p.shape), a, num))
    return GradCheckReport(checked=checked, max_rel_error=worst, tol=tol, failures=failures)
