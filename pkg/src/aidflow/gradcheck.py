"""Compare tape gradients with central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    size: int
    finite: bool = True

    def ok(self, tolerance: float) -> bool:
        return self.finite and self.max_rel_error < tolerance


@dataclass
class GradcheckReport:
    tolerance: float
    entries: list[ParamCheck] = field(default_factory=list)

    @property
    def failures(self) -> list[ParamCheck]:
        return [e for e in self.entries if not e.ok(self.tolerance)]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':40s} {'size':>7s} {'max_rel_err':>12s} {'max_abs_err':>12s}  status"]
        for e in self.entries:
            status = "ok" if e.ok(self.tolerance) else ("NONFINITE" if not e.finite else "FAIL")
            lines.append(f"{e.name:40s} {e.size:7d} {e.max_rel_error:12.3e} {e.max_abs_error:12.3e}  {status}")
        lines.append(f"{len(self.failures)} failure(s) at tolerance {self.tolerance:g}")
        return "\n".join(lines)


def gradcheck(
    model_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-6,
    eps: float = 1e-5,
    floor: float = 1e-4,
) -> GradcheckReport:
    """Check every entry of every parameter.

    ``model_fn`` must be deterministic and return a scalar tensor.  The
    relative error of a parameter is the max-norm of ``tape - numeric``
    divided by the larger max-norm of the two gradients (never below
    ``floor``, so parameters whose true gradient is 0 are judged by absolute
    error).
    """
    for p in params.values():
        p.grad = None
    loss = model_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }

    report = GradcheckReport(tolerance=tolerance)
    for name, p in params.items():
        a = analytic[name].astype(np.float64)
        if not np.all(np.isfinite(a)):
            report.entries.append(ParamCheck(name, float("inf"), float("inf"), p.size, finite=False))
            continue
        numeric = np.zeros(p.size, dtype=np.float64)
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"parameter {name} is not contiguous; cannot perturb in place")
        with no_grad():
            for i in range(p.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(model_fn().data)
                flat[i] = orig - eps
                f_minus = float(model_fn().data)
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        numeric = numeric.reshape(p.shape)
        if not np.all(np.isfinite(numeric)):
            report.entries.append(ParamCheck(name, float("inf"), float("inf"), p.size, finite=False))
            continue
        abs_err = float(np.max(np.abs(a - numeric))) if p.size else 0.0
        scale = max(float(np.max(np.abs(a))) if p.size else 0.0, float(np.max(np.abs(numeric))) if p.size else 0.0, floor)
        report.entries.append(ParamCheck(name, abs_err / scale, abs_err, p.size))
    return report
