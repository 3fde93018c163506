"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import AutodiffError, Parameter, Tape, Tensor, no_grad


class NonDeterministicError(AutodiffError):
    pass


@dataclass
class ParamReport:
    name: str
    probes: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamReport] = field(default_factory=list)
    total_probes: int = 0

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_abs_err(self) -> float:
        return max((p.max_abs_err for p in self.params), default=0.0)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def failures(self) -> list[ParamReport]:
        return [p for p in self.params if not p.passed]


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    probes: int = 100,
    step: float = 1e-3,
    rtol: float = 1e-3,
    atol: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    Every parameter gets at least one probe; the remainder are spread
    uniformly over all coordinates. A probe passes when its relative error
    is within ``rtol`` or its absolute error within ``atol``. Parameters
    should be float64 for the tolerances to be meaningful.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64)
                for p in params]

    def evaluate() -> float:
        with no_grad():
            return float(np.float64(loss_fn().data))

    base = evaluate()
    if evaluate() != base:
        raise NonDeterministicError("loss_fn returned different values for identical parameters")

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params])
    picks = [(i, int(rng.integers(sizes[i]))) for i in range(len(params))]
    extra = max(probes - len(picks), 0)
    if extra:
        owners = rng.choice(len(params), size=extra, p=sizes / sizes.sum())
        picks += [(int(i), int(rng.integers(sizes[i]))) for i in owners]

    stats: dict[int, list[tuple[float, float, bool]]] = {}
    for i, flat in picks:
        view = params[i].data.reshape(-1)
        orig = view[flat]
        view[flat] = orig + step
        fp = evaluate()
        view[flat] = orig - step
        fm = evaluate()
        view[flat] = orig
        numeric = (np.float64(fp) - np.float64(fm)) / (2.0 * step)
        a = analytic[i].reshape(-1)[flat]
        abs_err = abs(a - numeric)
        rel_err = abs_err / max(abs(a), abs(numeric), 1e-300)
        stats.setdefault(i, []).append((abs_err, rel_err, abs_err <= atol or rel_err <= rtol))

    report = GradCheckReport(total_probes=len(picks))
    for i, rows in sorted(stats.items()):
        report.params.append(ParamReport(
            name=params[i].name or f"param{i}",
            probes=len(rows),
            max_abs_err=max(r[0] for r in rows),
            max_rel_err=max(r[1] for r in rows),
            passed=all(r[2] for r in rows),
        ))
    for p in params:
        p.grad = None
    return report
