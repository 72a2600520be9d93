from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from mrcfa.core.nn import Parameter
from mrcfa.core.tensor import Tensor, backward


class NumericError(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tol}

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    model_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``model_fn()`` against central differences.

    ``max_entries`` caps how many entries per parameter are probed (chosen at
    random with ``seed``); ``None`` probes every entry. The relative error of
    an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = model_fn()
    _finite(loss.data, "loss")
    backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p in params:
        name = p.name or f"param{len(report.errors)}"
        _finite(analytic[id(p)], name)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        a_flat = analytic[id(p)].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = model_fn().item()
            flat[i] = orig - eps
            f_minus = model_fn().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(float(a_flat[i]), numeric, floor))
        report.errors[name] = worst
        report.checked[name] = int(idx.size)
    return report


def _finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
