"""Central finite-difference checks for the tensor engine."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradCheck:
    checked: int
    passed: int
    worst_abs: float
    worst_rel: float

    @property
    def fraction(self) -> float:
        return self.passed / self.checked if self.checked else 1.0


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3,
                 entries: np.ndarray | None = None) -> np.ndarray:
    """(f(x+h) - f(x-h)) / 2h for the selected flat entries of ``param`` (all by default)."""
    flat = param.data.reshape(-1)
    entries = np.arange(flat.size) if entries is None else entries
    out = np.zeros(len(entries))
    with T.no_grad():
        for n, i in enumerate(entries):
            old = flat[i]
            flat[i] = old + step
            up = fn().item()
            flat[i] = old - step
            down = fn().item()
            flat[i] = old
            out[n] = (up - down) / (2 * step)
    return out


def check_gradients(fn: Callable[[], Tensor], params: list[Tensor], step: float = 1e-3,
                    atol: float = 1e-3, rtol: float = 1e-2, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> GradCheck:
    """Compare backward() against central differences; an entry passes if abs OR rel error is in tolerance.

    ``fn`` must rebuild the graph on every call and be deterministic.
    """
    for p in params:
        p.grad = None
    T.backward(fn())
    checked = passed = 0
    worst_abs = worst_rel = 0.0
    for p in params:
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        entries = np.arange(p.data.size)
        if max_entries is not None and entries.size > max_entries:
            entries = np.sort((rng or np.random.default_rng(0)).choice(entries, max_entries, replace=False))
        numeric = numeric_grad(fn, p, step, entries)
        a = analytic[entries]
        err = np.abs(a - numeric)
        rel = err / np.maximum(np.abs(numeric), 1e-12)
        ok = (err <= atol) | (rel <= rtol)
        checked += len(entries)
        passed += int(ok.sum())
        worst_abs = max(worst_abs, float(err.max(initial=0)))
        worst_rel = max(worst_rel, float(np.where(err > atol, rel, 0).max(initial=0)))
    return GradCheck(checked, passed, worst_abs, worst_rel)
