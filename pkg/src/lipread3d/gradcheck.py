"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tol: float
    worst: Optional[tuple[int, tuple[int, ...]]] = None
    failures: list[tuple[int, tuple[int, ...], float, float]] = field(default_factory=list)
    rechecked: int = 0  # entries that only passed at the smaller step (a ReLU/max kink inside +-h)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return (f"{state} max_rel_err={self.max_rel_error:.3e} checked={self.checked} tol={self.tol:g}"
                f" rechecked={self.rechecked}")


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(f: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-3, tol: float = 1e-4,
                    max_checks: Optional[int] = None, seed: int = 0, floor: float = 1e-8,
                    recheck: bool = True) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` w.r.t. ``wrt`` against central differences.

    ``wrt`` tensors are perturbed in place, so they should already hold the
    precision the check is meant to run at (float64 for tight tolerances).
    When ``max_checks`` is given, that many entries are sampled uniformly over
    all tensors; otherwise every entry is checked.

    With ``recheck``, an entry that fails is measured again at ``h/10``,
    ``h/100`` and ``h/1000``. A ReLU or max kink lying inside ``[x-h, x+h]``
    drops out once the step is smaller than its distance, while a wrong
    gradient keeps failing; such entries are counted in ``rechecked`` and
    scored by the first step that agrees.
    """
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = [np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64) for t in wrt]

    sizes = np.array([t.size for t in wrt])
    if max_checks is None or max_checks >= sizes.sum():
        picks = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    else:
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(sizes.sum()), size=max_checks, replace=False)
        offsets = np.cumsum(np.concatenate([[0], sizes]))
        picks = []
        for k in np.sort(flat):
            i = int(np.searchsorted(offsets, k, side="right") - 1)
            picks.append((i, int(k - offsets[i])))

    report = GradCheckReport(max_rel_error=0.0, checked=0, tol=tol)
    for i, j in picks:
        t = wrt[i]
        idx = np.unravel_index(j, t.shape)
        a = float(analytic[i][idx])
        numeric = _central(f, t, idx, h)
        err = relative_error(a, numeric, floor)
        if err > tol and recheck:
            for div in (10, 100, 1000):
                numeric_small = _central(f, t, idx, h / div)
                err_small = relative_error(a, numeric_small, floor)
                if err_small <= tol:
                    report.rechecked += 1
                    numeric, err = numeric_small, err_small
                    break
        report.checked += 1
        if err > report.max_rel_error:
            report.max_rel_error = err
            report.worst = (i, tuple(int(v) for v in idx))
        if err > tol:
            report.failures.append((i, tuple(int(v) for v in idx), a, numeric))
    return report


def grad_check(f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], h: float = 1e-3,
               tol: float = 1e-4, max_checks: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Check d f(x) / dx in 64-bit precision; ``x`` is copied, not modified."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    x64 = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    return check_gradients(lambda: f(x64), [x64], h=h, tol=tol, max_checks=max_checks, seed=seed)


def _central(f: Callable[[], Tensor], t: Tensor, idx, h: float) -> float:
    orig = t.data[idx]
    t.data[idx] = orig + h
    fp = float(f().data)
    t.data[idx] = orig - h
    fm = float(f().data)
    t.data[idx] = orig
    return (fp - fm) / (2 * h)
