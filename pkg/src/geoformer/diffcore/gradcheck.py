"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class LeafReport:
    name: str
    n_checked: int
    max_rel_err: float
    max_abs_err: float
    finite: bool = True


@dataclass
class GradCheckReport:
    leaves: list[LeafReport] = field(default_factory=list)
    tol: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((lf.max_rel_err for lf in self.leaves), default=0.0)

    @property
    def failures(self) -> list[LeafReport]:
        return [lf for lf in self.leaves if not lf.finite or lf.max_rel_err >= self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.
    ``max_entries`` limits the number of (randomly chosen) entries
    perturbed per leaf.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    for lf in leaves:
        if lf.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit leaves")
    names = list(names) if names is not None else [lf.name or f"leaf{i}" for i, lf in enumerate(leaves)]

    for lf in leaves:
        lf.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [
        lf.grad.copy() if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves
    ]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for lf, name, ga in zip(leaves, names, analytic):
        flat = lf.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst_rel = worst_abs = 0.0
        finite = bool(np.all(np.isfinite(ga)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                finite = False
                continue
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            abs_err = abs(a - num)
            rel = abs_err / max(abs(a), abs(num), floor)
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, abs_err)
        report.leaves.append(LeafReport(name, len(idx), worst_rel, worst_abs, finite))
    return report
