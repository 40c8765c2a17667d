"""Central finite-difference check of autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    checked_values: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(fn, params, h: float = 1e-5, max_entries: int | None = None,
               seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``fn()`` against central differences.

    ``params`` is a ParamStore or a mapping name -> Tensor.  For each tensor the
    error is ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, floor * max(1, |f|))``
    over the checked entries. Finite-difference round-off grows with ``|f|``,
    so the floor does too; it keeps analytically-zero gradients (a key bias
    under softmax, say) from being judged on that noise alone.
    ``max_entries`` subsamples large tensors.
    """
    items = list(params.items())
    for _, t in items:
        t.grad = np.zeros_like(t.data)
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar tensor")
    backward(out)
    floor = floor * max(1.0, abs(out.item()))
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    for name, t in items:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ad = t.grad.reshape(-1)[idx]
        fd = np.empty(len(idx))
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                fd[j] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(ad), np.linalg.norm(fd), floor)
        err = float(np.linalg.norm(ad - fd) / denom)
        report.per_param[name] = err
        report.checked_values += len(idx)
        report.max_rel_error = max(report.max_rel_error, err)
    return report
