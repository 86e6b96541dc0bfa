"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

_STE_OPS = {"sign_ste", "straight_through"}


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict = field(default_factory=dict)
    surrogate: bool = False

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _graph_ops(out: T.Tensor) -> set:
    ops, stack, seen = set(), [out], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        ops.add(node.op)
        stack.extend(node._parents)
    return ops


def grad_check(fn, params, eps: float = 1e-6, max_entries: int | None = 64,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``params`` is a dict name -> Tensor (or a list). Straight-through operators are
    evaluated with their smooth surrogate forward, so the check covers the
    surrogate path; the report says so via ``surrogate``. Each parameter is scored
    by ``|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)`` over the checked entries
    (Euclidean norms). At most ``max_entries`` entries per parameter are probed.
    Gradients below the difference quotient's rounding floor (about
    ``1e3 * ulp * |f| / eps``) on both sides score zero: finite differences
    cannot resolve them, e.g. attention key biases, whose exact gradient is 0.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    rng = rng or np.random.default_rng(0)
    with T.surrogate_forward():
        for p in params.values():
            p.grad = None
        out = fn()
        surrogate = bool(_graph_ops(out) & _STE_OPS)
        out.backward()
        floor = max(1e-12, 1e3 * np.finfo(float).eps * max(1.0, abs(float(out.data))) / eps)
        analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

        report = GradCheckReport(0.0, surrogate=surrogate)
        with T.no_grad():
            for name, p in params.items():
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_entries is not None and flat.size > max_entries:
                    idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
                num = np.empty(idx.size)
                for j, i in enumerate(idx):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(fn().data)
                    flat[i] = orig - eps
                    fm = float(fn().data)
                    flat[i] = orig
                    num[j] = (fp - fm) / (2 * eps)
                ana = analytic[name].reshape(-1)[idx]
                denom = max(np.linalg.norm(ana), np.linalg.norm(num))
                err = 0.0 if denom < floor else float(np.linalg.norm(ana - num) / denom)
                report.per_param[name] = err
                report.max_rel_error = max(report.max_rel_error, err)
    return report
