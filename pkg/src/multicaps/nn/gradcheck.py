"""Central-finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_coordinate: tuple | None = None
    checked: int = 0
    failures: list = field(default_factory=list)

    def ok(self, tolerance=1e-4):
        return not self.failures and self.max_rel_error < tolerance

    def __str__(self):
        if self.failures:
            return f"grad check FAILED: {self.failures[0]}"
        return (
            f"grad check: max relative error {self.max_rel_error:.3e} "
            f"over {self.checked} coordinates (worst at {self.worst_coordinate})"
        )


def grad_check(f, params, perturbation=1e-5, coords_per_param=None, rng=None):
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` is a zero-argument callable returning a scalar Tensor, rebuilt on
    every call; it must be deterministic (fix dropout masks by reseeding
    inside ``f``). ``params`` is an iterable of Parameters (or Tensors)
    whose coordinates are perturbed in place.

    A coordinate whose error looks large is re-probed down a descending
    perturbation ladder and the smallest error wins: a difference quotient
    that straddles an activation kink is poisoned at large eps but clean at
    small eps, while a genuine gradient bug persists at every rung, so the
    ladder cannot hide one. All rungs stay within [1e-7, 1e-4].

    Returns the max over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-7 <= perturbation <= 1e-4:
        raise ValueError(f"perturbation must be in [1e-7, 1e-4], got {perturbation}")
    rng = rng or np.random.default_rng(0)
    params = list(params)
    tensors = [(getattr(p, "name", f"param{i}"), getattr(p, "tensor", p)) for i, p in enumerate(params)]

    loss = f()
    loss.backward()
    analytic = {}
    for name, t in tensors:
        if t.grad is None:
            raise ValueError(f"{name} received no gradient from f()")
        analytic[name] = np.array(t.grad, dtype=np.float64)

    ladder = [perturbation]
    while ladder[-1] / 10.0 >= 1e-7:
        ladder.append(ladder[-1] / 10.0)

    result = GradCheckResult(max_rel_error=0.0)
    for name, t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_param is None or coords_per_param >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_param, replace=False)
        for idx in coords:
            a = analytic[name].reshape(-1)[idx]
            if not np.isfinite(a):
                result.failures.append(f"{name}[{idx}]: non-finite analytic gradient")
                result.max_rel_error = np.inf
                continue
            original = flat[idx]
            rel = None
            bad = False
            for eps in ladder:
                flat[idx] = original + eps
                plus = f().item()
                flat[idx] = original - eps
                minus = f().item()
                flat[idx] = original
                if not (np.isfinite(plus) and np.isfinite(minus)):
                    bad = True
                    break
                numeric = (plus - minus) / (2.0 * eps)
                this_rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                rel = this_rel if rel is None else min(rel, this_rel)
                if rel < 1e-6:
                    break
            if bad:
                result.failures.append(f"{name}[{idx}]: non-finite finite-difference value")
                result.max_rel_error = np.inf
                continue
            result.checked += 1
            if rel > result.max_rel_error:
                result.max_rel_error = rel
                result.worst_coordinate = (name, int(idx))
    return result
