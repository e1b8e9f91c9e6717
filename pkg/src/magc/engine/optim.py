"""AdamW optimizer and finite-difference gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError
from .tensor import Tensor


class AdamW:
    """Decoupled-weight-decay Adam with bias correction.

    Keeps one first/second moment buffer per parameter; the step counter
    increases by exactly one per update() call.
    """

    def __init__(self, named_params, lr: float = 5e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"NaN/Inf gradient for parameter {name!r}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class GradCheckEntry:
    tensor_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    n_checked: int
    failures: list[GradCheckEntry] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(fn, tensors: list[Tensor], step: float = 1e-4,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued fn against central differences.

    All tensors should be float64; fn is re-evaluated 2x per element, so keep
    shapes small. The relative-error denominator is floored at 1e-3 of the
    largest gradient in the check, so elements whose true gradient is zero
    (e.g. biases absorbed by a normalization) are judged against the overall
    gradient scale instead of finite-difference roundoff. Entries with
    rel_err >= tol are collected as failures.
    """
    for t in tensors:
        t.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check: fn must return a scalar tensor")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    gmax = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(1e-8, 1e-3 * gmax)

    max_rel = 0.0
    worst = None
    failures: list[GradCheckEntry] = []
    n = 0
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            ana = float(analytic[ti].reshape(-1)[i])
            denom = max(abs(ana), abs(num), floor)
            rel = abs(ana - num) / denom
            n += 1
            entry = GradCheckEntry(ti, i, ana, num, rel)
            if rel > max_rel:
                max_rel = rel
                worst = entry
            if rel >= tol:
                failures.append(entry)
    return GradCheckReport(max_rel_err=max_rel, worst=worst, n_checked=n,
                           failures=failures)
