"""Dense tensor primitives with analytic forward/backward passes.

Everything downstream builds on these: row-wise layer normalization with
population variance, numerically stable softmax, bias-corrected Adam over a
named parameter store, and an independent central-difference gradient checker
used to verify every analytic backward pass in the package.

All arithmetic is 64-bit. The gradient checker is deliberately dumb: it only
ever calls the supplied loss function and never shares code with the analytic
backward passes it is checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .backends import kernels
from .errors import DimensionError, NumericError, StateError

Array = np.ndarray


def as_tensor(values, name: str = "tensor") -> Array:
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Array:
    """Normalize a vector with population variance, then scale and shift.

    output = gamma * (x - mean(x)) / sqrt(popvar(x) + eps) + beta
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise DimensionError("layer_norm expects a non-empty 1-D input")
    if gamma.shape != x.shape or beta.shape != x.shape:
        raise DimensionError(
            f"layer_norm length mismatch: x has {x.shape[0]} entries, "
            f"gamma {gamma.shape}, beta {beta.shape}"
        )
    if eps < 0:
        raise DimensionError("layer_norm eps must be >= 0")
    y, _, _ = kernels.layer_norm_fwd(x[None, :].copy(), gamma, beta, eps)
    return y[0]


def softmax(logits) -> Array:
    """Stable softmax of a vector (max-subtraction before exponentiation)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise DimensionError("softmax expects a non-empty 1-D input")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite entries")
    return kernels.softmax_rows(z[None, :].copy())[0]


def gelu(x) -> Array:
    """Exact (erf-based) GELU."""
    x = np.asarray(x, dtype=np.float64)
    y, _ = kernels.gelu_fwd(np.ascontiguousarray(x.reshape(1, -1)))
    return y.reshape(x.shape)


@dataclass
class ParamStore:
    """Named parameters with matching gradient slots and Adam state.

    Invariant: every parameter has a same-shape gradient slot; the moment
    buffers mirror the parameters; ``step`` counts completed Adam updates.
    """

    params: dict[str, Array]
    grads: dict[str, Array]
    m: dict[str, Array] = field(repr=False, default_factory=dict)
    v: dict[str, Array] = field(repr=False, default_factory=dict)
    step: int = 0

    @classmethod
    def from_params(cls, params: Mapping[str, Array]) -> "ParamStore":
        own = {k: np.array(p, dtype=np.float64) for k, p in params.items()}
        return cls(
            params=own,
            grads={k: np.zeros_like(p) for k, p in own.items()},
            m={k: np.zeros_like(p) for k, p in own.items()},
            v={k: np.zeros_like(p) for k, p in own.items()},
            step=0,
        )

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def set_grads(self, grads: Mapping[str, Array]) -> None:
        for name, g in grads.items():
            slot = self.grads.get(name)
            if slot is None:
                raise StateError(f"no gradient slot for parameter {name!r}")
            if slot.shape != np.shape(g):
                raise DimensionError(
                    f"gradient shape {np.shape(g)} does not match parameter "
                    f"{name!r} of shape {slot.shape}"
                )
            slot[...] = g

    def clone(self) -> "ParamStore":
        return ParamStore(
            params={k: p.copy() for k, p in self.params.items()},
            grads={k: g.copy() for k, g in self.grads.items()},
            m={k: x.copy() for k, x in self.m.items()},
            v={k: x.copy() for k, x in self.v.items()},
            step=self.step,
        )


def adam_update(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Apply one bias-corrected Adam step in place.

    Gradient slots are left untouched; the caller zeroes them. Returns the
    store for convenience.
    """
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("beta1 and beta2 must lie in [0, 1)")
    for name in store.params:
        if name not in store.grads:
            raise StateError(f"uninitialized gradient slot for {name!r}")
        if name not in store.m or name not in store.v:
            raise StateError(f"uninitialized optimizer state for {name!r}")
    t = store.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.step = t
    return store


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and central-difference
    gradients, with denominator floor 1e-8."""

    max_rel_errors: dict[str, float]
    passed: bool
    perturbation: float
    tolerance: float

    @property
    def worst(self) -> tuple[str, float] | None:
        if not self.max_rel_errors:
            return None
        name = max(self.max_rel_errors, key=self.max_rel_errors.get)
        return name, self.max_rel_errors[name]


LossAndGrad = Callable[[ParamStore], "tuple[float, Mapping[str, Array]]"]


def check_gradients(
    fn: LossAndGrad,
    store: ParamStore,
    h: float = 1e-5,
    tol: float = 1e-5,
    param_names: "list[str] | None" = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``fn`` maps the store to a scalar loss and its analytic parameter
    gradients; it must be deterministic given the store. Every coordinate of
    every checked parameter is perturbed by +-h and the quotient
    (L(p+h) - L(p-h)) / 2h is compared against the analytic entry with
    relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    loss0, analytic = fn(store)
    if not np.isfinite(loss0):
        raise NumericError("loss is non-finite at the evaluation point")
    names = list(store.params) if param_names is None else list(param_names)
    errors: dict[str, float] = {}
    for name in names:
        p = store.params[name]
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise DimensionError(
                f"analytic gradient for {name!r} has shape {a.shape}, "
                f"expected {p.shape}"
            )
        worst = 0.0
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            lp, _ = fn(store)
            flat[i] = keep - h
            lm, _ = fn(store)
            flat[i] = keep
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(
                    f"loss is non-finite while perturbing {name!r}[{i}]"
                )
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            err = abs(aflat[i] - numeric) / denom
            if err > worst:
                worst = err
        errors[name] = worst
    return GradCheckReport(
        max_rel_errors=errors,
        passed=all(e <= tol for e in errors.values()),
        perturbation=h,
        tolerance=tol,
    )
