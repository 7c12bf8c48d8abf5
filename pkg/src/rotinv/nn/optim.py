from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ParamSet = dict  # name -> ndarray; insertion order is the canonical order


class NonFiniteGradientError(FloatingPointError):
    pass


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **hyper) -> "AdamState":
        st = cls(**hyper)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: ParamSet, grads: dict, state: AdamState) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified.

    Every gradient is checked before anything is updated, so a non-finite
    gradient leaves both params and state untouched.
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            raise KeyError(f"missing gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r} at step {state.t + 1}")

    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        dt = p.dtype.type
        m = dt(b1) * state.m[name] + dt(1 - b1) * g
        v = dt(b2) * state.v[name] + dt(1 - b2) * g * g
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        new_p[name] = p - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        new_m[name], new_v[name] = m, v
    out = AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_p, out
