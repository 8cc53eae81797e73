"""Optimizers and the weight box projection used by critic training."""

from __future__ import annotations

import numpy as np

from .autodiff import NonFiniteError, Parameters

EPS_NUM = 1e-8


def _checked_grads(params: Parameters):
    grads = params.grads()
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    return grads


class RMSProp:
    """p -= lr * g / sqrt(acc + eps) with acc = decay*acc + (1-decay)*g^2.

    The accumulator is updated before the parameter.  A non-finite gradient
    raises before any state is touched.
    """

    def __init__(self, params: Parameters, lr=5e-5, decay=0.99):
        if lr <= 0 or not 0 < decay < 1:
            raise ValueError("need lr > 0 and 0 < decay < 1")
        self.params = params
        self.lr = lr
        self.decay = decay
        self.sq = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        grads = _checked_grads(self.params)
        for name, t in self.params.items():
            g = grads[name]
            acc = self.sq[name]
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            t.data -= (self.lr * g / np.sqrt(acc + EPS_NUM)).astype(t.data.dtype, copy=False)

    def state_arrays(self, prefix=""):
        return {f"{prefix}sq.{n}": a for n, a in self.sq.items()}

    def load_state_arrays(self, arrays, prefix=""):
        for n in self.sq:
            self.sq[n] = np.asarray(arrays[f"{prefix}sq.{n}"],
                                    dtype=self.sq[n].dtype).reshape(self.sq[n].shape).copy()


class Adam:
    """Bias-corrected first/second moment updates."""

    def __init__(self, params: Parameters, lr=1e-3, beta1=0.9, beta2=0.999):
        if lr <= 0:
            raise ValueError("need lr > 0")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self):
        grads = _checked_grads(self.params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, t in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + EPS_NUM)
            t.data -= update.astype(t.data.dtype, copy=False)

    def state_arrays(self, prefix=""):
        out = {f"{prefix}m.{n}": a for n, a in self.m.items()}
        out.update({f"{prefix}v.{n}": a for n, a in self.v.items()})
        out[f"{prefix}t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays, prefix=""):
        self.t = int(np.asarray(arrays[f"{prefix}t"]).reshape(-1)[0])
        for n in self.m:
            self.m[n] = np.asarray(arrays[f"{prefix}m.{n}"],
                                   dtype=self.m[n].dtype).reshape(self.m[n].shape).copy()
            self.v[n] = np.asarray(arrays[f"{prefix}v.{n}"],
                                   dtype=self.v[n].dtype).reshape(self.v[n].shape).copy()


def clip_to_box(params: Parameters, c, clip_names):
    """Project every parameter named in ``clip_names`` onto [-c, c], in place.

    Parameters outside the clip set are untouched.  Idempotent.
    """
    if c <= 0:
        raise ValueError("need c > 0")
    for name, t in params.items():
        if name in clip_names:
            np.clip(t.data, -c, c, out=t.data)
