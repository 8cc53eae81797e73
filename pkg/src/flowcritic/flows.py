"""The invertible generator: stacked affine couplings with factor-out.

Conventions
-----------
``forward`` maps latent ``z0`` to data ``z1``; ``inverse`` goes back.  Both
spaces use the same D-dimensional indexing, so factoring a dimension out
simply means no later (closer-to-data) level touches it again.  Every
coupling leaves its pass-through columns fixed and maps the rest through
``y = x * exp(s) + t`` where (s, t) are functions of the pass-through
columns only; the log-Jacobian-determinant of the whole map is the running
sum of ``s`` over transformed columns.  ``log_prob`` is then the standard
normal log-density of the inferred latent minus that sum.

The log-det returned by *both* directions is log|det dz1/dz0|, i.e. the
forward-direction value at the corresponding point.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor

LEVEL_COUPLINGS = {1: (7,), 2: (7, 6), 3: (7, 6, 6)}
SCALE_CAP = 4.0

LOG_2PI = float(np.log(2.0 * np.pi))


class AffineCoupling:
    """One coupling: two tanh hidden layers feeding a capped scale head and a shift head.

    Head weights start at zero, so a fresh layer is the identity map.
    """

    def __init__(self, params: Parameters, prefix, pass_idx, out_idx,
                 hidden_width, rng, dtype, scale_cap=SCALE_CAP):
        self.pass_idx = np.asarray(pass_idx, dtype=np.intp)
        self.out_idx = np.asarray(out_idx, dtype=np.intp)
        if len(self.pass_idx) == 0 or len(self.out_idx) == 0:
            raise ValueError("coupling needs at least one pass-through and one transformed dim")
        self.scale_cap = scale_cap
        p, o, h = len(self.pass_idx), len(self.out_idx), hidden_width

        def w(shape, fan_in):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        self.W1 = params.add(f"{prefix}.W1", w((p, h), p), dtype=dtype)
        self.b1 = params.add(f"{prefix}.b1", np.zeros(h), dtype=dtype)
        self.W2 = params.add(f"{prefix}.W2", w((h, h), h), dtype=dtype)
        self.b2 = params.add(f"{prefix}.b2", np.zeros(h), dtype=dtype)
        self.Ws = params.add(f"{prefix}.Ws", np.zeros((h, o)), dtype=dtype)
        self.bs = params.add(f"{prefix}.bs", np.zeros(o), dtype=dtype)
        self.Wt = params.add(f"{prefix}.Wt", np.zeros((h, o)), dtype=dtype)
        self.bt = params.add(f"{prefix}.bt", np.zeros(o), dtype=dtype)

    def _scale_shift(self, x_pass):
        h = ad.tanh(ad.affine(x_pass, self.W1, self.b1))
        h = ad.tanh(ad.affine(h, self.W2, self.b2))
        s = self.scale_cap * ad.tanh(ad.affine(h, self.Ws, self.bs))
        t = ad.affine(h, self.Wt, self.bt)
        return s, t

    def forward(self, x):
        s, t = self._scale_shift(ad.gather_cols(x, self.pass_idx))
        y_out = ad.gather_cols(x, self.out_idx) * ad.exp(s) + t
        return ad.scatter_cols(x, self.out_idx, y_out), s.sum(axis=1)

    def inverse(self, y):
        s, t = self._scale_shift(ad.gather_cols(y, self.pass_idx))
        x_out = (ad.gather_cols(y, self.out_idx) - t) * ad.exp(-1.0 * s)
        return ad.scatter_cols(y, self.out_idx, x_out), s.sum(axis=1)


class FlowModel:
    """Couplings stored in generation (latent -> data) order, plus their params."""

    def __init__(self, layers, params, D, levels, hidden_width):
        self.layers = layers
        self.params = params
        self.D = D
        self.levels = levels
        self.hidden_width = hidden_width

    def forward(self, z0):
        """z0 -> (z1, log|det dz1/dz0|), both per batch row."""
        x = z0 if isinstance(z0, Tensor) else Tensor(z0)
        logdet = None
        for i, layer in enumerate(self.layers):
            x, ld = layer.forward(x)
            if not np.isfinite(x.data).all():
                raise ad.NonFiniteError(f"non-finite output of coupling {i}")
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def inverse(self, x):
        """z1 -> (z0, log|det dz1/dz0| at that point)."""
        y = x if isinstance(x, Tensor) else Tensor(x)
        logdet = None
        for i, layer in enumerate(reversed(self.layers)):
            y, ld = layer.inverse(y)
            if not np.isfinite(y.data).all():
                raise ad.NonFiniteError(f"non-finite output of coupling {len(self.layers) - 1 - i}")
            logdet = ld if logdet is None else logdet + ld
        return y, logdet

    def _prior_logpdf(self, z0):
        return -0.5 * (z0 * z0).sum(axis=1) - (0.5 * self.D * LOG_2PI)

    def log_prob(self, x):
        """Exact per-example log-density in nats."""
        z0, logdet = self.inverse(x)
        return self._prior_logpdf(z0) - logdet

    def sample(self, n, seed):
        """Draw n examples; returns (x, log_prob) as arrays."""
        if n < 1:
            raise ValueError("need n >= 1")
        rng = np.random.default_rng(seed)
        z0 = rng.standard_normal((n, self.D))
        with ad.no_grad():
            z0 = Tensor(z0.astype(self.dtype, copy=False))
            z1, logdet = self.forward(z0)
            logp = self._prior_logpdf(z0) - logdet
        return z1.data, logp.data

    def partial_resample(self, x, half, seed):
        """Invert, redraw one half of the latent from the prior, regenerate."""
        if half not in ("first", "second"):
            raise ValueError("half must be 'first' or 'second'")
        rng = np.random.default_rng(seed)
        k = self.D // 2
        idx = np.arange(0, k) if half == "first" else np.arange(k, self.D)
        with ad.no_grad():
            z0, _ = self.inverse(x)
            z = z0.data.copy()
            z[:, idx] = rng.standard_normal((z.shape[0], len(idx))).astype(self.dtype, copy=False)
            y, _ = self.forward(Tensor(z))
        return y.data

    @property
    def dtype(self):
        return self.params.tensors()[0].data.dtype

    def mask_coverage(self):
        """How many layers transform each coordinate (static check)."""
        counts = np.zeros(self.D, dtype=int)
        for layer in self.layers:
            counts[layer.out_idx] += 1
        return counts


def build_nvp(levels, D, hidden_width, seed, dtype="f64", scale_cap=SCALE_CAP):
    """Build the generator for 1, 2 or 3 factor-out levels (7/13/19 couplings).

    Construction runs in the normalizing direction: the first level's
    couplings act on all D dims, then the dims at even positions of the
    active list are frozen as latents and the next level transforms the
    rest.  Masks alternate between even and odd positions of the active
    list, flipping every layer.
    """
    if levels not in LEVEL_COUPLINGS:
        raise ValueError(f"levels must be 1, 2 or 3, got {levels}")
    if D < 2:
        raise ValueError("need D >= 2")
    rng = np.random.default_rng(seed)
    params = Parameters()
    active = list(range(D))
    normalizing_order = []
    k = 0
    counts = LEVEL_COUPLINGS[levels]
    for level, n_couplings in enumerate(counts):
        if len(active) < 2:
            raise ValueError(f"D={D} too small to factor at {levels} levels")
        for _ in range(n_couplings):
            parity = k % 2
            pass_idx = [d for pos, d in enumerate(active) if pos % 2 == parity]
            out_idx = [d for pos, d in enumerate(active) if pos % 2 != parity]
            normalizing_order.append(
                AffineCoupling(params, f"c{k:02d}", pass_idx, out_idx,
                               hidden_width, rng, dtype, scale_cap))
            k += 1
        if level != len(counts) - 1:
            if len(active) < 4:
                raise ValueError(f"D={D} too small to factor at {levels} levels")
            active = active[1::2]  # even positions factored out
    layers = list(reversed(normalizing_order))  # generation order
    return FlowModel(layers, params, D, levels, hidden_width)
