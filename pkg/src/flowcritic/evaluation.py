"""Measurement battery: independent-critic distance estimates, NLL
histograms, latent statistics, Jacobian-rank inspection and the
density-ratio gap between an exact KL estimate and a discriminator's.

The independent critic never feeds gradients to any generator, and every
comparison uses the same architecture, clip box and update budget so its
distance estimates are comparable across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .critics import Critic, wgan_objective
from .optim import Adam, RMSProp, clip_to_box
from .training import TrainingDiverged, _critic_space

INDEP_HIDDEN = 64
INDEP_BUDGET = 2000
INDEP_CLIP = 0.01
BOOTSTRAP_RESAMPLES = 200

LOG_2PI = float(np.log(2.0 * np.pi))


def dataset_source(ds):
    """Batch source drawing dataset rows, mapped to critic space."""
    def source(rng, n):
        return _critic_space(ds.minibatch(rng, n), ds.origin)
    return source


def generator_source(model, origin="synth2d"):
    """Batch source drawing fresh generator samples, mapped to critic space."""
    def source(rng, n):
        z = rng.standard_normal((n, model.D)).astype(model.dtype, copy=False)
        with ad.no_grad():
            x = model.forward(Tensor(z))[0].data
        return _critic_space(x, origin)
    return source


def array_source(x):
    def source(rng, n):
        return x[rng.integers(0, x.shape[0], size=n)]
    return source


@dataclass
class IndependentCritic:
    critic: Critic
    budget: int


def train_independent_critic(source_real, source_gen, in_dim, budget=INDEP_BUDGET,
                             seed=0, batch_size=64, hidden=INDEP_HIDDEN,
                             clip_c=INDEP_CLIP, lr=5e-5, dtype="f64", image_hw=None):
    """Critic trained to separate the two sources, clipped after every update.

    With budget 0 the zero output head makes every score, hence the distance
    estimate, exactly zero.
    """
    critic = Critic(in_dim, hidden=hidden, clip_c=clip_c, seed=seed,
                    dtype=dtype, image_hw=image_hw)
    opt = RMSProp(critic.params, lr=lr)
    rng = np.random.default_rng([seed, 0xC0FFEE])
    for _ in range(budget):
        x_r = source_real(rng, batch_size).astype(critic.W1.dtype, copy=False)
        x_g = source_gen(rng, batch_size).astype(critic.W1.dtype, copy=False)
        obj = wgan_objective(critic, x_r, x_g)
        if not np.isfinite(obj.data):
            raise TrainingDiverged("independent critic loss went non-finite")
        ad.backward(-1.0 * obj)
        opt.step()
        critic.params.zero_grad()
        clip_to_box(critic.params, clip_c, critic.clip_set)
    return IndependentCritic(critic=critic, budget=budget)


@dataclass
class WEstimate:
    value: float
    std: float           # bootstrap std of the estimate
    n: int

    def pooled_std(self, other):
        return float(np.sqrt(self.std ** 2 + other.std ** 2))


def w_hat(ic: IndependentCritic, source_a, source_b, n_batches=32,
          batch_size=64, n_boot=BOOTSTRAP_RESAMPLES, seed=0):
    """Mean critic-score difference between two sources, with bootstrap noise scale.

    Applying a critic trained on (valid, generator) pairs to train or test
    batches is the intended "misuse" that exposes overfitting.
    """
    rng = np.random.default_rng([seed, 0xB007])
    dtype = ic.critic.W1.dtype

    def scores(source):
        vals = []
        for _ in range(n_batches):
            x = source(rng, batch_size).astype(dtype, copy=False)
            with ad.no_grad():
                vals.append(ic.critic.value(x).data)
        return np.concatenate(vals)

    fa, fb = scores(source_a), scores(source_b)
    value = float(fa.mean() - fb.mean())
    boot = np.empty(n_boot)
    for i in range(n_boot):
        ia = rng.integers(0, fa.size, size=fa.size)
        ib = rng.integers(0, fb.size, size=fb.size)
        boot[i] = fa[ia].mean() - fb[ib].mean()
    return WEstimate(value=value, std=float(boot.std()), n=fa.size)


def nll_histogram(model, data, n_bins):
    """Equal-width histogram of per-example negative log-densities."""
    if n_bins < 1:
        raise ValueError("need n_bins >= 1")
    data = np.asarray(data)
    if data.shape[0] == 0:
        raise ValueError("empty data")
    with ad.no_grad():
        nll = -model.log_prob(Tensor(data.astype(model.dtype, copy=False))).data
    counts, edges = np.histogram(nll, bins=n_bins)
    return counts, edges, nll


@dataclass
class LatentStats:
    mu: np.ndarray         # per-dim mean of inferred latents
    sigma: np.ndarray      # per-dim std
    hist2d: np.ndarray     # occupancy grid over the inspected pair
    xedges: np.ndarray
    yedges: np.ndarray


def latent_stats(model, data, dims=(0, 1), bins=50, extent=4.0):
    """Invert the data and summarize the latent distribution."""
    data = np.asarray(data)
    with ad.no_grad():
        z0 = model.inverse(Tensor(data.astype(model.dtype, copy=False)))[0].data
    hist, xe, ye = np.histogram2d(z0[:, dims[0]], z0[:, dims[1]], bins=bins,
                                  range=[[-extent, extent], [-extent, extent]])
    return LatentStats(mu=z0.mean(axis=0), sigma=z0.std(axis=0),
                       hist2d=hist, xedges=xe, yedges=ye)


def _jacobian_reverse(model, z):
    """Dense d(z1)/d(z0) at one point via one reverse sweep per output dim."""
    z_t = Tensor(z[None, :].astype(model.dtype, copy=False))
    z1, _ = model.forward(z_t)
    jac = np.empty((model.D, model.D))
    for i in range(model.D):
        out_i = ad.gather_cols(z1, np.array([i])).sum()
        ad.backward(out_i)
        jac[i] = z_t.grad[0]
    return jac


def _jacobian_fd(model, z, eps=1e-5):
    jac = np.empty((model.D, model.D))
    with ad.no_grad():
        for j in range(model.D):
            hi, lo = z.copy(), z.copy()
            hi[j] += eps
            lo[j] -= eps
            f_hi = model.forward(Tensor(hi[None, :]))[0].data[0]
            f_lo = model.forward(Tensor(lo[None, :]))[0].data[0]
            jac[:, j] = (f_hi - f_lo) / (2 * eps)
    return jac


@dataclass
class JacobianReport:
    singular_values: np.ndarray   # [n_probes, D], descending per probe
    ranks: np.ndarray             # numerical rank per probe
    tol_ratio: float


def jacobian_rank(model, probes, tol_ratio=1e-3, check_fd=False, fd_tol=1e-4):
    """Singular values and numerical ranks of the generator Jacobian at probes.

    rank = #{s_i > tol_ratio * s_max}.  With ``check_fd`` every Jacobian is
    validated against central differences before the SVD is trusted.
    """
    if not 0 < tol_ratio < 1:
        raise ValueError("tol_ratio must lie in (0, 1)")
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    svals = np.empty((probes.shape[0], model.D))
    ranks = np.empty(probes.shape[0], dtype=int)
    for k, z in enumerate(probes):
        jac = _jacobian_reverse(model, z)
        if check_fd:
            fd = _jacobian_fd(model, z)
            err = np.abs(jac - fd) / np.maximum(1.0, np.abs(jac))
            if err.max() > fd_tol:
                raise RuntimeError(f"jacobian/fd mismatch {err.max():.2e} at probe {k}")
        try:
            s = np.linalg.svd(jac, compute_uv=False)
        except np.linalg.LinAlgError as e:
            raise RuntimeError(f"SVD did not converge at probe {k}") from e
        svals[k] = s
        ranks[k] = int((s > tol_ratio * s[0]).sum())
    return JacobianReport(singular_values=svals, ranks=ranks, tol_ratio=tol_ratio)


class _Classifier:
    """Small tanh MLP with a zero output head; logit(D(x)) per row."""

    def __init__(self, in_dim, hidden, seed, dtype="f64"):
        rng = np.random.default_rng([seed, 0xD15C])
        p = Parameters()
        self.W1 = p.add("W1", rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)), dtype=dtype)
        self.b1 = p.add("b1", np.zeros(hidden), dtype=dtype)
        self.W2 = p.add("W2", rng.normal(0, 1 / np.sqrt(hidden), (hidden, hidden)), dtype=dtype)
        self.b2 = p.add("b2", np.zeros(hidden), dtype=dtype)
        self.w3 = p.add("w3", np.zeros((hidden, 1)), dtype=dtype)
        self.b3 = p.add("b3", np.zeros(1), dtype=dtype)
        self.params = p

    def logit(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = ad.tanh(ad.affine(x, self.W1, self.b1))
        h = ad.tanh(ad.affine(h, self.W2, self.b2))
        return ad.reshape(ad.affine(h, self.w3, self.b3), (x.shape[0],))


def _std_normal_logpdf(z):
    return -0.5 * (z * z).sum(axis=1) - 0.5 * z.shape[1] * LOG_2PI


def kl_gap(flow_q, n=100_000, disc_updates=5000, batch=64, hidden=64,
           lr=1e-3, seed=0):
    """Exact KL(q || standard normal) estimate next to a discriminator's.

    kl_unbiased averages log q(z) - log p(z) over q-samples using the flow's
    exact density.  The discriminator is trained with logistic loss to give
    prior samples label 1, so its optimal logit is log p(z) - log q(z) and
    kl_disc = mean over q-samples of -logit.
    """
    zq, logq = flow_q.sample(n, seed=[seed, 1])
    zq = np.asarray(zq, dtype=np.float64)
    kl_unbiased = float((logq - _std_normal_logpdf(zq)).mean())

    rng = np.random.default_rng([seed, 2])
    zp = rng.standard_normal((n, zq.shape[1]))
    disc = _Classifier(zq.shape[1], hidden, seed)
    opt = Adam(disc.params, lr=lr)
    for _ in range(disc_updates):
        bq = zq[rng.integers(0, n, size=batch)]
        bp = zp[rng.integers(0, n, size=batch)]
        lq = disc.logit(bq)
        lp = disc.logit(bp)
        loss = ad.softplus(lq).mean() + ad.softplus(-1.0 * lp).mean()
        if not np.isfinite(loss.data):
            raise TrainingDiverged("KL discriminator loss went non-finite")
        ad.backward(loss)
        opt.step()
        disc.params.zero_grad()

    with ad.no_grad():
        logits = np.concatenate([disc.logit(chunk).data
                                 for chunk in np.array_split(zq, max(1, n // 8192))])
    return kl_unbiased, float(-logits.mean())
