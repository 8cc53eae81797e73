"""Shared test oracles, independent of the code paths they check."""

import numpy as np

from flowcritic import autodiff as ad
from flowcritic.autodiff import Tensor


def randomize_flow(model, seed, scale=0.5):
    """Give the (identity-initialized) scale/shift heads nontrivial weights."""
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.rsplit(".", 1)[-1] in ("Ws", "bs", "Wt", "bt"):
            t.data = (t.data + rng.normal(0.0, scale, t.data.shape)).astype(t.data.dtype)
    return model


def fd_logdet(model, z, eps=1e-6):
    """log|det J| of the forward map by central differences + dense determinant."""
    d = z.shape[0]
    jac = np.empty((d, d))
    with ad.no_grad():
        for j in range(d):
            hi, lo = z.copy(), z.copy()
            hi[j] += eps
            lo[j] -= eps
            f_hi = model.forward(Tensor(hi[None, :]))[0].data[0]
            f_lo = model.forward(Tensor(lo[None, :]))[0].data[0]
            jac[:, j] = (f_hi - f_lo) / (2 * eps)
    sign, logdet = np.linalg.slogdet(jac)
    assert sign != 0
    return logdet


def grid_quadrature(model, extent=6.0, cells=400):
    """Integral of exp(log_prob) over the square [-extent, extent]^2 by midpoint rule."""
    assert model.D == 2
    step = 2 * extent / cells
    centers = -extent + step * (np.arange(cells) + 0.5)
    xx, yy = np.meshgrid(centers, centers)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    total = 0.0
    with ad.no_grad():
        for chunk in np.array_split(pts, 16):
            total += np.exp(model.log_prob(Tensor(chunk)).data).sum()
    return total * step * step


def welch_t(a, b):
    """Welch's two-sample t statistic."""
    a, b = np.asarray(a), np.asarray(b)
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    return (a.mean() - b.mean()) / np.sqrt(va + vb)
