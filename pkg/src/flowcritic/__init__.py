"""flowcritic: one invertible generator, two training objectives, one lab.

Trains a real-NVP-style generator by exact maximum likelihood and by a
Wasserstein critic, then compares the two with exact log-densities,
independent-critic distance estimates, latent statistics and Jacobian-rank
diagnostics.
"""

import os as _os

if "FLOWCRITIC_THREADS" in _os.environ:
    # must land before numpy initialises its BLAS thread pools
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["FLOWCRITIC_THREADS"])

from . import autodiff, checkpoint, critics, datapipe, evaluation, flows, optim, training  # noqa: E402,F401
from .autodiff import Tensor, backward, grad_check, no_grad  # noqa: E402,F401
from .flows import FlowModel, build_nvp  # noqa: E402,F401
