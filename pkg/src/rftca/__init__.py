"""Random-features transfer component analysis and its federated protocol.

Core layers:

* :mod:`rftca.kernels` -- Gaussian kernels, random Fourier features, centering
* :mod:`rftca.solvers` -- alignment solvers (kernel, regularized, random-features)
* :mod:`rftca.mmd` / :mod:`rftca.learners` -- alignment loss, gradients, learners
* :mod:`rftca.protocol` / :mod:`rftca.runner` -- federated client steps and rounds
* :mod:`rftca.netsim` -- unreliable-network model and communication accounting
* :mod:`rftca.data` -- synthetic domains, matrix and metrics persistence
* :mod:`rftca.service` / :mod:`rftca.cli` -- HTTP service and its thin client
"""

from .kernels import (
    FeatureMatrix,
    KernelConfig,
    RffProjection,
    center,
    gaussian_kernel,
    intrinsic_dim,
    make_projection,
    median_bandwidth,
    rff_map,
    spectral_error,
)
from .solvers import (
    LabelVector,
    TcaConfig,
    TcaSolution,
    default_gamma,
    eigen_gap,
    label_vector,
    lanczos_top_m,
    r_tca,
    regularization_bounds,
    rf_tca,
    sherman_morrison_inv_apply,
    vanilla_tca,
)
from .mmd import LossWeights, MmdBatch, mmd_grad_W, mmd_grad_features, mmd_loss, source_loss
from .runner import FedConfig, run_protocol, train_source_only

__version__ = "0.1.0"
