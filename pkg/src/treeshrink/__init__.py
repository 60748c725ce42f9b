"""Multiscale tree-structured Bayesian shrinkage for compressible signals.

Hierarchical gamma-process priors over wavelet / block-DCT quadtrees,
with Gibbs-Metropolis sampling, moment-matching variational solvers, and
an EM point estimator.  Applications: compressive-sensing recovery and
denoising of signals hit by both spiky and Gaussian noise.
"""

__version__ = "0.1.0"

from .transform import (  # noqa: F401
    BANDS,
    TreeLayout,
    TreePyramid,
    bdct_forward,
    bdct_inverse,
    build_bdct_tree_layout,
    build_wavelet_tree_layout,
    default_levels,
    dwt2_forward,
    dwt2_inverse,
    flatten,
    unflatten,
)
from .randmath import (  # noqa: F401
    RngHandle,
    bessel_k,
    gig_mean,
    gig_mode,
    log_bessel_k,
    sample_dirichlet,
    sample_gamma,
    sample_gig,
    sample_inverse_gamma,
)
from .model import (  # noqa: F401
    Hyperparameters,
    ModelState,
    NoiseState,
    ShrinkageState,
    level_concentrations,
    load_state,
    log_joint,
    log_joint_terms,
    normalize_gamma,
    prior_draw_coefficients,
    prior_draw_tree,
    save_state,
)
from .measurement import (  # noqa: F401
    ExperimentSpec,
    SensingOperator,
    add_gaussian_noise,
    add_spiky_noise,
    make_gaussian_operator,
    make_identity_operator,
    make_row_mask_operator,
    measurement_count,
    psnr,
    read_image,
    synthetic_phantom,
    write_image,
)
from .sampler import (  # noqa: F401
    ChainConfig,
    PosteriorSummary,
    merge_summaries,
    run_chain,
)
from .variational import (  # noqa: F401
    SolverConfig,
    VariationalState,
    run_solver,
)
