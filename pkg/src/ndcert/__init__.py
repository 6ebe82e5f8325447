"""Noised diffusion classifiers with certified robustness, verified on an
analytic Gaussian-mixture testbed."""

from .acceleration import (
    ClassifierTermEvaluator,
    CountingEvaluator,
    ProgressiveTrajectory,
    SiftConfig,
    progressive_select,
    sift_and_refine,
)
from .certification import (
    ABSTAIN,
    CertificationRecord,
    LipschitzCertificate,
    SmoothingConfig,
    certify_lipschitz,
    clopper_pearson_lower,
    dc_radius,
    empirical_bernstein_lower,
    lipschitz_bound_dc,
    phi_inverse,
    smoothed_certify,
    smoothed_predict,
    unit_box_map,
)
from .classifiers import (
    ClassifierConfig,
    DiffusionClassifier,
    ElboBreakdown,
    LogitVector,
    apndc_logits,
    dc_logits,
    default_subset,
    epndc_logits,
    epndc_weight,
    full_elbo,
    posterior_mean_q,
    prior_kl_term,
    reverse_mean_p,
    softmax,
)
from .denoiser import (
    AnalyticDenoiser,
    ClipBox,
    GaussianMixtureSpec,
    WeightScheme,
    analytic_denoise,
    clip_output,
    sample_forward,
    weight_at,
)
from .harness import (
    ConfigError,
    Dataset,
    ExperimentConfig,
    ResultTable,
    gen_dataset,
    load_config,
    run_certification,
)
from .mlp import MlpDenoiser, TrainingLog, load_checkpoint, save_checkpoint, train_denoiser
from .schedule import (
    NoiseSchedule,
    TimestepSubset,
    build_geometric_schedule,
    build_linear_schedule,
    linear_to_ve,
    uniform_subset,
    ve_to_linear,
)

__version__ = "0.1.0"
