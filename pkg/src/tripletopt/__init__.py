"""Niching CMA-ES + damped least squares campaign for triplet lens design."""

from .analysis import (
    CriticalPointReport,
    InfeasibilityStudyConfig,
    Verdict,
    classify_critical_point,
    distance_study,
    fd_gradient,
    fd_hessian,
    filter_duplicates,
    infeasibility_study,
)
from .campaign import (
    AnalysisSettings,
    CampaignConfig,
    analyze_campaign,
    load_campaign_config,
    run_campaign,
)
from .niching import (
    DynamicPeakSet,
    EvaluationRecord,
    NicheState,
    NichingConfig,
    run_niching,
    select_dynamic_peaks,
)
from .optics import (
    DOMAIN_HI,
    DOMAIN_LO,
    FailureKind,
    MeritEvaluator,
    MeritWeights,
    Prescription,
    Ray,
    TraceOutcome,
    intersect_sphere,
    load_prescription,
    merit,
    merit_batch,
    paraxial_trace,
    refract,
    solve_object_distance,
    trace_batch,
    trace_design,
)
from .refine import (
    RefineResult,
    RefineSettings,
    jacobian_fd,
    lm_refine,
    refine_archive,
)
from .swilk import shapiro_wilk

__version__ = "0.1.0"
