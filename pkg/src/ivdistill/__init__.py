"""Instrument validity testing with sample distillation.

Tests the identifying assumptions of heterogeneous treatment effect
models with conditioning covariates.  Covariates are partialed out of the
outcome through a partially linear model in the propensity score, and the
resulting partial residuals feed a joint bootstrap test of two implications
of instrument validity: nesting inequalities (distributional monotonicity
of the residual/treatment subdistributions) and index sufficiency (the
residual/treatment law depends on the instrument only through the
propensity score).  Distillation trims the sample so the conditional
propensity-score law given the instrument is stochastically monotone,
which makes the nesting inequalities testable instrument-value by
instrument-value.
"""

from .dataset import Dataset, SubsampleView, load_csv, make_dataset, split_by_instrument
from .propensity import PropensityDesign, PropensityFit, fit_probit, predict_scores
from .kernelreg import KernelFit, fit_lcr, fit_llr, predict
from .plm import PartialLinearFit, ResidualSet, fit_plm, residuals
from .distill import (
    DistilledSample,
    DistillationInfeasibleError,
    SortedPair,
    delta,
    distill_modified,
    distill_simple,
    make_sorted_pair,
    pretrim,
    reaction_d0,
    reaction_d1,
    verify_fosd,
)
from .ivtest import (
    EstimationOptions,
    S2Info,
    TestConfig,
    TestReport,
    bootstrap,
    build_s2,
    run_test_binary,
    run_test_multivalued,
    statistic,
)
from .baselines import BaselineReport, test_binarized_pscore, test_no_covariates
from .mcstudy import DgpSpec, RejectionTable, component_study, draw_sample, rejection_study
from .biasoracle import (
    BiasScalars,
    ExampleParams,
    ViolationPair,
    bias_scalars,
    pscore_laws,
    residual_subdensity,
    violation_map,
)

__version__ = "0.1.0"
