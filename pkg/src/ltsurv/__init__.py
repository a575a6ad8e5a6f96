"""Two-sample survival testing with long-term survivors.

Mixture cure data generation, seven two-sample tests, Monte Carlo
rejection rates over follow-up, and the A(tau) power-shape predictor.
"""

__version__ = "0.1.0"

from .distributions import (Family, MixtureCureArm, ParametricDistribution, TwoArmDesign,  # noqa: E402
                            UncuredEffect, apply_effects)
from .datagen import FollowUpSpec, SurvivalSample, generate_trial  # noqa: E402
from .results import Method, TestResult  # noqa: E402

__all__ = [
    "Family", "FollowUpSpec", "Method", "MixtureCureArm", "ParametricDistribution", "SurvivalSample",
    "TestResult", "TwoArmDesign", "UncuredEffect", "apply_effects", "generate_trial", "__version__",
]
