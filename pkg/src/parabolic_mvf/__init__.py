"""Mean value formulas and Harnack inequalities for divergence-form parabolic operators, checked numerically."""
from .operator_model import ParabolicOperator, make_operator, verify_hypotheses
from .fields import ExactGaussianField, LevelFunction
from .parametrix_series import SeriesField, gamma_series
from .level_set_geometry import ParabolicBall
from .mean_value import extended_mvf, surface_mvf, volume_mvf

__all__ = ["ParabolicOperator", "make_operator", "verify_hypotheses", "ExactGaussianField", "LevelFunction",
           "SeriesField", "gamma_series", "ParabolicBall", "surface_mvf", "volume_mvf", "extended_mvf"]
