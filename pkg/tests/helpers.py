"""Small hand-built problems shared by the tests."""
import numpy as np

from exitbsde.geometry import Interval
from exitbsde.problems import ProblemSpec


def line_problem(mu=0.0, sigma=1.0, driver=None, boundary=None, dom=None):
    """d=1 problem with constant coefficients on ``(-1, 1)``."""
    return ProblemSpec(
        "line", dom or Interval(-1.0, 1.0),
        lambda x: np.full_like(x, mu),
        lambda x: np.full((len(x), 1, 1), sigma),
        driver or (lambda x, y, z: np.zeros(len(x))),
        boundary or (lambda x: np.zeros(len(x))),
        constant_coefficients=True)
