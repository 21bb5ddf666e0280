"""Robust streaming sketches: AMS/Cauchy primitives, a robust F2 estimator,
heavy hitters, a triangle-inequality framework, and adversarial game tooling."""

__version__ = "0.1.0"
