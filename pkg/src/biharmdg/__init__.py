"""Interior penalty DG for the clamped biharmonic problem with generalized-Hessian error estimation."""
__version__ = "0.1.0"
