"""Ensemble Kalman inversion for multiscale elliptic problems.

The package couples a P1 finite element solver and periodic cell-problem
homogenization with an iterative ensemble Kalman update, plus estimation
and correction of the surrogate modelling error.
"""

__version__ = "0.1.0"
