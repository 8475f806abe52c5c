"""Continuous-time recurrent cells with a conditional normalizing flow head for
probabilistic forecasting of irregular multivariate time series.

Everything runs on numpy float64 through a small reverse-mode autodiff tape.
"""
__version__ = "0.1.0"
