"""Adversarially robust traffic forecasting: PGD poisoning, defended models M1-M4,
and the evaluation grid, on a small numpy autodiff engine."""

__version__ = "0.1.0"
