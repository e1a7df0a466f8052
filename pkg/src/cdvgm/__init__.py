"""Traffic forecasting on a dynamically generated virtual graph (CDVGM).

The package is self-contained: a small reverse-mode autodiff core drives
the graph/temporal operators, the forecasting model, and the trainer. The
sklearn-style entry point is :class:`cdvgm.estimator.CdvgmForecaster`; the
``cdvgm`` command line exposes train / eval / gradcheck / export-laplacian /
synth workflows.
"""

from .tensor import Tensor, no_grad, finite_diff_check

__all__ = ["Tensor", "no_grad", "finite_diff_check"]
__version__ = "0.1.0"
