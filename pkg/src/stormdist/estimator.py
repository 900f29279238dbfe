"""Momentum-corrected direction tracking.

The recursion blends a fresh stochastic gradient with a drift-corrected copy
of the previous direction:

    d_new = g_new + (1 - a) * (d_old - g_old)

where ``g_new`` and ``g_old`` are gradients at the new and old iterates
evaluated on the *same* fresh sample. At a = 1 the correction vanishes and
the direction collapses to plain SGD; at a = 0 it is the pure recursive
difference estimator. Intermediate a trades bias decay against noise
accumulation, which is what lets a schedule drive the variance down without
ever evaluating a full batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass
class DirectionState:
    """One worker's direction, the sample-gradient cache, and the round count.

    ``d`` is overwritten with the aggregated direction after each exchange;
    ``cached_grad_new`` stays local (the gradient this worker computed at the
    current iterate with its latest sample) so norm feedback can reuse it
    without a second oracle call.
    """

    d: np.ndarray
    cached_grad_new: np.ndarray
    t: int


def init_direction(grad: np.ndarray) -> DirectionState:
    """Start tracking from a plain stochastic gradient at the first iterate."""
    if not np.isfinite(grad).all():
        raise ContractViolation("initial gradient contains non-finite entries")
    g = np.array(grad, dtype=np.float64)  # callers may reuse their buffer
    return DirectionState(d=g, cached_grad_new=g, t=1)


def update_direction(
    state: DirectionState, grad_new: np.ndarray, grad_old: np.ndarray, a: float
) -> DirectionState:
    """Advance the recursion one round.

    ``grad_new`` and ``grad_old`` must be evaluated on the same sample at the
    new and previous iterate respectively; that pairing is what makes the
    correction term zero-mean, and it cannot be checked here.
    """
    if not 0.0 < a <= 1.0:
        raise ContractViolation(f"momentum weight a must lie in (0, 1], got {a}")
    d_new = state.d - grad_old
    d_new *= 1.0 - a
    d_new += grad_new
    return DirectionState(d=d_new, cached_grad_new=grad_new, t=state.t + 1)


def error_vector(direction: np.ndarray, full_grad: np.ndarray) -> np.ndarray:
    """Tracking error of an (aggregated) direction against the exact gradient."""
    return direction - full_grad
