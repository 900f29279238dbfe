"""Self-tuning step-size and momentum schedule.

The step size is kappa_bar / (w_t + S_t)^(1/3) where S_t accumulates squared
gradient-norm feedback and w_t is a three-way floor

    w_t = max(2 * noise_scale^2, kappa_bar^3 L^3 - S_t, kappa_bar^3 c^3 / L^3)

chosen so that eta_t <= 1/L and eta_t <= L/c hold unconditionally (the
second and third branches force the denominator high enough) while still
letting eta shrink at the t^(-1/3) rate once feedback accumulates. The
momentum weight a = c * eta^2 then always lands in (0, 1].

The adaptive variant feeds measured mean-square gradient norms; the
non-adaptive variant feeds the constant noise_scale^2 every round. Both run
through the same transition so that a constant feedback sequence makes them
coincide bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ValidationFailure

# smallest admissible b^3; below this the momentum constant c would exceed
# its 56 L^2 / K budget at alpha = 2/3
B_CUBED_MIN = 2.0 ** (2.0 / 3.0) / 84.0

_CBRT2_SQ = 2.0 ** (2.0 / 3.0)


@dataclass(frozen=True)
class ScheduleParams:
    """Resolved schedule constants; build through derive_params."""

    kappa_bar: float
    c: float
    b: float
    alpha: float
    L: float
    noise_scale: float
    num_workers: int
    w0: float


@dataclass(frozen=True)
class ScheduleState:
    """Schedule position after t feedback updates.

    ``a_next`` is the momentum weight the upcoming direction update should
    use; ``clamped`` records whether c * eta^2 exceeded 1 and was cut back.
    """

    t: int
    w: float
    feedback_sum: float
    eta: float
    a_next: float
    clamped: bool


def _cbrt(x: float) -> float:
    return float(np.cbrt(x))


def _default_w0(kappa_bar: float, c: float, L: float, noise_scale: float) -> float:
    return max(2.0 * noise_scale**2, kappa_bar**3 * L**3, kappa_bar**3 * c**3 / L**3)


def derive_params(
    num_workers: int,
    L: float,
    noise_scale: float,
    *,
    b: float = 1.0,
    alpha: float = 2.0 / 3.0,
    kappa_bar: float | None = None,
    c: float | None = None,
    w0: float | None = None,
) -> ScheduleParams:
    """Resolve schedule constants from the problem scale.

    Defaults follow the admissible-parameter recipe:

        kappa_bar = b * K^alpha * noise_scale^(2/3) / L
        c         = 28 L^2 / K + 2^(2/3) * noise_scale^2 / (3 L kappa_bar^3)

    Explicit kappa_bar / c / w0 values override the formulas but are held to
    the same inequalities. Failures cite the violated inequality and map to
    CLI exit code 3.
    """
    if num_workers < 1:
        raise ValidationFailure("num_workers >= 1 required")
    if L <= 0:
        raise ValidationFailure("L > 0 required")
    if noise_scale <= 0:
        raise ValidationFailure(
            "noise_scale > 0 required (a zero-noise run needs an explicit positive override)"
        )
    if not 0.0 < alpha <= 1.0:
        raise ValidationFailure("0 < alpha <= 1 required")
    if b**3 < B_CUBED_MIN:
        raise ValidationFailure(
            f"b^3 >= 2^(2/3)/84 required: b={b} gives b^3={b**3:.6g} < {B_CUBED_MIN:.6g}"
        )

    if kappa_bar is None:
        kappa_bar = b * num_workers**alpha * noise_scale ** (2.0 / 3.0) / L
    if kappa_bar <= 0:
        raise ValidationFailure("kappa_bar > 0 required")
    if c is None:
        c = 28.0 * L * L / num_workers + _CBRT2_SQ * noise_scale**2 / (3.0 * L * kappa_bar**3)
    if c <= 0:
        raise ValidationFailure("c > 0 required")
    c_budget = 56.0 * L * L / num_workers
    if c > c_budget:
        raise ValidationFailure(
            f"c <= 56 L^2 / K required: c={c:.6g} > {c_budget:.6g} "
            "(raise b or alpha, or lower noise_scale)"
        )

    w0_floor = _default_w0(kappa_bar, c, L, noise_scale)
    if w0 is None:
        w0 = w0_floor
    elif w0 < w0_floor:
        # smaller w0 would break eta <= 1/L at t = 0 and w-monotonicity
        raise ValidationFailure(
            f"w0 >= max(2*noise_scale^2, kappa_bar^3 L^3, kappa_bar^3 c^3 / L^3) required: "
            f"w0={w0:.6g} < {w0_floor:.6g}"
        )

    return ScheduleParams(
        kappa_bar=float(kappa_bar),
        c=float(c),
        b=float(b),
        alpha=float(alpha),
        L=float(L),
        noise_scale=float(noise_scale),
        num_workers=int(num_workers),
        w0=float(w0),
    )


def momentum(params: ScheduleParams, eta: float) -> tuple[float, bool]:
    """Momentum weight c * eta^2, clamped to 1; the flag records clamping.

    Schedule-produced eta never needs the clamp: the eta <= 1/L and
    eta <= L/c caps give a <= min(c/L^2, L^2/c) <= 1. Arbitrary eta values
    passed in directly may need it.
    """
    a = params.c * eta * eta
    if a <= 0.0:
        raise ContractViolation(f"momentum weight must be positive, got {a}")
    if a > 1.0:
        return 1.0, True
    return a, False


def init_state(params: ScheduleParams) -> ScheduleState:
    """Schedule position before any feedback (t = 0)."""
    eta0 = params.kappa_bar / _cbrt(params.w0)
    a, clamped = momentum(params, eta0)
    return ScheduleState(t=0, w=params.w0, feedback_sum=0.0, eta=eta0, a_next=a, clamped=clamped)


def adaptive_step(state: ScheduleState, params: ScheduleParams, feedback_sq: float) -> ScheduleState:
    """Advance one round on measured squared-gradient feedback."""
    if not np.isfinite(feedback_sq) or feedback_sq < 0.0:
        raise ContractViolation(f"feedback must be finite and >= 0, got {feedback_sq}")
    s = state.feedback_sum + feedback_sq
    # the w0 - s branch only matters for w0 overrides above the default
    # floor, where it keeps eta non-increasing through the first rounds; at
    # the default w0 it is dominated by the other three branches
    w = max(
        2.0 * params.noise_scale**2,
        params.kappa_bar**3 * params.L**3 - s,
        params.kappa_bar**3 * params.c**3 / params.L**3,
        params.w0 - s,
    )
    eta = params.kappa_bar / _cbrt(w + s)
    a, clamped = momentum(params, eta)
    return ScheduleState(t=state.t + 1, w=w, feedback_sum=s, eta=eta, a_next=a, clamped=clamped)


def nonadaptive_step(state: ScheduleState, params: ScheduleParams) -> ScheduleState:
    """Advance one round on the constant noise_scale^2 feedback.

    Runs through adaptive_step with the constant plugged in, so an adaptive
    run whose measured feedback happens to equal noise_scale^2 every round
    produces bit-identical states. The t-th state's feedback_sum is the
    running sum of noise_scale^2, not a product, for the same reason.
    """
    return adaptive_step(state, params, params.noise_scale**2)


def aggregate_gradnorm(norms) -> float:
    """Mean of squared norms, accumulated in ascending worker order."""
    if len(norms) == 0:
        raise ContractViolation("cannot aggregate an empty norm list")
    acc = 0.0
    for g in norms:
        g = float(g)
        if not np.isfinite(g) or g < 0.0:
            raise ContractViolation(f"gradient norms must be finite and >= 0, got {g}")
        acc += g * g
    return acc / len(norms)
