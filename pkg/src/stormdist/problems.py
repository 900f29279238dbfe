"""Synthetic distributed objectives with closed-form gradients and replayable noise.

Every problem is a mean of per-worker objectives f(x) = (1/K) sum_k f_k(x).
Parameter vectors are 1-D float64 arrays. Stochastic gradients follow the
additive-noise model: a draw perturbs the exact local gradient by a Gaussian
vector scaled so that E||noise||^2 equals the declared sigma^2, which makes
unbiasedness and the variance bound hold by construction and keeps every
derived constant (L, G) checkable in closed form.

Two families are provided:

* ``het_quadratic``: f_k(x) = 0.5 * ||x - mu_k||^2 with per-worker centers,
  so worker gradients disagree everywhere except at the mean center.
* ``sigmoid_quadratic``: the quadratic plus lam * sum_i x_i^2 / (1 + x_i^2),
  a bounded ridge that bends the landscape (non-convex once lam > 2) while
  keeping the smoothness constant at 1 + 2*lam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

from .errors import ContractViolation, UnknownConfigKey, ValidationFailure

FAMILIES = ("het_quadratic", "sigmoid_quadratic")

# sup_u |d/du (u^2/(1+u^2))| = 3*sqrt(3)/8, attained at u = 1/sqrt(3)
_MAX_RIDGE_SLOPE = 3.0 * math.sqrt(3.0) / 8.0

_MASK64 = (1 << 64) - 1


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit key (splitmix64 finalizer per word)."""
    acc = 0
    for v in values:
        x = (int(v) ^ (acc * 0x9E3779B97F4A7C15 + 0xD1B54A32D192ED03)) & _MASK64
        x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = x ^ (x >> 31)
    return acc


def as_param_vector(values, dim: int | None = None) -> np.ndarray:
    """Coerce to a finite 1-D float64 array, the package-wide vector type."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ContractViolation(f"parameter vector must be 1-D, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ContractViolation(f"parameter vector has length {x.shape[0]}, expected {dim}")
    if not np.isfinite(x).all():
        raise ContractViolation("parameter vector contains non-finite entries")
    return x


@dataclass(frozen=True)
class Sample:
    """One stochastic draw for one worker, addressable by (worker_id, draw_index)."""

    worker_id: int
    draw_index: int
    noise: np.ndarray


class SampleStream:
    """Random-access Gaussian noise stream for a single worker.

    Draw ``i`` always equals the output of
    ``Philox(key=mix64(master_seed, worker_id) | mix64(worker_id, master_seed) << 64,
    counter=i * 2**64)`` so any draw can be reproduced in isolation: replays,
    out-of-order access, and thread-parallel workers all see identical bits.
    The 2**64 counter stride leaves far more headroom per draw than one
    ``standard_normal(dim)`` can consume, so draws never overlap.
    """

    def __init__(self, master_seed: int, worker_id: int, dim: int, noise_std: float):
        self.worker_id = int(worker_id)
        self.dim = int(dim)
        self.noise_std = float(noise_std)
        # E||noise||^2 = sigma^2 exactly: per-coordinate std is sigma/sqrt(d)
        self._coord_std = self.noise_std / math.sqrt(self.dim)
        key = mix64(master_seed, worker_id) | (mix64(worker_id, master_seed) << 64)
        self._bits = Philox(key=key)
        self._state = self._bits.state
        self._gen = Generator(self._bits)

    def draw(self, index: int) -> Sample:
        if index < 0:
            raise ContractViolation("draw index must be non-negative")
        if self.noise_std == 0.0:
            return Sample(self.worker_id, index, np.zeros(self.dim))
        # resetting counter+buffer on the cached state is bitwise-equal to
        # constructing Philox(key, counter=index << 64) and ~10x cheaper
        st = self._state
        st["state"]["counter"][:] = 0
        st["state"]["counter"][1] = index
        st["buffer_pos"] = 4
        st["uinteger"] = 0
        st["has_uint32"] = 0
        self._bits.state = st
        noise = self._gen.standard_normal(self.dim)
        noise *= self._coord_std
        return Sample(self.worker_id, index, noise)


@dataclass(frozen=True)
class ProblemSpec:
    """A fully-resolved problem instance plus its declared constants.

    ``L``, ``sigma_sq`` and ``G`` are the values schedules are derived from;
    ``G`` is a deterministic bound on local gradient norms over the ball of
    radius ``region_radius`` plus a 3-sigma noise allowance. ``x_star`` and
    ``f_star`` are populated only when the minimizer is known exactly.
    """

    family: str
    dim: int
    num_workers: int
    centers: np.ndarray
    noise_std: float
    lam: float
    region_radius: float
    L: float
    sigma_sq: float
    G: float
    x_star: np.ndarray | None
    f_star: float | None
    seed: int | None = None
    homogeneous: bool = False


def _ridge_value(x: np.ndarray) -> float:
    u = x * x
    return float(np.sum(u / (1.0 + u)))


def _ridge_gradient(x: np.ndarray) -> np.ndarray:
    u = 1.0 + x * x
    return 2.0 * x / (u * u)


def local_value(spec: ProblemSpec, worker_id: int, x: np.ndarray) -> float:
    diff = x - spec.centers[worker_id]
    val = 0.5 * float(diff @ diff)
    if spec.family == "sigmoid_quadratic":
        val += spec.lam * _ridge_value(x)
    return val


def local_gradient(spec: ProblemSpec, worker_id: int, x: np.ndarray) -> np.ndarray:
    grad = x - spec.centers[worker_id]
    if spec.family == "sigmoid_quadratic":
        grad += spec.lam * _ridge_gradient(x)
    return grad


def stoch_gradient(spec: ProblemSpec, x: np.ndarray, sample: Sample) -> np.ndarray:
    """Unbiased local gradient: exact gradient plus the draw's additive noise."""
    grad = local_gradient(spec, sample.worker_id, x)
    grad += sample.noise
    return grad


def full_gradient(spec: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Gradient of the worker-mean objective.

    Per-worker gradients are formed in one broadcast subtraction (bitwise
    equal to computing each alone) and then accumulated in ascending id
    order, matching the runtime's reduction exactly, so noise-free runs keep
    estimator error at bitwise zero rather than summation-reordering level.
    """
    per_worker = x[None, :] - spec.centers
    if spec.family == "sigmoid_quadratic":
        per_worker += spec.lam * _ridge_gradient(x)
    acc = per_worker[0].copy()
    for k in range(1, spec.num_workers):
        acc += per_worker[k]
    acc /= spec.num_workers
    return acc


def full_value(spec: ProblemSpec, x: np.ndarray) -> float:
    diffs = x[None, :] - spec.centers
    acc = float(np.einsum("kd,kd->", diffs, diffs)) * 0.5 / spec.num_workers
    if spec.family == "sigmoid_quadratic":
        acc += spec.lam * _ridge_value(x)
    return acc


def _declared_constants(family, centers, noise_std, lam, region_radius):
    max_center = float(np.max(np.linalg.norm(centers, axis=1)))
    dim = centers.shape[1]
    if family == "het_quadratic":
        L = 1.0
        det_bound = region_radius + max_center
    else:
        L = 1.0 + 2.0 * lam
        det_bound = region_radius + max_center + lam * _MAX_RIDGE_SLOPE * math.sqrt(dim)
    G = det_bound + 3.0 * noise_std
    return L, noise_std**2, G


def _exact_minimum(family, centers, lam):
    if family == "het_quadratic":
        x_star = np.mean(centers, axis=0)
        return x_star
    # the ridge gradient 2*lam*x/(1+x^2)^2 never cancels x itself, so the
    # origin is the unique stationary point when every center is zero
    if not centers.any():
        return np.zeros(centers.shape[1])
    return None


def make_problem(
    family: str,
    dim: int,
    num_workers: int,
    *,
    centers=None,
    noise_std: float = 1.0,
    lam: float = 1.0,
    region_radius: float | None = None,
    seed: int | None = None,
    homogeneous: bool = False,
) -> ProblemSpec:
    """Build a problem instance, drawing centers from ``seed`` when not given.

    Seeded centers are standard normal per coordinate and depend only on
    (seed, num_workers, dim), so a K-sweep regenerates each cell's problem
    without storing arrays. ``homogeneous=True`` gives every worker the same
    drawn center (zero heterogeneity while keeping comparable scale).
    """
    if family not in FAMILIES:
        raise ValidationFailure(f"family must be one of {FAMILIES}, got {family!r}")
    if dim < 1 or num_workers < 1:
        raise ValidationFailure("dim >= 1 and num_workers >= 1 required")
    if noise_std < 0:
        raise ValidationFailure("noise_std >= 0 required")
    if lam < 0:
        raise ValidationFailure("lam >= 0 required")
    if family == "het_quadratic":
        lam = 0.0

    if centers is None:
        rng = Generator(Philox(key=mix64(0 if seed is None else seed, num_workers, dim)))
        if homogeneous:
            centers = np.tile(rng.standard_normal((1, dim)), (num_workers, 1))
        else:
            centers = rng.standard_normal((num_workers, dim))
    else:
        centers = np.asarray(centers, dtype=np.float64)
        if centers.shape != (num_workers, dim):
            raise ValidationFailure(
                f"centers shape {centers.shape} != (num_workers, dim) = {(num_workers, dim)}"
            )
        if not np.isfinite(centers).all():
            raise ValidationFailure("centers contain non-finite entries")

    if region_radius is None:
        region_radius = 10.0 * float(np.max(np.linalg.norm(centers, axis=1))) + 10.0
    if region_radius <= 0:
        raise ValidationFailure("region_radius > 0 required")

    L, sigma_sq, G = _declared_constants(family, centers, noise_std, lam, region_radius)
    x_star = _exact_minimum(family, centers, lam)
    f_star = None
    if x_star is not None:
        acc = sum(0.5 * float((x_star - c) @ (x_star - c)) for c in centers) / num_workers
        f_star = acc + (lam * _ridge_value(x_star) if family == "sigmoid_quadratic" else 0.0)
    return ProblemSpec(
        family=family,
        dim=dim,
        num_workers=num_workers,
        centers=centers,
        noise_std=float(noise_std),
        lam=float(lam),
        region_radius=float(region_radius),
        L=L,
        sigma_sq=sigma_sq,
        G=G,
        x_star=x_star,
        f_star=f_star,
        seed=seed,
        homogeneous=homogeneous,
    )


_PROBLEM_KEYS = {"family", "d", "k", "centers", "sigma", "lambda", "region_radius", "seed", "homogeneous"}


def problem_from_json(obj: dict) -> ProblemSpec:
    """Strictly parse the documented problem schema.

    Keys: family, d, k, sigma required; centers or seed (not both) pick the
    centers; lambda only applies to sigmoid_quadratic; homogeneous only with
    seeded centers. Unknown keys raise UnknownConfigKey.
    """
    if not isinstance(obj, dict):
        raise UnknownConfigKey(str(type(obj).__name__), where="problem")
    for key in obj:
        if key not in _PROBLEM_KEYS:
            raise UnknownConfigKey(key, where="problem")
    for key in ("family", "d", "k", "sigma"):
        if key not in obj:
            raise UnknownConfigKey(key, where="problem (missing required key)")
    if "centers" in obj and "seed" in obj:
        raise ValidationFailure("problem keys 'centers' and 'seed' are mutually exclusive")
    if "centers" in obj and obj.get("homogeneous"):
        raise ValidationFailure("'homogeneous' only applies to seeded centers")
    family = obj["family"]
    if family == "het_quadratic" and "lambda" in obj:
        raise ValidationFailure("'lambda' only applies to sigmoid_quadratic")
    return make_problem(
        family,
        int(obj["d"]),
        int(obj["k"]),
        centers=obj.get("centers"),
        noise_std=float(obj["sigma"]),
        lam=float(obj.get("lambda", 1.0)),
        region_radius=obj.get("region_radius"),
        seed=int(obj.get("seed", 0)),
        homogeneous=bool(obj.get("homogeneous", False)),
    )


def problem_to_json(spec: ProblemSpec) -> dict:
    """Inverse of problem_from_json; centers are written explicitly for exact round-trips."""
    out = {
        "family": spec.family,
        "d": spec.dim,
        "k": spec.num_workers,
        "centers": [[float(v) for v in row] for row in spec.centers],
        "sigma": spec.noise_std,
        "region_radius": spec.region_radius,
    }
    if spec.family == "sigmoid_quadratic":
        out["lambda"] = spec.lam
    return out


def sample_region_point(spec: ProblemSpec, rng: Generator) -> np.ndarray:
    """Uniform draw from the ball of radius region_radius."""
    g = rng.standard_normal(spec.dim)
    g /= np.linalg.norm(g)
    r = spec.region_radius * rng.random() ** (1.0 / spec.dim)
    return r * g


def fd_check(spec: ProblemSpec, x: np.ndarray, *, worker_id: int | None = None) -> float:
    """Max relative error between closed-form and central-difference gradients.

    Per-coordinate relative error uses denominator max(1, |g_i|). Steps scale
    with |x_i| to keep truncation and cancellation balanced.
    """
    x = as_param_vector(x, spec.dim)
    if worker_id is None:
        def value(p):
            return full_value(spec, p)
        grad = full_gradient(spec, x)
    else:
        def value(p):
            return local_value(spec, worker_id, p)
        grad = local_gradient(spec, worker_id, x)
    worst = 0.0
    for i in range(spec.dim):
        h = 1e-6 * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (value(xp) - value(xm)) / (2.0 * h)
        err = abs(fd - grad[i]) / max(1.0, abs(grad[i]))
        worst = max(worst, float(err))
    return worst


def estimate_constants(spec: ProblemSpec, master_seed: int, num_samples: int) -> dict:
    """Monte-Carlo sanity estimates of sigma^2, G and L next to declared values.

    Noise variance is measured through the same SampleStream machinery that
    runs use, so this doubles as an end-to-end check of the noise scaling.
    """
    if num_samples < 2:
        raise ContractViolation("num_samples >= 2 required")
    rng = Generator(Philox(key=mix64(master_seed, 0xE57)))
    streams = [SampleStream(master_seed, k, spec.dim, spec.noise_std) for k in range(spec.num_workers)]
    sq_sum = 0.0
    g_max = 0.0
    l_max = 0.0
    for i in range(num_samples):
        k = i % spec.num_workers
        x = sample_region_point(spec, rng)
        g_det = local_gradient(spec, k, x)
        g_sto = g_det + streams[k].draw(i).noise
        sq_sum += float(np.sum((g_sto - g_det) ** 2))
        g_max = max(g_max, float(np.linalg.norm(g_sto)))
        y = x + 1e-3 * rng.standard_normal(spec.dim)
        gap = np.linalg.norm(local_gradient(spec, k, y) - g_det) / np.linalg.norm(y - x)
        l_max = max(l_max, float(gap))
    return {
        "sigma_sq_declared": spec.sigma_sq,
        "sigma_sq_estimate": sq_sum / num_samples,
        "G_declared": spec.G,
        "G_estimate": g_max,
        "L_declared": spec.L,
        "L_estimate": l_max,
        "num_samples": num_samples,
    }
