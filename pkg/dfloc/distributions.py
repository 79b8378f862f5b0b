#!/usr/bin/env python3
"""
Distributions - Gaussian distance head, von Mises-Fisher direction head, orientation loss

Scalar functions work on plain floats/2-vectors and come with closed-form
gradients; the *_tensor variants build the same expressions on an autodiff
tape for batched training.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegeneratePredictionError, DomainError

logger = logging.getLogger(__name__)

EPS_DIR = 1e-6          # below this distance the target direction is undefined
EPS_NORM = 1e-12        # minimum orientation prediction norm
EPS_MU_THETA = 1e-8     # floor of the direction-head norm
ACOS_MARGIN = 1e-7
UNIT_TOL = 1e-6
LOG_VAR_CLAMP = 10.0
BESSEL_SERIES_LIMIT = 15.0


@dataclass(frozen=True)
class DisplacementDistribution:
    """Gaussian over distance and vMF over direction of one predicted displacement."""

    mu_r: float
    sigma2_r: float
    mu_theta: Tuple[float, float]
    kappa: float

    def __post_init__(self):
        if not self.mu_r >= 0.0:
            raise ContractError(f"mu_r must be >= 0, got {self.mu_r}")
        if not self.sigma2_r > 0.0:
            raise ContractError(f"sigma2_r must be > 0, got {self.sigma2_r}")
        if abs(math.hypot(*self.mu_theta) - 1.0) > 1e-9:
            raise ContractError(f"mu_theta must be unit norm, got {self.mu_theta}")
        if not self.kappa >= 0.0:
            raise ContractError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class DisplacementTarget:
    """Polar ground-truth displacement; theta_gt is meaningless when masked."""

    r_gt: float
    theta_gt: Tuple[float, float]
    masked: bool = False


@dataclass(frozen=True)
class OrientationTarget:
    g_gamma: Tuple[float, float]

    def __post_init__(self):
        _require_unit(self.g_gamma, 'g_gamma', 1e-9)

    @classmethod
    def from_degrees(cls, gamma_deg: float) -> 'OrientationTarget':
        gamma = math.radians(gamma_deg)
        return cls((math.cos(gamma), math.sin(gamma)))


def _require_unit(v: Sequence[float], name: str, tol: float = UNIT_TOL):
    norm = math.hypot(float(v[0]), float(v[1]))
    if abs(norm - 1.0) > tol:
        raise ContractError(f"{name} must be a unit vector (norm {norm:.9f})")


# ---------------------------------------------------------------------------
# Bessel I0 and the vMF density on the circle
# ---------------------------------------------------------------------------

def _i0_series(kappa: float) -> float:
    half_sq = 0.25 * kappa * kappa
    term = 1.0
    total = 1.0
    k = 0
    while True:
        k += 1
        term *= half_sq / (k * k)
        total += term
        if term < 1e-17 * total:
            return total


def _i0_asymptotic_log(kappa: float) -> float:
    # log I0 for large kappa: e^k / sqrt(2 pi k) * sum_j ((2j-1)!!)^2 / (j! (8k)^j)
    term = 1.0
    total = 1.0
    j = 0
    while True:
        j += 1
        nxt = term * (2 * j - 1) ** 2 / (j * 8.0 * kappa)
        if nxt >= term or nxt < 1e-17 * total:
            break
        term = nxt
        total += term
    return kappa - 0.5 * math.log(2.0 * math.pi * kappa) + math.log(total)


def log_bessel_i0(kappa: float) -> float:
    """log I0(kappa), safe for large kappa."""
    if kappa < 0.0:
        raise DomainError(f"I0 argument must be >= 0, got {kappa}")
    if kappa < BESSEL_SERIES_LIMIT:
        return math.log(_i0_series(kappa))
    return _i0_asymptotic_log(kappa)


def bessel_i0(kappa: float) -> float:
    """
    Modified Bessel function of the first kind, order 0.

    Power series below 15, asymptotic expansion above.
    """
    if kappa < 0.0:
        raise DomainError(f"I0 argument must be >= 0, got {kappa}")
    if kappa < BESSEL_SERIES_LIMIT:
        return _i0_series(kappa)
    return math.exp(_i0_asymptotic_log(kappa))


def log_vmf_density(u: Sequence[float], mu_theta: Sequence[float], kappa: float) -> float:
    if kappa < 0.0:
        raise DomainError(f"kappa must be >= 0, got {kappa}")
    _require_unit(u, 'u')
    _require_unit(mu_theta, 'mu_theta')
    dot = float(u[0]) * float(mu_theta[0]) + float(u[1]) * float(mu_theta[1])
    return kappa * dot - math.log(2.0 * math.pi) - log_bessel_i0(kappa)


def vmf_density(u: Sequence[float], mu_theta: Sequence[float], kappa: float) -> float:
    """C2(kappa) * exp(kappa * mu_theta . u) with C2 = 1 / (2 pi I0(kappa))."""
    return math.exp(log_vmf_density(u, mu_theta, kappa))


# ---------------------------------------------------------------------------
# Scalar losses
# ---------------------------------------------------------------------------

def gaussian_nll(r_gt: float, mu_r: float, sigma2_r: float) -> float:
    """Distance NLL without the 0.5*log(2 pi) constant."""
    if not sigma2_r > 0.0:
        raise DomainError(f"variance must be > 0, got {sigma2_r}")
    return 0.5 * ((r_gt - mu_r) ** 2 / sigma2_r + math.log(sigma2_r))


def full_gaussian_nll(r_gt: float, mu_r: float, sigma2_r: float) -> float:
    """Complete Gaussian NLL; only used when reporting densities."""
    return gaussian_nll(r_gt, mu_r, sigma2_r) + 0.5 * math.log(2.0 * math.pi)


def gaussian_nll_grad(r_gt: float, mu_r: float, sigma2_r: float) -> Dict[str, float]:
    if not sigma2_r > 0.0:
        raise DomainError(f"variance must be > 0, got {sigma2_r}")
    err = r_gt - mu_r
    return {
        'r_gt': err / sigma2_r,
        'mu_r': -err / sigma2_r,
        'sigma2_r': 0.5 * (1.0 / sigma2_r - err * err / (sigma2_r * sigma2_r)),
    }


def _clamped_dot(a: Sequence[float], b: Sequence[float]) -> Tuple[float, bool]:
    dot = float(a[0]) * float(b[0]) + float(a[1]) * float(b[1])
    low, high = -1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN
    return min(max(dot, low), high), low <= dot <= high


def angmf_loss(mu_theta: Sequence[float], kappa: float, theta_gt: Sequence[float],
               validate: bool = True) -> float:
    """
    Angular vMF loss:
        -log(kappa^2 + 1) + kappa * acos(mu_theta . theta_gt) + log(1 + exp(-kappa pi))

    Args:
        mu_theta: predicted mean direction (unit 2-vector)
        kappa: predicted concentration, >= 0
        theta_gt: ground-truth direction (unit 2-vector)
        validate: check unit norms (disable only for finite-difference checks)
    """
    if kappa < 0.0:
        raise DomainError(f"kappa must be >= 0, got {kappa}")
    if validate:
        _require_unit(mu_theta, 'mu_theta')
        _require_unit(theta_gt, 'theta_gt')
    dot, _ = _clamped_dot(mu_theta, theta_gt)
    return (-math.log(kappa * kappa + 1.0) + kappa * math.acos(dot)
            + math.log1p(math.exp(-kappa * math.pi)))


def angmf_loss_grad(mu_theta: Sequence[float], kappa: float,
                    theta_gt: Sequence[float]) -> Dict[str, np.ndarray]:
    if kappa < 0.0:
        raise DomainError(f"kappa must be >= 0, got {kappa}")
    dot, inside = _clamped_dot(mu_theta, theta_gt)
    angle = math.acos(dot)
    e = math.exp(-kappa * math.pi)
    d_kappa = -2.0 * kappa / (kappa * kappa + 1.0) + angle - math.pi * e / (1.0 + e)
    d_dot = -kappa / math.sqrt(1.0 - dot * dot) if inside else 0.0
    return {
        'kappa': d_kappa,
        'mu_theta': d_dot * np.asarray(theta_gt, dtype=np.float64),
        'theta_gt': d_dot * np.asarray(mu_theta, dtype=np.float64),
    }


def orientation_loss(p_gamma: Sequence[float], g_gamma: Sequence[float]) -> float:
    """1 - cos of the angle between the normalized prediction and the target, in [0, 2]."""
    p = np.asarray(p_gamma, dtype=np.float64)
    norm = float(np.linalg.norm(p))
    if norm <= EPS_NORM:
        raise DegeneratePredictionError(f"orientation prediction norm {norm:.3e} is too small")
    _require_unit(g_gamma, 'g_gamma')
    return 1.0 - float(p @ np.asarray(g_gamma, dtype=np.float64)) / norm


def orientation_loss_grad(p_gamma: Sequence[float], g_gamma: Sequence[float]) -> np.ndarray:
    """Gradient of orientation_loss w.r.t. the raw prediction."""
    p = np.asarray(p_gamma, dtype=np.float64)
    g = np.asarray(g_gamma, dtype=np.float64)
    norm = float(np.linalg.norm(p))
    if norm <= EPS_NORM:
        raise DegeneratePredictionError(f"orientation prediction norm {norm:.3e} is too small")
    return -(g / norm - (p @ g) * p / norm ** 3)


def build_target(q0: Sequence[float], q_gt: Sequence[float]) -> DisplacementTarget:
    """Polar decomposition of u_gt = q_gt - q0; the direction is masked near zero."""
    ux = float(q_gt[0]) - float(q0[0])
    uy = float(q_gt[1]) - float(q0[1])
    r = math.hypot(ux, uy)
    if r < EPS_DIR:
        return DisplacementTarget(r, (1.0, 0.0), masked=True)
    return DisplacementTarget(r, (ux / r, uy / r), masked=False)


def total_loss(dist: DisplacementDistribution, target: DisplacementTarget,
               orientation: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> float:
    """
    L = L_r + L_theta (+ L_gamma in 3-DoF); L_theta is dropped for masked targets.

    Args:
        dist: predicted displacement distribution
        target: ground-truth displacement
        orientation: optional (p_gamma, g_gamma) pair
    """
    return sum(loss_components(dist, target, orientation).values())


def loss_components(dist: DisplacementDistribution, target: DisplacementTarget,
                    orientation: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> Dict[str, float]:
    parts = {'loss_r': gaussian_nll(target.r_gt, dist.mu_r, dist.sigma2_r)}
    masked = target.masked or target.r_gt < EPS_DIR
    parts['loss_theta'] = 0.0 if masked else angmf_loss(dist.mu_theta, dist.kappa, target.theta_gt)
    if orientation is not None:
        parts['loss_gamma'] = orientation_loss(*orientation)
    return parts


# ---------------------------------------------------------------------------
# Head parameterization
# ---------------------------------------------------------------------------

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def heads_to_arrays(distance_raw: np.ndarray, direction_raw: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Map raw head outputs to distribution parameters.

    distance_raw is [B x 2] = (a_r, b_r), direction_raw is [B x 3] = (c1, c2, d_kappa).
    A direction head output shorter than EPS_MU_THETA falls back to (1, 0).
    """
    mu_r = _softplus(distance_raw[:, 0])
    sigma2 = np.exp(np.clip(distance_raw[:, 1], -LOG_VAR_CLAMP, LOG_VAR_CLAMP))
    c = direction_raw[:, 0:2]
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    mu_theta = np.where(norm >= EPS_MU_THETA, c / np.maximum(norm, EPS_MU_THETA),
                        np.array([[1.0, 0.0]]))
    kappa = _softplus(direction_raw[:, 2])
    return {'mu_r': mu_r, 'sigma2_r': sigma2, 'mu_theta': mu_theta, 'kappa': kappa}


def head_to_distribution(raw: Sequence[float]) -> DisplacementDistribution:
    """Single-sample version taking (a_r, b_r, c1, c2, d_kappa)."""
    raw = np.asarray(raw, dtype=np.float64)
    arrays = heads_to_arrays(raw[None, 0:2], raw[None, 2:5])
    return DisplacementDistribution(
        mu_r=float(arrays['mu_r'][0]),
        sigma2_r=float(arrays['sigma2_r'][0]),
        mu_theta=(float(arrays['mu_theta'][0, 0]), float(arrays['mu_theta'][0, 1])),
        kappa=float(arrays['kappa'][0]),
    )


# ---------------------------------------------------------------------------
# Tape versions (batched, column tensors [B x 1])
# ---------------------------------------------------------------------------

@dataclass
class HeadTensors:
    mu_r: ad.Tensor        # [B x 1]
    sigma2_r: ad.Tensor    # [B x 1]
    mu_theta: ad.Tensor    # [B x 2]
    kappa: ad.Tensor       # [B x 1]


def heads_to_tensors(distance_raw: ad.Tensor, direction_raw: ad.Tensor) -> HeadTensors:
    mu_r = ad.softplus(ad.columns(distance_raw, 0, 1))
    sigma2 = ad.exp(ad.clip(ad.columns(distance_raw, 1, 2), -LOG_VAR_CLAMP, LOG_VAR_CLAMP))
    c = ad.columns(direction_raw, 0, 2)
    length = ad.row_norm(c)
    norm = ad.clip(length, EPS_MU_THETA, np.inf)
    ones = np.ones((1, 2))
    # rows shorter than EPS_MU_THETA become the constant (1, 0), as in heads_to_arrays
    short = (length.value < EPS_MU_THETA).astype(np.float64)
    fallback = short * np.array([[1.0, 0.0]])
    mu_theta = ad.add(ad.mul(ad.div(c, ad.matmul(norm, ones)), (1.0 - short) * ones), fallback)
    kappa = ad.softplus(ad.columns(direction_raw, 2, 3))
    return HeadTensors(mu_r, sigma2, mu_theta, kappa)


def _row_dot(a: ad.Tensor, b: np.ndarray) -> ad.Tensor:
    return ad.matmul(ad.mul(a, b), np.ones((a.shape[1], 1)))


def gaussian_nll_tensor(r_gt: np.ndarray, mu_r: ad.Tensor, sigma2_r: ad.Tensor) -> ad.Tensor:
    err = ad.sub(np.asarray(r_gt, dtype=np.float64).reshape(mu_r.shape), mu_r)
    return ad.mul(0.5, ad.add(ad.div(ad.square(err), sigma2_r), ad.log(sigma2_r)))


def angmf_tensor(mu_theta: ad.Tensor, kappa: ad.Tensor, theta_gt: np.ndarray) -> ad.Tensor:
    dot = ad.clip(_row_dot(mu_theta, np.asarray(theta_gt, dtype=np.float64)),
                  -1.0 + ACOS_MARGIN, 1.0 - ACOS_MARGIN)
    reg = ad.neg(ad.log(ad.add(ad.square(kappa), 1.0)))
    angular = ad.mul(kappa, ad.acos(dot))
    tail = ad.softplus(ad.mul(kappa, -math.pi))
    return ad.add(ad.add(reg, angular), tail)


def orientation_tensor(p_gamma: ad.Tensor, g_gamma: np.ndarray) -> ad.Tensor:
    norm = ad.row_norm(p_gamma)
    if np.any(norm.value <= EPS_NORM):
        raise DegeneratePredictionError("orientation prediction norm is too small")
    cos = ad.div(_row_dot(p_gamma, np.asarray(g_gamma, dtype=np.float64)), norm)
    return ad.sub(1.0, cos)


def total_loss_tensor(heads: HeadTensors, r_gt: np.ndarray, theta_gt: np.ndarray,
                      direction_mask: np.ndarray, p_gamma: Optional[ad.Tensor] = None,
                      g_gamma: Optional[np.ndarray] = None) -> Dict[str, ad.Tensor]:
    """
    Batch-mean loss terms on the tape.

    Args:
        heads: head tensors for a batch of B samples
        r_gt: [B] ground-truth distances
        theta_gt: [B x 2] ground-truth directions (any unit vector where masked)
        direction_mask: [B] 1.0 where the direction term applies, 0.0 where masked
        p_gamma, g_gamma: orientation prediction/target in 3-DoF mode

    Returns:
        Dict with 'loss_r', 'loss_theta', optionally 'loss_gamma', and 'total'
    """
    b = heads.mu_r.shape[0]
    mask = np.asarray(direction_mask, dtype=np.float64).reshape(b, 1)
    terms = {
        'loss_r': ad.mean_all(gaussian_nll_tensor(r_gt, heads.mu_r, heads.sigma2_r)),
        'loss_theta': ad.mean_all(ad.mul(angmf_tensor(heads.mu_theta, heads.kappa, theta_gt), mask)),
    }
    if p_gamma is not None:
        terms['loss_gamma'] = ad.mean_all(orientation_tensor(p_gamma, g_gamma))
    total = ad.add(terms['loss_r'], terms['loss_theta'])
    if 'loss_gamma' in terms:
        total = ad.add(total, terms['loss_gamma'])
    terms['total'] = total
    return terms


def main():
    """Print the closed-form reference values"""
    print(f"I0(1)                      = {bessel_i0(1.0):.10f}")
    print(f"vMF density, kappa = 0     = {vmf_density((1.0, 0.0), (0.0, 1.0), 0.0):.6f}")
    print(f"AngMF, kappa = 0           = {angmf_loss((1.0, 0.0), 0.0, (0.0, 1.0)):.6f}")
    print(f"AngMF, kappa = 1, aligned  = {angmf_loss((1.0, 0.0), 1.0, (1.0, 0.0)):.6f}")


if __name__ == "__main__":
    main()
