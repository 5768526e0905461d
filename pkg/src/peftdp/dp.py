"""Sample-level DP-SGD machinery and an RDP accountant.

Per-sample gradient maps are clipped jointly (one global L2 norm over all
trainable parameters), summed, noised with a Gaussian of standard deviation
sigma * clip_norm, and normalized by the expected batch size. Privacy is
tracked as Renyi DP of the Poisson-subsampled Gaussian mechanism on an
integer order grid and converted to (epsilon, delta) via
epsilon = min_alpha [ rdp(alpha) + ln(1/delta) / (alpha - 1) ].

Accounting assumes add/remove adjacency (Poisson subsampling with rate
q = batch_size / dataset_size); composition over steps is additive in RDP.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

DEFAULT_ORDERS = tuple(range(2, 65))
SIGMA_SEARCH_RANGE = (0.3, 64.0)
CALIBRATION_SLACK = 1e-3


@dataclass
class PrivacySpec:
    """Privacy budget and mechanism parameters for one DP training run."""

    epsilon_target: float
    delta: float
    clip_norm: float = 1.5
    noise_multiplier: float | None = None  # calibrated when None
    sampling_rate: float = 0.0
    total_steps: int = 0

    def validate(self, dataset_size: int | None = None) -> "PrivacySpec":
        if self.epsilon_target <= 0:
            raise ContractError("epsilon_target must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ContractError("delta must lie in (0, 1)")
        if self.clip_norm <= 0:
            raise ContractError("clip_norm must be positive")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ContractError("noise_multiplier must be non-negative")
        if not 0.0 < self.sampling_rate <= 1.0:
            raise ContractError("sampling_rate must lie in (0, 1]")
        if self.total_steps < 1:
            raise ContractError("total_steps must be positive")
        if dataset_size is not None and self.delta >= 1.0 / dataset_size:
            warnings.warn(
                f"delta={self.delta} is not below 1/dataset_size=1/{dataset_size}; "
                "the guarantee is weaker than recommended", stacklevel=2)
        return self


def _as_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


def _consistent_names(sample_grads) -> list[str]:
    names = list(sample_grads[0])
    key = set(names)
    for g in sample_grads[1:]:
        if set(g) != key:
            raise ContractError("per-sample gradient maps disagree on parameter names")
    return names


# ---------------------------------------------------------------------------
# DP-SGD step
# ---------------------------------------------------------------------------

def clip_per_sample(sample_grads, clip_norm: float):
    """Rescale each sample's gradients so the joint global L2 norm is <= clip_norm.

    `sample_grads` is a sequence of {name: gradient} maps, one per sample;
    the norm is taken over the concatenation of ALL parameters in a map,
    not per tensor. Returns new maps of plain float64 arrays.
    """
    if clip_norm <= 0:
        raise ContractError("clip_norm must be positive")
    clipped = []
    for grads in sample_grads:
        arrays = {name: _as_array(g) for name, g in grads.items()}
        sq = 0.0
        for a in arrays.values():
            if not np.all(np.isfinite(a)):
                raise ContractError(f"non-finite gradient for {next(iter(arrays))!r}")
            sq += float((a * a).sum())
        norm = math.sqrt(sq)
        factor = min(1.0, clip_norm / norm) if norm > 0 else 1.0
        clipped.append({name: a * factor for name, a in arrays.items()})
    return clipped


def mean_gradient_map(sample_grads, shapes: dict | None = None) -> dict[str, np.ndarray]:
    """Plain minibatch mean of per-sample gradient maps (the sigma=0 reference)."""
    if not sample_grads:
        if shapes is None:
            raise ContractError("cannot average an empty batch without parameter shapes")
        return {name: np.zeros(shape) for name, shape in shapes.items()}
    names = _consistent_names(sample_grads)
    n = len(sample_grads)
    out = {}
    for name in names:
        total = _as_array(sample_grads[0][name]).copy()
        for g in sample_grads[1:]:
            total += _as_array(g[name])
        out[name] = total / n
    return out


def dp_sgd_step(sample_grads, sigma: float, clip_norm: float,
                expected_batch_size: float, rng,
                shapes: dict | None = None) -> dict[str, np.ndarray]:
    """Noisy average update: (sum of clipped per-sample grads + noise) / B.

    Noise entries are independent Gaussians with standard deviation
    sigma * clip_norm, drawn from `rng`; sigma=0 skips the draw entirely so
    the result bit-equals the plain minibatch mean. An empty Poisson batch
    yields a pure-noise update (shapes must then be supplied).
    """
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    if expected_batch_size <= 0:
        raise ContractError("expected_batch_size must be positive")
    if not sample_grads and shapes is None:
        raise ContractError("empty batch needs parameter shapes for the noise draw")

    if sample_grads:
        names = _consistent_names(sample_grads)
        sums = {}
        for name in names:
            total = _as_array(sample_grads[0][name]).copy()
            for g in sample_grads[1:]:
                total += _as_array(g[name])
            sums[name] = total
    else:
        sums = {name: np.zeros(shape) for name, shape in shapes.items()}

    b = float(expected_batch_size)
    if sigma == 0.0:
        return {name: total / b for name, total in sums.items()}
    std = sigma * clip_norm
    return {name: (total + rng.normal(0.0, std, total.shape)) / b
            for name, total in sums.items()}


# ---------------------------------------------------------------------------
# RDP accounting
# ---------------------------------------------------------------------------

def rdp_subsampled_gaussian(q: float, sigma: float, alpha: int) -> float:
    """Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer alpha.

    epsilon_alpha = ln( sum_{k=0..alpha} C(alpha,k) (1-q)^(alpha-k) q^k
                        exp(k(k-1)/(2 sigma^2)) ) / (alpha - 1),
    evaluated in log space; at q=1 this reduces exactly to alpha/(2 sigma^2).
    """
    if sigma <= 0:
        raise ContractError("sigma must be positive for accounting")
    if not 0.0 < q <= 1.0:
        raise ContractError("sampling rate q must lie in (0, 1]")
    if int(alpha) != alpha or alpha < 2:
        raise ContractError("alpha must be an integer >= 2")
    alpha = int(alpha)
    if q == 1.0:
        return alpha / (2.0 * sigma * sigma)

    log_q, log_1q = math.log(q), math.log1p(-q)
    terms = []
    for k in range(alpha + 1):
        log_binom = math.lgamma(alpha + 1) - math.lgamma(k + 1) - math.lgamma(alpha - k + 1)
        terms.append(log_binom + k * log_q + (alpha - k) * log_1q
                     + k * (k - 1) / (2.0 * sigma * sigma))
    peak = max(terms)
    log_sum = peak + math.log(sum(math.exp(t - peak) for t in terms))
    return max(log_sum / (alpha - 1), 0.0)


class RdpAccountant:
    """Accumulated RDP over an integer order grid, additive across steps."""

    def __init__(self, orders=DEFAULT_ORDERS):
        orders = tuple(int(a) for a in orders)
        if any(a < 2 for a in orders) or not orders:
            raise ContractError("orders must be integers >= 2")
        self.orders = orders
        self.rdp_values = np.zeros(len(orders))
        self.steps_recorded = 0

    def record_step(self, q: float, sigma: float, steps: int = 1) -> None:
        if steps < 1:
            raise ContractError("steps must be positive")
        per_step = np.array([rdp_subsampled_gaussian(q, sigma, a) for a in self.orders])
        self.rdp_values += steps * per_step
        self.steps_recorded += steps


def epsilon_from_rdp(accountant: RdpAccountant, delta: float) -> tuple[float, int]:
    """Convert accumulated RDP to (epsilon, delta)-DP.

    Returns (epsilon, minimizing order). The classic conversion
    epsilon = rdp(alpha) + ln(1/delta)/(alpha-1) is scanned over the grid.
    """
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    if accountant.steps_recorded == 0:
        raise ContractError("accountant has no recorded steps")
    log_inv_delta = math.log(1.0 / delta)
    best_eps, best_alpha = math.inf, accountant.orders[0]
    for alpha, rdp in zip(accountant.orders, accountant.rdp_values):
        eps = rdp + log_inv_delta / (alpha - 1)
        if eps < best_eps:
            best_eps, best_alpha = eps, alpha
    return best_eps, best_alpha


def spent_epsilon(q: float, sigma: float, total_steps: int, delta: float,
                  orders=DEFAULT_ORDERS) -> tuple[float, int]:
    """Epsilon after `total_steps` subsampled-Gaussian steps at (q, sigma)."""
    acct = RdpAccountant(orders)
    acct.record_step(q, sigma, steps=total_steps)
    return epsilon_from_rdp(acct, delta)


def calibrate_noise(epsilon_target: float, delta: float, q: float,
                    total_steps: int, orders=DEFAULT_ORDERS) -> float:
    """Find sigma so the spent epsilon lands in [target - 1e-3, target].

    Binary search over sigma in [0.3, 64]; the returned sigma never exceeds
    the budget. Raises when even sigma=64 cannot meet the target, naming the
    smallest achievable epsilon.
    """
    if epsilon_target <= 0:
        raise ContractError("epsilon_target must be positive")
    lo, hi = SIGMA_SEARCH_RANGE

    def eps_at(sigma):
        return spent_epsilon(q, sigma, total_steps, delta, orders)[0]

    eps_floor = eps_at(hi)
    if eps_floor > epsilon_target:
        raise ContractError(
            f"epsilon_target={epsilon_target} infeasible for q={q}, T={total_steps}: "
            f"smallest achievable epsilon at sigma={hi} is {eps_floor:.6f}")
    if eps_at(lo) <= epsilon_target:
        # even the least-noise end of the range under-spends the budget
        return lo

    for _ in range(200):
        eps_hi = eps_at(hi)
        if epsilon_target - CALIBRATION_SLACK <= eps_hi <= epsilon_target:
            return hi
        mid = 0.5 * (lo + hi)
        if eps_at(mid) > epsilon_target:
            lo = mid
        else:
            hi = mid
    raise ContractError("noise calibration failed to converge")
