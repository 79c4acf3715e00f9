"""DP-SGD primitive (clip + noise + step) and Renyi-DP accountant.

Privacy is applied client-side: each per-example gradient is clipped to a
global norm bound C across all of that example's trainable matrices, the
clipped gradients are summed, a single Gaussian draw N(0, sigma^2 C^2) per
parameter tensor is added, and the result is averaged over the batch. The
accountant composes the RDP of the Poisson-subsampled Gaussian mechanism at
integer orders and converts to (epsilon, delta) at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

# Integer Renyi orders; the low range covers small-sigma/large-q regimes and
# the large tail covers strongly subsampled ones.
DEFAULT_ORDERS: tuple[int, ...] = tuple(range(2, 65)) + (128, 256)

SIGMA_BRACKET = (0.3, 256.0)
SIGMA_SEARCH_TOL = 1e-3


class CalibrationError(RuntimeError):
    """The target epsilon cannot be met inside the sigma search bracket."""


@dataclass(frozen=True)
class PrivacyConfig:
    """Privacy parameters of one client's local optimizer.

    epsilon_target is None when sigma was given explicitly instead of being
    calibrated. total_steps is the full per-client schedule R * tau used for
    calibration, independent of how many rounds the client is sampled into.
    """

    delta: float
    clip_norm: float
    sigma: float
    sample_rate: float
    total_steps: int
    epsilon_target: float | None = None

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not (0.0 < self.sample_rate <= 1.0):
            raise ValueError(f"sample_rate must be in (0, 1], got {self.sample_rate}")
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.epsilon_target is not None and self.epsilon_target <= 0.0:
            raise ValueError(f"epsilon_target must be positive, got {self.epsilon_target}")


def rdp_subsampled_gaussian(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """Per-order RDP of one Poisson-subsampled Gaussian step.

    For q = 1 this is the Gaussian mechanism value alpha / (2 sigma^2). For
    q < 1 it is the exact binomial expansion at integer orders,
        RDP_a = log( sum_k C(a,k) (1-q)^(a-k) q^k exp(k(k-1)/(2 sigma^2)) ) / (a-1),
    evaluated in log space.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive; the RDP of a noiseless step is infinite")
    if not (0.0 < q <= 1.0):
        raise ValueError(f"sampling rate must be in (0, 1], got {q}")
    alphas = np.asarray(orders, dtype=np.float64)
    if np.any(alphas <= 1) or np.any(alphas != np.round(alphas)):
        raise ValueError("orders must be integers greater than 1")
    if q == 1.0:
        return alphas / (2.0 * sigma * sigma)
    out = np.empty(len(alphas))
    logq = math.log(q)
    log1mq = math.log1p(-q)
    for i, alpha in enumerate(alphas.astype(int)):
        k = np.arange(alpha + 1)
        log_terms = (
            gammaln(alpha + 1)
            - gammaln(k + 1)
            - gammaln(alpha - k + 1)
            + k * logq
            + (alpha - k) * log1mq
            + k * (k - 1) / (2.0 * sigma * sigma)
        )
        out[i] = logsumexp(log_terms) / (alpha - 1)
    return out


@dataclass
class RdpAccountant:
    """Additive RDP ledger for repeated subsampled-Gaussian steps."""

    orders: np.ndarray
    rdp_per_step: np.ndarray
    steps_accumulated: int = 0

    @classmethod
    def for_mechanism(cls, q: float, sigma: float, orders=DEFAULT_ORDERS) -> "RdpAccountant":
        orders_arr = np.asarray(orders, dtype=np.float64)
        return cls(orders=orders_arr, rdp_per_step=rdp_subsampled_gaussian(q, sigma, orders))

    def advance(self, steps: int = 1) -> None:
        if steps < 0:
            raise ValueError(f"steps must be >= 0, got {steps}")
        self.steps_accumulated += steps

    def total_rdp(self) -> np.ndarray:
        return self.steps_accumulated * self.rdp_per_step


def epsilon_from_rdp(orders, rdp_total, delta: float) -> tuple[float, float]:
    """Optimal (epsilon, order) for the standard RDP -> (eps, delta) conversion."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    orders = np.asarray(orders, dtype=np.float64)
    rdp_total = np.asarray(rdp_total, dtype=np.float64)
    eps = rdp_total + math.log(1.0 / delta) / (orders - 1.0)
    best = int(np.argmin(eps))
    return float(eps[best]), float(orders[best])


def rdp_to_epsilon(accountant: RdpAccountant, delta: float) -> tuple[float, float]:
    """Spent epsilon of the accountant's composed steps, with the best order."""
    if accountant.steps_accumulated < 1:
        raise ValueError("accountant has no accumulated steps")
    return epsilon_from_rdp(accountant.orders, accountant.total_rdp(), delta)


def spent_epsilon(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS) -> float:
    """Epsilon after `steps` subsampled-Gaussian steps at (q, sigma)."""
    rdp = steps * rdp_subsampled_gaussian(q, sigma, orders)
    return epsilon_from_rdp(orders, rdp, delta)[0]


def calibrate_sigma(
    epsilon_target: float,
    delta: float,
    q: float,
    total_steps: int,
    orders=DEFAULT_ORDERS,
    bracket: tuple[float, float] = SIGMA_BRACKET,
    tol: float = SIGMA_SEARCH_TOL,
) -> float:
    """Smallest noise multiplier (within `tol`) meeting the epsilon target.

    Binary search over sigma in `bracket`; epsilon is strictly decreasing in
    sigma. Returns the bracket's lower edge when even that already satisfies
    the target (effectively no privacy pressure); raises CalibrationError
    when the target is unreachable at the upper edge.
    """
    if epsilon_target <= 0.0:
        raise ValueError(f"epsilon_target must be positive, got {epsilon_target}")
    lo, hi = bracket
    if spent_epsilon(q, lo, total_steps, delta, orders) <= epsilon_target:
        return lo
    if spent_epsilon(q, hi, total_steps, delta, orders) > epsilon_target:
        raise CalibrationError(
            f"epsilon target {epsilon_target} unreachable with sigma <= {hi} "
            f"(q={q}, steps={total_steps}, delta={delta})"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if spent_epsilon(q, mid, total_steps, delta, orders) <= epsilon_target:
            hi = mid
        else:
            lo = mid
    return hi


def global_grad_norm(grad) -> float:
    """Frobenius norm over the concatenation of one example's gradient matrices."""
    if isinstance(grad, dict):
        return math.sqrt(sum(float(np.sum(g * g)) for g in grad.values()))
    g = np.asarray(grad, dtype=np.float64)
    return math.sqrt(float(np.sum(g * g)))


def clip_gradient(grad, clip_norm: float):
    """Rescale one example's gradient to norm at most clip_norm.

    Applies g * min(1, C / ||g||) where ||g|| is the global norm across all
    matrices of the example; gradients already inside the ball are returned
    unchanged (same scaling semantics as g / max(1, ||g|| / C)).
    """
    if clip_norm <= 0.0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    norm = global_grad_norm(grad)
    factor = 1.0 if norm <= clip_norm else clip_norm / norm
    if isinstance(grad, dict):
        return {k: factor * g for k, g in grad.items()}
    return factor * np.asarray(grad, dtype=np.float64)


def _batch_clip_factors(grads: dict, clip_norm: float | None, m: int) -> np.ndarray:
    if clip_norm is None:
        return np.ones(m)
    sq = np.zeros(m)
    for g in grads.values():
        sq += np.sum(g.reshape(m, -1) ** 2, axis=1)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, np.where(norms > 0.0, clip_norm / norms, 1.0))


def dp_sgd_step(
    params: dict,
    per_sample_grads: dict,
    trainable,
    cfg: PrivacyConfig | None,
    lr: float,
    rng: np.random.Generator,
) -> dict:
    """One DP-SGD update over a sampled batch.

    params maps keys to current matrices; per_sample_grads maps the same keys
    to (m, ...) stacked per-example gradients. Each example is clipped to the
    global norm bound, the clipped gradients are summed, one Gaussian draw
    N(0, sigma^2 C^2) per trainable tensor is added, and the total is divided
    by the batch size m. Only keys in `trainable` are updated; with sigma = 0
    and no clipping active this reduces exactly to averaged SGD. Keys are
    processed in sorted order so the noise stream is reproducible.
    """
    keys = sorted(trainable)
    if not keys:
        return dict(params)
    m = per_sample_grads[keys[0]].shape[0]
    if m == 0:
        raise ValueError("empty batch")
    clip_norm = cfg.clip_norm if cfg is not None else None
    sigma = cfg.sigma if cfg is not None else 0.0
    factors = _batch_clip_factors(
        {k: per_sample_grads[k] for k in keys}, clip_norm, m
    )
    new_params = dict(params)
    for key in keys:
        g = per_sample_grads[key]
        total = np.einsum("n,n...->...", factors, g)
        if sigma > 0.0:
            total = total + rng.normal(0.0, sigma * clip_norm, size=total.shape)
        new_params[key] = params[key] - lr * (total / m)
    return new_params
