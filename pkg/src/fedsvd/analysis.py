"""Numerical verification of the spectral and algebraic properties.

Covers the binary-logistic Hessian conditioning bounds (the Hessian in b is
a @ m @ a.T for a data-curvature matrix m, so orthonormal rows of `a` make
its condition number depend only on the data), the gradient-norm identity
for the adapter factor, and the exact expansion of the post-update noise
product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg, model
from .lora import LoraLayer

BOUND_REL_TOL = 1e-8
NOISE_IDENTITY_TOL = 1e-12
# Hessians whose spectrum collapses below this (relative) are not rank-r and
# the condition-number bounds are vacuous for them.
DEGENERATE_EIG_TOL = 1e-10


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


@dataclass(frozen=True)
class HessianReport:
    h: np.ndarray                      # r x r Hessian of the loss in b
    m: np.ndarray                      # d_x x d_x data curvature matrix
    kappa_h: float
    kappa_a: float
    lambda_max_m: float
    lambda_min_m_restricted: float     # smallest eigenvalue of m on rowspace(a)
    bound_general: float               # kappa_a^2 * lambda_max / lambda_min_restricted
    bound_orthonormal: float           # lambda_max / lambda_min_restricted
    sigma_max_a: float
    sigma_min_a: float
    lambda_max_h: float
    lambda_min_h: float
    a_orthonormal: bool


@dataclass(frozen=True)
class ConditioningCheck:
    status: str                        # "pass" | "fail" | "inconclusive"
    margins: dict
    report: HessianReport


def hessian_logreg(a, b, w, features, labels) -> HessianReport:
    """Curvature report for scalar-logit logistic regression in b.

    With logits z_i = (w + b @ a) x_i and binary labels, the Hessian of the
    mean cross-entropy with respect to b is a @ m @ a.T where
    m = mean_i sigmoid(z_i)(1 - sigmoid(z_i)) x_i x_i^T. The restricted
    smallest eigenvalue projects m onto an orthonormal basis of the row
    space of `a` (QR of a.T).
    """
    a = linalg.as_matrix(a, "a")
    b = linalg.as_matrix(b, "b")
    w = linalg.as_matrix(w, "w")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("empty dataset")
    if b.shape[0] != 1 or w.shape[0] != 1:
        raise ValueError("scalar-logit setting requires 1-row b and w")
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("labels must be binary")

    z = x @ (w + b @ a).T
    weight = sigmoid(z) * (1.0 - sigmoid(z))
    m = (x.T * weight.ravel()) @ x / len(x)
    m = (m + m.T) / 2.0
    h = a @ m @ a.T
    h = (h + h.T) / 2.0

    q, _ = linalg.qr_thin(a.T)
    restricted = q.T @ m @ q
    eig_h, _ = linalg.eig_sym(h)
    eig_m, _ = linalg.eig_sym(m)
    eig_restricted, _ = linalg.eig_sym((restricted + restricted.T) / 2.0)
    s_a = linalg.svd(a).singular_values
    kappa_a = float(s_a[0] / s_a[-1]) if s_a[-1] > 0 else np.inf
    lambda_min_restricted = float(eig_restricted[-1])
    orthonormal = float(np.max(np.abs(a @ a.T - np.eye(a.shape[0])))) <= 1e-10
    bound_general = (
        kappa_a**2 * eig_m[0] / lambda_min_restricted
        if lambda_min_restricted > 0
        else np.inf
    )
    return HessianReport(
        h=h,
        m=m,
        kappa_h=float(eig_h[0] / eig_h[-1]) if eig_h[-1] > 0 else np.inf,
        kappa_a=kappa_a,
        lambda_max_m=float(eig_m[0]),
        lambda_min_m_restricted=lambda_min_restricted,
        bound_general=float(bound_general),
        bound_orthonormal=(
            float(eig_m[0] / lambda_min_restricted) if lambda_min_restricted > 0 else np.inf
        ),
        sigma_max_a=float(s_a[0]),
        sigma_min_a=float(s_a[-1]),
        lambda_max_h=float(eig_h[0]),
        lambda_min_h=float(eig_h[-1]),
        a_orthonormal=orthonormal,
    )


def _rel_margin(lhs: float, rhs: float) -> float:
    # positive when lhs <= rhs, in units relative to the larger magnitude
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return (rhs - lhs) / scale


def conditioning_bounds_check(report: HessianReport, tol: float = BOUND_REL_TOL) -> ConditioningCheck:
    """Check the Hessian conditioning bounds for one instance.

    (a) lambda_max(h) <= sigma_max(a)^2 lambda_max(m)
    (b) lambda_min(h) >= sigma_min(a)^2 lambda_min(m restricted to rowspace(a))
    (c) kappa(h) <= kappa(a)^2 lambda_max(m) / lambda_min(m restricted)
    (d) with orthonormal rows: kappa(h) <= lambda_max(m) / lambda_min(m restricted)

    Instances whose Hessian is numerically rank-deficient are reported
    inconclusive rather than failed.
    """
    r = report
    if (
        r.lambda_min_h <= DEGENERATE_EIG_TOL * max(r.lambda_max_h, 0.0)
        or r.lambda_min_m_restricted <= 0.0
        or not np.isfinite(r.kappa_a)
    ):
        return ConditioningCheck(status="inconclusive", margins={}, report=r)

    margins = {
        "a_lambda_max": _rel_margin(r.lambda_max_h, r.sigma_max_a**2 * r.lambda_max_m),
        "b_lambda_min": _rel_margin(
            r.sigma_min_a**2 * r.lambda_min_m_restricted, r.lambda_min_h
        ),
        "c_kappa_general": _rel_margin(r.kappa_h, r.bound_general),
    }
    if r.a_orthonormal:
        margins["d_kappa_orthonormal"] = _rel_margin(r.kappa_h, r.bound_orthonormal)
    status = "pass" if all(v >= -tol for v in margins.values()) else "fail"
    return ConditioningCheck(status=status, margins=margins, report=r)


@dataclass(frozen=True)
class GradNormReport:
    lhs: float            # Frobenius norm of the per-example gradient in b
    rhs_identity: float   # |dl/dz| * |a x|
    rhs_bound: float      # |dl/dz| * sigma_max(a) * |x|
    spectral_a: float


def grad_norm_identity_check(a, b, w, example: model.Example) -> GradNormReport:
    """Evaluate the gradient-norm identity for one example.

    The adapter-factor gradient is (dl/dz) (a x)^T, so its Frobenius norm
    factors exactly into |dl/dz| * |a x|, which the spectral norm of `a`
    bounds by |dl/dz| * sigma_max(a) * |x|; with orthonormal rows the bound
    is |dl/dz| * |x|.
    """
    a = linalg.as_matrix(a, "a")
    b = linalg.as_matrix(b, "b")
    w = linalg.as_matrix(w, "w")
    x = np.asarray(example.x, dtype=np.float64)
    c = w.shape[0]
    z = (w + b @ a) @ x
    if c == 1:
        dz = np.array([sigmoid(z[0]) - float(example.y)])
    else:
        dz = model.softmax(z)
        dz[example.y] -= 1.0
    grad_b = np.outer(dz, a @ x)
    spec_a = linalg.spectral_norm(a)
    dz_norm = float(np.linalg.norm(dz))
    return GradNormReport(
        lhs=float(np.linalg.norm(grad_b)),
        rhs_identity=dz_norm * float(np.linalg.norm(a @ x)),
        rhs_bound=dz_norm * spec_a * float(np.linalg.norm(x)),
        spectral_a=spec_a,
    )


@dataclass(frozen=True)
class NoiseExpansion:
    signal: np.ndarray       # b @ a
    noise_b_term: np.ndarray  # xi_b @ a
    noise_a_term: np.ndarray  # b @ xi_a
    quadratic_term: np.ndarray  # xi_b @ xi_a
    norms: dict
    residual: float


def noise_amplification_terms(b, a, xi_b, xi_a) -> NoiseExpansion:
    """Exact expansion of the perturbed adapter product.

    (b + xi_b)(a + xi_a) = b a + xi_b a + b xi_a + xi_b xi_a; the residual of
    the recomposition is checked against a strict absolute tolerance, and the
    Frobenius norm of each term is reported for amplification measurements.
    """
    b = linalg.as_matrix(b, "b")
    a = linalg.as_matrix(a, "a")
    xi_b = linalg.as_matrix(xi_b, "xi_b")
    xi_a = linalg.as_matrix(xi_a, "xi_a")
    if xi_b.shape != b.shape or xi_a.shape != a.shape:
        raise ValueError("noise shapes must match the adapter shapes")

    signal = b @ a
    term_b = xi_b @ a
    term_a = b @ xi_a
    term_q = xi_b @ xi_a
    total = (b + xi_b) @ (a + xi_a)
    residual = float(np.max(np.abs(total - (signal + term_b + term_a + term_q))))
    if residual > NOISE_IDENTITY_TOL:
        raise AssertionError(
            f"noise expansion residual {residual:.3e} exceeds {NOISE_IDENTITY_TOL}"
        )
    norms = {
        "signal": linalg.frobenius(signal),
        "noise_b": linalg.frobenius(term_b),
        "noise_a": linalg.frobenius(term_a),
        "quadratic": linalg.frobenius(term_q),
    }
    return NoiseExpansion(
        signal=signal,
        noise_b_term=term_b,
        noise_a_term=term_a,
        quadratic_term=term_q,
        norms=norms,
        residual=residual,
    )


def adapter_grad_for_example(layer: LoraLayer, class_count: int, example: model.Example) -> np.ndarray:
    """Per-example gradient of the loss in the b factor, via the model module."""
    clf = model.Classifier(layers=[layer], class_count=class_count)
    grads = model.per_sample_grads(clf, [example])
    return grads[(0, "b")][0]
