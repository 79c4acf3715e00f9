"""Runtime verification suites behind the `verify` subcommand.

Each suite runs randomized trials of one family of invariants and returns
margin rows suitable for a CSV, plus a violation count. Suites are pure
given (trials, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analysis, linalg, lora, model, privacy

SCOPES = ("linalg", "theorem", "privacy", "gradients", "all")

MARGIN_CSV_HEADER = "scope,check,trial,value,bound,margin,status"


@dataclass(frozen=True)
class MarginRow:
    scope: str
    check: str
    trial: int
    value: float
    bound: float
    margin: float
    status: str  # "ok" | "violation" | "inconclusive"

    def format(self) -> str:
        return ",".join(
            [
                self.scope,
                self.check,
                str(self.trial),
                repr(float(self.value)),
                repr(float(self.bound)),
                repr(float(self.margin)),
                self.status,
            ]
        )


def _row(scope, check, trial, value, bound, ok) -> MarginRow:
    return MarginRow(
        scope=scope,
        check=check,
        trial=trial,
        value=float(value),
        bound=float(bound),
        margin=float(bound - value),
        status="ok" if ok else "violation",
    )


def verify_linalg(trials: int, seed: int) -> list[MarginRow]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE1)))
    rows = []
    for t in range(trials):
        r = int(rng.integers(1, 17))
        d_out = int(rng.integers(r, 257))
        d_in = int(rng.integers(r, 257))
        b = rng.standard_normal((d_out, r))
        a_prev = rng.standard_normal((r, d_in))
        b_hat, a_hat = lora.fedsvd_reparam(b, a_prev)
        err = linalg.rel_frobenius_error(b_hat @ a_hat, b @ a_prev)
        rows.append(_row("linalg", "reparam_recovery", t, err, 1e-10, err <= 1e-10))
        orth = float(np.max(np.abs(a_hat @ a_hat.T - np.eye(r))))
        rows.append(_row("linalg", "reparam_orthonormal", t, orth, 1e-10, orth <= 1e-10))

        m = rng.standard_normal((int(rng.integers(2, 40)), int(rng.integers(2, 40))))
        res = linalg.svd(m)
        recon = linalg.rel_frobenius_error(
            res.u @ np.diag(res.singular_values) @ res.vt, m
        )
        rows.append(_row("linalg", "svd_reconstruction", t, recon, 1e-9, recon <= 1e-9))
        k = res.vt.shape[0]
        orth_u = float(np.max(np.abs(res.u.T @ res.u - np.eye(k))))
        orth_v = float(np.max(np.abs(res.vt @ res.vt.T - np.eye(k))))
        worst = max(orth_u, orth_v)
        rows.append(_row("linalg", "svd_orthonormal", t, worst, 1e-10, worst <= 1e-10))
    return rows


def verify_conditioning(trials: int, seed: int) -> list[MarginRow]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE2)))
    rows = []
    for t in range(trials):
        r = int(rng.choice([2, 4, 8]))
        d_x = int(rng.choice([8, 16, 32]))
        orthonormal = bool(rng.integers(0, 2))
        if orthonormal:
            q, _ = linalg.qr_thin(rng.standard_normal((d_x, r)))
            a = np.ascontiguousarray(q.T)
        else:
            a = rng.standard_normal((r, d_x)) * rng.uniform(0.5, 2.0)
        b = rng.standard_normal((1, r))
        w = rng.standard_normal((1, d_x)) * 0.2
        x = rng.standard_normal((64, d_x))
        y = rng.integers(0, 2, 64)
        report = analysis.hessian_logreg(a, b, w, x, y)
        result = analysis.conditioning_bounds_check(report)
        if result.status == "inconclusive":
            rows.append(
                MarginRow("theorem", "inconclusive", t, 0.0, 0.0, 0.0, "inconclusive")
            )
            continue
        for name, margin in result.margins.items():
            rows.append(
                _row("theorem", name, t, -margin, analysis.BOUND_REL_TOL, margin >= -analysis.BOUND_REL_TOL)
            )
    return rows


def verify_privacy(trials: int, seed: int) -> list[MarginRow]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE3)))
    rows = []
    orders = np.asarray(privacy.DEFAULT_ORDERS, dtype=np.float64)
    for t in range(trials):
        sigma = float(rng.uniform(0.5, 4.0))
        steps = int(rng.integers(1, 2000))
        # q = 1 closed form: total RDP must equal steps * alpha / (2 sigma^2)
        total = steps * privacy.rdp_subsampled_gaussian(1.0, sigma, privacy.DEFAULT_ORDERS)
        closed = steps * orders / (2.0 * sigma**2)
        err = float(np.max(np.abs(total - closed) / np.maximum(closed, 1e-300)))
        rows.append(_row("privacy", "gaussian_closed_form", t, err, 1e-9, err <= 1e-9))

        q = float(rng.uniform(0.005, 0.5))
        eps_lo = privacy.spent_epsilon(q, sigma, steps, 1e-5)
        eps_hi_sigma = privacy.spent_epsilon(q, sigma * 1.5, steps, 1e-5)
        rows.append(
            _row("privacy", "monotone_sigma", t, eps_hi_sigma, eps_lo, eps_hi_sigma < eps_lo)
        )
        eps_more_steps = privacy.spent_epsilon(q, sigma, steps * 2, 1e-5)
        rows.append(
            _row("privacy", "monotone_steps", t, eps_lo, eps_more_steps, eps_lo < eps_more_steps)
        )
        eps_more_q = privacy.spent_epsilon(min(1.0, q * 1.5), sigma, steps, 1e-5)
        rows.append(
            _row("privacy", "monotone_q", t, eps_lo, eps_more_q + 1e-15, eps_lo <= eps_more_q + 1e-15)
        )
    return rows


def verify_gradients(trials: int, seed: int) -> list[MarginRow]:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE4)))
    rows = []
    for t in range(trials):
        c = int(rng.integers(2, 5))
        d_x = int(rng.integers(3, 8))
        r = int(rng.integers(1, min(3, c, d_x) + 1))
        layer = lora.LoraLayer(
            w0=rng.standard_normal((c, d_x)) * 0.4,
            a=rng.standard_normal((r, d_x)) * 0.6,
            b=rng.standard_normal((c, r)) * 0.6,
            rank=r,
            alpha=float(r),
        )
        clf = model.Classifier(layers=[layer], class_count=c)
        x = rng.standard_normal(d_x)
        y = int(rng.integers(0, c))
        grads = model.per_sample_grads(clf, [model.Example(x=x, y=y)])
        worst = 0.0
        h = 1e-5
        for key in ((0, "a"), (0, "b")):
            g = grads[key][0]
            base = layer.a if key[1] == "a" else layer.b
            for i in range(base.shape[0]):
                for j in range(base.shape[1]):
                    plus = base.copy()
                    plus[i, j] += h
                    minus = base.copy()
                    minus[i, j] -= h
                    lp = model.loss(
                        model.forward(
                            model.Classifier([layer.with_adapters(**{key[1]: plus})], c), x
                        ),
                        y,
                    )
                    lm = model.loss(
                        model.forward(
                            model.Classifier([layer.with_adapters(**{key[1]: minus})], c), x
                        ),
                        y,
                    )
                    fd = (lp - lm) / (2 * h)
                    denom = max(abs(fd), abs(g[i, j]), 1e-2)
                    worst = max(worst, abs(g[i, j] - fd) / denom)
        rows.append(_row("gradients", "finite_difference", t, worst, 1e-6, worst <= 1e-6))

        rep = analysis.grad_norm_identity_check(
            layer.a, layer.b, layer.w0, model.Example(x=x, y=y)
        )
        err = abs(rep.lhs - rep.rhs_identity)
        rows.append(_row("gradients", "norm_identity", t, err, 1e-10, err <= 1e-10))
        rows.append(
            _row("gradients", "norm_bound", t, rep.lhs, rep.rhs_bound + 1e-10, rep.lhs <= rep.rhs_bound + 1e-10)
        )

        xi_b = rng.normal(0.0, 2.0, layer.b.shape)
        xi_a = rng.normal(0.0, 2.0, layer.a.shape)
        exp = analysis.noise_amplification_terms(layer.b, layer.a, xi_b, xi_a)
        rows.append(
            _row("gradients", "noise_expansion", t, exp.residual, 1e-12, exp.residual <= 1e-12)
        )
    return rows


_SUITES = {
    "linalg": verify_linalg,
    "theorem": verify_conditioning,
    "privacy": verify_privacy,
    "gradients": verify_gradients,
}


def run_scope(scope: str, trials: int, seed: int) -> list[MarginRow]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    if trials < 0:
        raise ValueError("trials must be >= 0")
    names = list(_SUITES) if scope == "all" else [scope]
    rows: list[MarginRow] = []
    for name in names:
        rows.extend(_SUITES[name](trials, seed))
    return rows


def violations(rows: list[MarginRow]) -> int:
    return sum(1 for r in rows if r.status == "violation")


def write_margins_csv(path, rows: list[MarginRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MARGIN_CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.format() + "\n")
