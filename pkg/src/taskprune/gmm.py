"""Diagonal-covariance Gaussian mixtures fit by EM, selected by BIC.

The fitted parameter set is the only artifact a device ever uploads, so
the wire format (a small JSON document) doubles as the privacy
boundary: raw samples and features never leave the device.

Initialization is fully seed-determined: k-means++ picks the means,
weights start uniform, and every component starts from the global
per-dimension sample variance. Variances are floored at 1e-6 so no
component can collapse to a singular Gaussian.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import jsonio
from .errors import ValidationError

VARIANCE_FLOOR = 1e-6
WIRE_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GmmParams:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal covariances
    seed: int = 0

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self) -> None:
        if self.weights.ndim != 1 or self.means.ndim != 2 or self.variances.ndim != 2:
            raise ValidationError("mixture parameter arrays have wrong rank")
        if not (len(self.weights) == len(self.means) == len(self.variances)):
            raise ValidationError("component counts disagree across parameter arrays")
        if self.means.shape != self.variances.shape:
            raise ValidationError("means and variances have different dimensions")
        if abs(self.weights.sum() - 1.0) > 1e-9 or self.weights.min() < 0:
            raise ValidationError("component weights are not a probability vector")
        if self.variances.min() < VARIANCE_FLOOR * (1 - 1e-12):
            raise ValidationError("variance below the floor")

    def to_dict(self) -> dict:
        return {
            "version": WIRE_VERSION,
            "K": self.n_components,
            "dim": self.dim,
            "seed": self.seed,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GmmParams":
        params = cls(
            weights=np.asarray(doc["weights"], dtype=np.float64),
            means=np.asarray(doc["means"], dtype=np.float64),
            variances=np.asarray(doc["variances"], dtype=np.float64),
            seed=int(doc.get("seed", 0)),
        )
        if params.n_components != doc["K"] or params.dim != doc["dim"]:
            raise ValidationError("declared K/dim disagree with parameter arrays")
        params.validate()
        return params


def save_params(path, params: GmmParams) -> None:
    jsonio.dump(params.to_dict(), path)


def load_params(path) -> GmmParams:
    return GmmParams.from_dict(jsonio.load(path))


@dataclass
class FitReport:
    log_likelihood: list[float]  # per-iteration totals, non-decreasing
    converged: bool
    iterations: int
    bic: float
    warnings: list[str] = field(default_factory=list)


def _component_log_densities(params: GmmParams, x: np.ndarray) -> np.ndarray:
    """log(pi_k) + log N(x | mu_k, diag sigma2_k) for every sample/component."""
    inv = 1.0 / params.variances
    const = np.log(params.weights) - 0.5 * (
        params.dim * LOG_2PI + np.log(params.variances).sum(axis=1)
    )
    quad = (
        (x * x) @ inv.T
        - 2.0 * (x @ (params.means * inv).T)
        + (params.means * params.means * inv).sum(axis=1)
    )
    return const - 0.5 * quad


def _as_batch(params: GmmParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValidationError(
            f"feature dimension {x.shape[-1]} does not match mixture dim {params.dim}"
        )
    return x, single


def log_density(params: GmmParams, x: np.ndarray):
    """Log mixture density in nats, log-sum-exp stabilized; (n,) or scalar."""
    batch, single = _as_batch(params, x)
    out = logsumexp(_component_log_densities(params, batch), axis=1)
    return float(out[0]) if single else out


def responsibilities(params: GmmParams, x: np.ndarray) -> np.ndarray:
    batch, single = _as_batch(params, x)
    lj = _component_log_densities(params, batch)
    resp = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return resp[0] if single else resp


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:  # all remaining points coincide with a chosen center
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def bic_parameter_count(k: int, dim: int) -> int:
    return (k - 1) + k * dim + k * dim  # weights, means, diagonal variances


def fit_em(
    features: np.ndarray,
    k: int,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[GmmParams, FitReport]:
    """Seeded EM fit; the log-likelihood trace in the report is non-decreasing."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError("features must be a 2-D matrix with at least one column")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")
    n, dim = x.shape
    if k < 1 or n < k:
        raise ValidationError(f"need at least K={k} samples, got {n}")
    rng = np.random.default_rng(seed)
    params = GmmParams(
        weights=np.full(k, 1.0 / k),
        means=_kmeans_pp(x, k, rng),
        variances=np.tile(np.maximum(x.var(axis=0), VARIANCE_FLOOR), (k, 1)),
        seed=seed,
    )
    warnings: list[str] = []
    degenerate: set[int] = set()
    loglik: list[float] = []
    converged = False
    iterations = 0
    x_sq = x * x
    prev = -np.inf
    for _ in range(max_iters):
        lj = _component_log_densities(params, x)
        per_sample = logsumexp(lj, axis=1)
        total = float(per_sample.sum())
        loglik.append(total)
        if total - prev < tol and iterations > 0:
            converged = True
            break
        prev = total
        resp = np.exp(lj - per_sample[:, None])
        counts = resp.sum(axis=0)
        for comp in np.flatnonzero(counts < 1.0):
            if comp not in degenerate:
                degenerate.add(int(comp))
                warnings.append(
                    f"component {comp} degenerate at iteration {iterations}"
                    f" (effective count {counts[comp]:.3g}); variance floored"
                )
        safe = np.maximum(counts, 1e-12)[:, None]
        params.means = (resp.T @ x) / safe
        params.variances = np.maximum(
            (resp.T @ x_sq) / safe - params.means**2, VARIANCE_FLOOR
        )
        params.weights = counts / n
        iterations += 1
    else:
        # ran out of iterations after an M-step; score the final parameters
        loglik.append(float(logsumexp(_component_log_densities(params, x), axis=1).sum()))
    bic = -2.0 * loglik[-1] + bic_parameter_count(k, dim) * math.log(n)
    params.validate()
    return params, FitReport(
        log_likelihood=loglik,
        converged=converged,
        iterations=iterations,
        bic=bic,
        warnings=warnings,
    )


def select_k_bic(
    features: np.ndarray,
    k_range,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[GmmParams, int, list[float]]:
    """Fit every K in k_range (same seed) and keep the minimum-BIC fit.

    Returns (params, chosen K, per-K BIC list aligned with k_range).
    BIC ties resolve toward smaller K. Individual fit failures are
    skipped (BIC recorded as +inf); if every K fails the errors are
    aggregated.
    """
    ks = list(k_range)
    if not ks:
        raise ValidationError("k_range is empty")
    bics: list[float] = []
    fitted: list[tuple[float, int, GmmParams]] = []
    failures: list[str] = []
    for k in ks:
        try:
            params, report = fit_em(features, k, max_iters=max_iters, tol=tol, seed=seed)
        except ValidationError as exc:
            bics.append(math.inf)
            failures.append(f"K={k}: {exc}")
            continue
        bics.append(report.bic)
        fitted.append((report.bic, k, params))
    if not fitted:
        raise ValidationError("all mixture fits failed: " + "; ".join(failures))
    best_bic, chosen, best_params = min(fitted, key=lambda t: (t[0], t[1]))
    return best_params, chosen, bics
