"""Two-level random-intercept linear model on per-stratum sufficient statistics.

The marginal covariance of a stratum's outcome vector is
``sigma2_e * I + sigma2_u * J``; the rank-one structure reduces every
likelihood evaluation to the per-stratum statistics ``(n_j, sum y, sum y^2)``,
so a fit is O(J) regardless of the number of units.  Variance components are
estimated by REML (default) or ML on ``(log sigma_u, log sigma_e)`` with an
explicit boundary check at ``sigma2_u = 0``; fixed effects are GLS at the
optimum, equivalent to weighted least squares on stratum means with weights
``w_j = n_j / (sigma2_e + n_j * sigma2_u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize

from .ingest import StratumSummary
from .transform import DesignMatrix

Z95 = 1.96

DEVIANCE_REL_TOL = 1e-10
MAX_ITERATIONS = 200
_GRAD_TOL = 1e-7


class FitError(RuntimeError):
    """Model cannot be fitted: rank deficiency, degenerate data, or failure."""


@dataclass(frozen=True)
class VarianceComponents:
    """Between-stratum and within-stratum variances, in outcome-SD^2 units."""

    sigma2_u: float
    sigma2_e: float

    def __post_init__(self):
        if not (self.sigma2_e > 0 and math.isfinite(self.sigma2_e)):
            raise FitError(f"sigma2_e must be positive, got {self.sigma2_e}")
        if not (self.sigma2_u >= 0 and math.isfinite(self.sigma2_u)):
            raise FitError(f"sigma2_u must be non-negative, got {self.sigma2_u}")


@dataclass
class FixedEffects:
    """GLS estimates with their covariance."""

    names: list[str]
    estimates: np.ndarray
    covariance: np.ndarray

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


@dataclass
class FitResult:
    """Converged (or boundary) variance components, fixed effects, and diagnostics."""

    method: str
    vc: VarianceComponents
    vc_standard_errors: tuple[float | None, float | None]
    fixed: FixedEffects
    deviance: float
    converged: bool
    iterations: int
    at_boundary: bool
    n_total: int
    stratum_fitted: np.ndarray


@dataclass(frozen=True)
class StratumEffect:
    """Empirical-Bayes stratum prediction and its comparative uncertainty."""

    stratum_id: int
    u_hat: float
    se_u: float
    ci_low: float
    ci_high: float
    predicted_mean: float
    raw_residual_mean: float
    shrinkage_factor: float


@dataclass
class OlsResult:
    """Single-level (no random intercept) least-squares comparator."""

    names: list[str]
    estimates: np.ndarray
    covariance: np.ndarray
    residual_variance: float
    residual_variance_se: float
    rss: float
    df_residual: int
    n_total: int
    stratum_fitted: np.ndarray

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


@dataclass(frozen=True)
class _GroupStats:
    """Arrays extracted from stratum summaries, aligned with design rows."""

    n: np.ndarray
    mean: np.ndarray
    ssw: float

    @property
    def n_total(self) -> int:
        return int(self.n.sum())

    @property
    def n_strata(self) -> int:
        return self.n.shape[0]


def _group_stats(summaries: list[StratumSummary]) -> _GroupStats:
    n = np.array([s.n for s in summaries], dtype=np.float64)
    mean = np.array([s.mean_y for s in summaries], dtype=np.float64)
    sum_y2 = np.array([s.sum_y2 for s in summaries], dtype=np.float64)
    ssw = float(np.maximum(sum_y2 - n * mean**2, 0.0).sum())
    return _GroupStats(n=n, mean=mean, ssw=ssw)


def check_full_rank(design: DesignMatrix) -> None:
    """Raise :class:`FitError` naming the collinear columns, if any."""
    X = design.values
    if X.shape[0] < X.shape[1]:
        raise FitError(
            f"design has more columns ({X.shape[1]}) than strata ({X.shape[0]})"
        )
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    if rank < X.shape[1]:
        collinear = [design.names[piv[k]] for k in range(rank, X.shape[1])]
        raise FitError(f"rank-deficient design; collinear column(s): {collinear}")


def _gls_core(stats: _GroupStats, X: np.ndarray, w: np.ndarray):
    """WLS on stratum means: beta, residual means, and the R factor of X'WX."""
    sqrt_w = np.sqrt(w)
    q, r = linalg.qr(sqrt_w[:, None] * X, mode="economic")
    rdiag = np.abs(np.diag(r))
    if rdiag.min() <= rdiag.max() * X.shape[0] * np.finfo(float).eps:
        raise FitError("singular weighted design (X'V^-1 X not invertible)")
    beta = linalg.solve_triangular(r, q.T @ (sqrt_w * stats.mean))
    resid_mean = stats.mean - X @ beta
    return beta, resid_mean, r


def _deviance_at(
    stats: _GroupStats, X: np.ndarray, sigma2_u: float, sigma2_e: float, reml: bool
) -> float:
    n, N, J, p = stats.n, stats.n_total, stats.n_strata, X.shape[1]
    d = sigma2_e + n * sigma2_u
    w = n / d
    _, resid_mean, r = _gls_core(stats, X, w)
    logdet_v = (N - J) * math.log(sigma2_e) + float(np.log(d).sum())
    quad = stats.ssw / sigma2_e + float(w @ resid_mean**2)
    if reml:
        logdet_xvx = 2.0 * float(np.log(np.abs(np.diag(r))).sum())
        return (N - p) * math.log(2 * math.pi) + logdet_v + quad + logdet_xvx
    return N * math.log(2 * math.pi) + logdet_v + quad


def _deviance_gradient(
    stats: _GroupStats, X: np.ndarray, sigma2_u: float, sigma2_e: float, reml: bool
) -> np.ndarray:
    """Gradient of the profiled deviance w.r.t. (sigma2_u, sigma2_e).

    The GLS profile makes the quadratic term stationary in beta, so only
    the explicit dependence on the variance components contributes.
    """
    n, N, J = stats.n, stats.n_total, stats.n_strata
    d = sigma2_e + n * sigma2_u
    w = n / d
    _, m, r = _gls_core(stats, X, w)
    g_u = float(w.sum() - (w**2 * m**2).sum())
    g_e = float(
        (N - J) / sigma2_e
        + (1.0 / d).sum()
        - stats.ssw / sigma2_e**2
        - (w * m**2 / d).sum()
    )
    if reml:
        rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
        xvx_inv = rinv @ rinv.T
        t_u = (X * (w**2)[:, None]).T @ X
        t_e = (X * (w / d)[:, None]).T @ X
        g_u -= float(np.trace(xvx_inv @ t_u))
        g_e -= float(np.trace(xvx_inv @ t_e))
    return np.array([g_u, g_e])


def profiled_deviance(
    summaries: list[StratumSummary],
    design: DesignMatrix,
    vc: VarianceComponents,
    method: str = "reml",
) -> float:
    """-2 times the profiled (restricted or full) log-likelihood at ``vc``."""
    reml = _check_method(method)
    stats = _group_stats(summaries)
    _check_alignment(stats, design)
    return _deviance_at(stats, design.values, vc.sigma2_u, vc.sigma2_e, reml)


def _check_method(method: str) -> bool:
    if method not in ("reml", "ml"):
        raise FitError(f"method must be 'reml' or 'ml', got {method!r}")
    return method == "reml"


def _check_alignment(stats: _GroupStats, design: DesignMatrix) -> None:
    if stats.n_strata != design.n_rows:
        raise FitError(
            f"design rows ({design.n_rows}) do not align with "
            f"summaries ({stats.n_strata})"
        )


def _theta_gradient(stats, X, theta, reml) -> np.ndarray:
    # theta = (log sigma_u, log sigma_e); chain rule d sigma2 / d theta = 2 sigma2
    s2u, s2e = math.exp(2 * theta[0]), math.exp(2 * theta[1])
    g = _deviance_gradient(stats, X, s2u, s2e, reml)
    return g * np.array([2 * s2u, 2 * s2e])


def _theta_deviance(stats, X, theta, reml) -> float:
    return _deviance_at(stats, X, math.exp(2 * theta[0]), math.exp(2 * theta[1]), reml)


def _theta_hessian(stats, X, theta, reml) -> np.ndarray:
    """Hessian of the deviance in theta, by central differences of the gradient."""
    h = 1e-5
    H = np.zeros((2, 2))
    for k in range(2):
        step = np.zeros(2)
        step[k] = h
        g_plus = _theta_gradient(stats, X, theta + step, reml)
        g_minus = _theta_gradient(stats, X, theta - step, reml)
        H[:, k] = (g_plus - g_minus) / (2 * h)
    return 0.5 * (H + H.T)


def _newton_polish(stats, X, theta, reml, max_steps=30):
    """Drive the theta-gradient to ~0 from a near-optimal start."""
    dev = _theta_deviance(stats, X, theta, reml)
    steps = 0
    for _ in range(max_steps):
        g = _theta_gradient(stats, X, theta, reml)
        if np.abs(g).max() <= _GRAD_TOL * (1.0 + abs(dev)):
            break
        H = _theta_hessian(stats, X, theta, reml)
        try:
            direction = -linalg.solve(H, g, assume_a="sym")
        except linalg.LinAlgError:
            direction = -g / max(np.abs(g).max(), 1.0)
        if not np.all(np.isfinite(direction)) or g @ direction >= 0:
            direction = -g / max(np.abs(g).max(), 1.0)
        scale = 1.0
        improved = False
        for _ in range(40):
            candidate = theta + scale * direction
            dev_new = _theta_deviance(stats, X, candidate, reml)
            if math.isfinite(dev_new) and dev_new <= dev:
                theta, dev = candidate, dev_new
                improved = True
                break
            scale *= 0.5
        steps += 1
        if not improved:
            break
    return theta, dev, steps


def _boundary_candidate(stats: _GroupStats, X: np.ndarray, reml: bool):
    """Profile sigma2_e at sigma2_u = 0 (the GLS/OLS collapse) in closed form."""
    beta, m, _ = _gls_core(stats, X, stats.n.copy())
    rss = stats.ssw + float(stats.n @ m**2)
    dof = stats.n_total - X.shape[1] if reml else stats.n_total
    if rss <= 0 or dof <= 0:
        return None
    sigma2_e = rss / dof
    dev = _deviance_at(stats, X, 0.0, sigma2_e, reml)
    return sigma2_e, dev


def fit(
    summaries: list[StratumSummary],
    design: DesignMatrix,
    method: str = "reml",
) -> FitResult:
    """Estimate variance components and GLS fixed effects.

    The minimizer of the profiled deviance over ``{sigma2_u >= 0,
    sigma2_e > 0}`` is located by quasi-Newton search on
    ``(log sigma_u, log sigma_e)`` followed by Newton polishing, then
    compared against the closed-form ``sigma2_u = 0`` boundary.
    """
    reml = _check_method(method)
    stats = _group_stats(summaries)
    _check_alignment(stats, design)
    check_full_rank(design)
    X = design.values
    J, p = X.shape
    N = stats.n_total
    if reml and J <= p:
        raise FitError(f"REML needs more strata than design columns (J={J}, p={p})")
    if N <= p:
        raise FitError(f"need more units than design columns (n={N}, p={p})")
    if N <= J or stats.ssw <= 0:
        raise FitError("no within-stratum variation; sigma2_e is not identifiable")

    boundary = _boundary_candidate(stats, X, reml)
    if boundary is None:
        raise FitError("degenerate data: zero residual variation")
    sigma2_e_b, dev_boundary = boundary

    # moment-based start values
    sigma2_e0 = stats.ssw / (N - J)
    _, m_ols, _ = _gls_core(stats, X, stats.n.copy())
    sigma2_u0 = float(np.var(m_ols) - sigma2_e0 * np.mean(1.0 / stats.n))
    sigma2_u0 = max(sigma2_u0, 1e-3 * sigma2_e0)
    theta0 = 0.5 * np.log([sigma2_u0, sigma2_e0])

    scale = math.log(math.sqrt(sigma2_e0 + sigma2_u0))
    bounds = [(scale - 16.0, scale + 8.0), (scale - 12.0, scale + 8.0)]
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])

    res = optimize.minimize(
        lambda t: _theta_deviance(stats, X, t, reml),
        theta0,
        jac=lambda t: _theta_gradient(stats, X, t, reml),
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": MAX_ITERATIONS, "ftol": DEVIANCE_REL_TOL, "gtol": 1e-10},
    )
    theta, dev_interior, polish_steps = _newton_polish(stats, X, res.x, reml)
    iterations = int(res.nit) + polish_steps

    at_boundary = dev_boundary <= dev_interior + 1e-8 * (1.0 + abs(dev_interior))
    if at_boundary:
        vc = VarianceComponents(0.0, sigma2_e_b)
        deviance = dev_boundary
    else:
        vc = VarianceComponents(math.exp(2 * theta[0]), math.exp(2 * theta[1]))
        deviance = dev_interior

    fixed = gls_fixed_effects(summaries, design, vc)
    grad = _deviance_gradient(stats, X, vc.sigma2_u, vc.sigma2_e, reml)
    grad_theta_e = grad[1] * 2 * vc.sigma2_e
    if at_boundary:
        # at the boundary only the sigma2_e direction must be stationary and
        # the deviance must be non-decreasing into the interior
        converged = (
            abs(grad_theta_e) <= 1e-4 * (1.0 + abs(deviance))
            and grad[0] >= -1e-4 * (1.0 + abs(deviance))
        )
    else:
        grad_theta = grad * np.array([2 * vc.sigma2_u, 2 * vc.sigma2_e])
        converged = bool(np.abs(grad_theta).max() <= 1e-4 * (1.0 + abs(deviance)))

    vc_se = _vc_standard_errors(stats, X, vc, reml, at_boundary)
    return FitResult(
        method=method,
        vc=vc,
        vc_standard_errors=vc_se,
        fixed=fixed,
        deviance=float(deviance),
        converged=converged,
        iterations=iterations,
        at_boundary=at_boundary,
        n_total=N,
        stratum_fitted=X @ fixed.estimates,
    )


def gls_fixed_effects(
    summaries: list[StratumSummary],
    design: DesignMatrix,
    vc: VarianceComponents,
) -> FixedEffects:
    """GLS fixed effects at ``vc``: precision-weighted regression on stratum means.

    ``beta = (X'V^-1 X)^-1 X'V^-1 y`` computed exactly through the stratum
    weights ``w_j = n_j / (sigma2_e + n_j sigma2_u)``; the covariance is
    ``(X'V^-1 X)^-1``.
    """
    stats = _group_stats(summaries)
    _check_alignment(stats, design)
    w = stats.n / (vc.sigma2_e + stats.n * vc.sigma2_u)
    beta, _, r = _gls_core(stats, design.values, w)
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    return FixedEffects(
        names=list(design.names), estimates=beta, covariance=rinv @ rinv.T
    )


def eb_predict(fit: FitResult, summaries: list[StratumSummary]) -> list[StratumEffect]:
    """Empirical-Bayes stratum effects, shrunk toward zero by stratum size.

    ``u_hat = lambda_j * (ybar_j - x_j'beta)`` with
    ``lambda_j = sigma2_u / (sigma2_u + sigma2_e / n_j)``; the comparative
    SE is ``sqrt(sigma2_u * (1 - lambda_j))`` and the CI uses +-1.96 SE.
    """
    stats = _group_stats(summaries)
    if stats.n_strata != fit.stratum_fitted.shape[0]:
        raise FitError("summaries do not align with the fitted model")
    s2u, s2e = fit.vc.sigma2_u, fit.vc.sigma2_e
    m = stats.mean - fit.stratum_fitted
    lam = (s2u * stats.n) / (s2u * stats.n + s2e)
    u = lam * m
    se = np.sqrt(s2u * (1.0 - lam))
    return [
        StratumEffect(
            stratum_id=summaries[j].stratum_id,
            u_hat=float(u[j]),
            se_u=float(se[j]),
            ci_low=float(u[j] - Z95 * se[j]),
            ci_high=float(u[j] + Z95 * se[j]),
            predicted_mean=float(fit.stratum_fitted[j] + u[j]),
            raw_residual_mean=float(m[j]),
            shrinkage_factor=float(lam[j]),
        )
        for j in range(stats.n_strata)
    ]


def vc_standard_errors(fit: FitResult) -> tuple[float | None, float | None]:
    """(SE(sigma2_u), SE(sigma2_e)); SE(sigma2_u) is None at the boundary."""
    return fit.vc_standard_errors


def _vc_standard_errors(
    stats: _GroupStats,
    X: np.ndarray,
    vc: VarianceComponents,
    reml: bool,
    at_boundary: bool,
) -> tuple[float | None, float | None]:
    """Observed-information SEs in log-SD parametrization, delta-mapped to variances.

    The deviance is -2 log L, so Cov(theta) ~= 2 H^-1 for H its Hessian.
    """
    if at_boundary:
        theta_e = 0.5 * math.log(vc.sigma2_e)
        h = 1e-5

        def dev_e(t):
            return _deviance_at(stats, X, 0.0, math.exp(2 * t), reml)

        d2 = (dev_e(theta_e + h) - 2 * dev_e(theta_e) + dev_e(theta_e - h)) / h**2
        if d2 <= 0:
            return (None, None)
        return (None, 2.0 * vc.sigma2_e * math.sqrt(2.0 / d2))
    theta = 0.5 * np.log([vc.sigma2_u, vc.sigma2_e])
    H = _theta_hessian(stats, X, theta, reml)
    try:
        cov = 2.0 * linalg.inv(H)
    except linalg.LinAlgError:
        return (None, None)
    if cov[0, 0] <= 0 or cov[1, 1] <= 0:
        return (None, None)
    return (
        2.0 * vc.sigma2_u * math.sqrt(cov[0, 0]),
        2.0 * vc.sigma2_e * math.sqrt(cov[1, 1]),
    )


def ols_fit(summaries: list[StratumSummary], design: DesignMatrix) -> OlsResult:
    """Single-level OLS with classical standard errors.

    Covariates are stratum-level, so the unit-level regression reduces
    exactly to size-weighted least squares on the stratum means; the
    residual variance uses the ``n - p`` denominator.
    """
    stats = _group_stats(summaries)
    _check_alignment(stats, design)
    check_full_rank(design)
    X = design.values
    N, p = stats.n_total, X.shape[1]
    if N <= p:
        raise FitError(f"need more units than design columns (n={N}, p={p})")
    beta, m, r = _gls_core(stats, X, stats.n.copy())
    rss = stats.ssw + float(stats.n @ m**2)
    df = N - p
    sigma2 = rss / df
    rinv = linalg.solve_triangular(r, np.eye(p))
    covariance = sigma2 * (rinv @ rinv.T)
    return OlsResult(
        names=list(design.names),
        estimates=beta,
        covariance=covariance,
        residual_variance=sigma2,
        residual_variance_se=sigma2 * math.sqrt(2.0 / df),
        rss=rss,
        df_residual=df,
        n_total=N,
        stratum_fitted=X @ beta,
    )
