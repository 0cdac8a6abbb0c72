"""Intersectional stratum analysis built on the two-level random-intercept model.

Workflow: partition the cohort into strata from the full cross-classification
of the social factors, fit an unadjusted model (intercept only: total
between-stratum variation) and an adjusted model (stratum-level additive main
effects: what remains after additive explanation), then read off the variance
partition coefficient, the proportional change in stratum variance, and the
shrunken stratum effects with their rankings.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .ingest import (
    CohortDataset,
    DataError,
    StratumIndex,
    StratumSummary,
    build_strata,
    summarize_strata,
)
from .lmm import FitError, FitResult, StratumEffect, eb_predict, fit
from .transform import (
    DesignMatrix,
    intercept_design,
    main_effects_design,
    main_effects_for_codes,
    with_interaction,
)

MEANINGFUL_THRESHOLD = 0.1


def vpc(sigma2_u: float, sigma2_e: float) -> float:
    """Share of total outcome variance lying between strata."""
    total = sigma2_u + sigma2_e
    if total <= 0:
        raise ValueError("total variance must be positive")
    return sigma2_u / total


def pcv(sigma2_u_base: float, sigma2_u_comp: float) -> float:
    """Proportional change in stratum variance from a baseline model.

    Positive when the comparison model absorbs between-stratum variance;
    may be negative.
    """
    if sigma2_u_base <= 0:
        raise ValueError("baseline stratum variance must be positive")
    return (sigma2_u_base - sigma2_u_comp) / sigma2_u_base


@dataclass
class MaihdaModelResult:
    """One fitted model plus the stratum-level quantities derived from it."""

    model_tag: str
    fit: FitResult
    effects: list[StratumEffect]
    index: StratumIndex
    summaries: list[StratumSummary]
    pcv_vs_baseline: tuple[str, float] | None = None

    @property
    def vpc(self) -> float:
        return vpc(self.fit.vc.sigma2_u, self.fit.vc.sigma2_e)

    def unsuppressed(self) -> list[tuple[StratumEffect, StratumSummary]]:
        return [
            (e, s)
            for e, s in zip(self.effects, self.summaries)
            if not s.suppressed
        ]


def _prepare(dataset: CohortDataset, suppression_threshold: int):
    index = build_strata(dataset)
    summaries = summarize_strata(dataset, index, suppression_threshold)
    return index, summaries


def fit_model1(
    dataset: CohortDataset,
    method: str = "reml",
    suppression_threshold: int = 10,
) -> MaihdaModelResult:
    """Unadjusted model: intercept plus stratum random effect."""
    index, summaries = _prepare(dataset, suppression_threshold)
    design = intercept_design(index.n_strata)
    result = fit(summaries, design, method=method)
    return MaihdaModelResult(
        model_tag="model1",
        fit=result,
        effects=eb_predict(result, summaries),
        index=index,
        summaries=summaries,
    )


def fit_model2(
    dataset: CohortDataset,
    method: str = "reml",
    suppression_threshold: int = 10,
    baseline: MaihdaModelResult | None = None,
) -> MaihdaModelResult:
    """Adjusted model: stratum-level additive main effects plus random effect.

    When ``baseline`` (a fitted unadjusted model on the same data) is given,
    the proportional change in stratum variance against it is attached.
    """
    index, summaries = _prepare(dataset, suppression_threshold)
    design = main_effects_design(index)
    result = fit(summaries, design, method=method)
    pcv_vs = None
    if baseline is not None:
        if baseline.index.n_strata != index.n_strata:
            raise DataError("baseline model was fitted on different strata")
        pcv_vs = ("model1", pcv(baseline.fit.vc.sigma2_u, result.vc.sigma2_u))
    return MaihdaModelResult(
        model_tag="model2",
        fit=result,
        effects=eb_predict(result, summaries),
        index=index,
        summaries=summaries,
        pcv_vs_baseline=pcv_vs,
    )


@dataclass(frozen=True)
class StratumTableRow:
    """One stratum's entry in a ranked outcome table."""

    stratum_id: int
    labels: tuple[str, ...]
    n: int
    suppressed: bool
    mean_y: float | None
    u_hat: float
    se_u: float
    ci_low: float
    ci_high: float
    predicted_mean: float
    rank: int | float | None
    significant: bool
    meaningful: bool


def stratum_table(
    result: MaihdaModelResult,
    order: str = "by_effect",
    meaningful_threshold: float = MEANINGFUL_THRESHOLD,
) -> list[StratumTableRow]:
    """Ranked stratum table with small-cell suppression applied to display values.

    Ranks ascend with the ordering value (1 = lowest), average on ties, and
    are withheld (None) for suppressed strata, as are raw means.
    ``significant`` means the 95% interval for the stratum effect excludes
    zero; ``meaningful`` additionally requires the effect to exceed
    ``meaningful_threshold`` in absolute value.
    """
    if order not in ("by_effect", "by_mean"):
        raise ValueError(f"order must be 'by_effect' or 'by_mean', got {order!r}")
    effects, summaries = result.effects, result.summaries
    values = np.array(
        [e.predicted_mean if order == "by_mean" else e.u_hat for e in effects]
    )
    keep = np.array([not s.suppressed for s in summaries])
    ranks = np.full(len(effects), np.nan)
    if keep.any():
        ranks[keep] = rankdata(values[keep], method="average")
    rows = []
    for j, (e, s) in enumerate(zip(effects, summaries)):
        significant = e.ci_low > 0 or e.ci_high < 0
        rows.append(
            StratumTableRow(
                stratum_id=s.stratum_id,
                labels=result.index.labels(s.stratum_id),
                n=s.n,
                suppressed=s.suppressed,
                mean_y=None if s.suppressed else s.mean_y,
                u_hat=e.u_hat,
                se_u=e.se_u,
                ci_low=e.ci_low,
                ci_high=e.ci_high,
                predicted_mean=e.predicted_mean,
                rank=None if s.suppressed else _as_rank(ranks[j]),
                significant=significant,
                meaningful=significant and abs(e.u_hat) > meaningful_threshold,
            )
        )
    order_values = {r.stratum_id: values[j] for j, r in enumerate(rows)}
    rows.sort(key=lambda r: (order_values[r.stratum_id], r.stratum_id))
    return rows


def _as_rank(value: float) -> int | float:
    return int(value) if float(value).is_integer() else float(value)


def top_bottom(rows: list[StratumTableRow], k: int = 10):
    """(bottom k, top k) unsuppressed rows of a ranked table."""
    ranked = [r for r in rows if r.rank is not None]
    return ranked[:k], ranked[len(ranked) - k :]


def benchmark_share(values, threshold: float) -> float:
    """Fraction of the given stratum values at or above a benchmark."""
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        raise ValueError("no values to compare against the benchmark")
    return float((arr >= threshold).mean())


@dataclass(frozen=True)
class ScanRow:
    """One candidate term's effect on the residual stratum variance."""

    term: str
    sigma2_u: float
    sigma2_e: float
    vpc: float
    pcv_vs_baseline: float
    converged: bool
    fit: FitResult | None = None
    error: str | None = None


@dataclass
class ScanResult:
    """Baseline model and scan rows sorted by explanatory power."""

    baseline_tag: str
    baseline_sigma2_u: float
    rows: list[ScanRow] = field(default_factory=list)


def _run_scan(
    terms: list[str],
    designs: list[DesignMatrix],
    summaries: list[StratumSummary],
    method: str,
    baseline_sigma2_u: float,
) -> list[ScanRow]:
    """Fit the candidate designs concurrently; rows come back in input order."""

    def one(design: DesignMatrix) -> FitResult | FitError:
        try:
            return fit(summaries, design, method=method)
        except FitError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=min(8, max(1, len(designs)))) as pool:
        outcomes = list(pool.map(one, designs))
    rows = []
    for term, outcome in zip(terms, outcomes):
        if isinstance(outcome, FitError):
            rows.append(
                ScanRow(
                    term=term,
                    sigma2_u=float("nan"),
                    sigma2_e=float("nan"),
                    vpc=float("nan"),
                    pcv_vs_baseline=float("nan"),
                    converged=False,
                    error=str(outcome),
                )
            )
            continue
        pcv_value = (
            pcv(baseline_sigma2_u, outcome.vc.sigma2_u)
            if baseline_sigma2_u > 0
            else float("nan")
        )
        rows.append(
            ScanRow(
                term=term,
                sigma2_u=outcome.vc.sigma2_u,
                sigma2_e=outcome.vc.sigma2_e,
                vpc=vpc(outcome.vc.sigma2_u, outcome.vc.sigma2_e),
                pcv_vs_baseline=pcv_value,
                converged=outcome.converged,
                fit=outcome,
            )
        )
    rows.sort(
        key=lambda r: (
            -(r.pcv_vs_baseline if r.error is None else float("-inf")),
            r.term,
        )
    )
    return rows


def interaction_scan(
    dataset: CohortDataset,
    method: str = "reml",
    suppression_threshold: int = 10,
    baseline: MaihdaModelResult | None = None,
) -> ScanResult:
    """Add each factor pair's interaction to the adjusted model, one at a time.

    Each candidate is the additive main-effects design plus the dummy
    products for one unordered pair; its PCV against the plain adjusted
    model measures how much residual stratum variance that pairing
    explains.  Rows are sorted by PCV, largest first.  A pair whose model
    cannot be fitted (rank deficiency from empty cells, say) is kept with
    its error message and sorts last.
    """
    if baseline is None:
        baseline = fit_model2(dataset, method, suppression_threshold)
    if baseline.model_tag != "model2":
        raise ValueError("interaction scan needs the adjusted model as baseline")
    index, summaries = baseline.index, baseline.summaries
    base_design = main_effects_design(index)
    names = [f.name for f in index.factors]
    terms, designs = [], []
    for i in range(len(names)):
        for k in range(i + 1, len(names)):
            terms.append(f"{names[i]}*{names[k]}")
            try:
                designs.append(with_interaction(base_design, names[i], names[k]))
            except DataError as exc:  # pragma: no cover - defensive
                raise FitError(str(exc)) from exc
    rows = _run_scan(terms, designs, summaries, method, baseline.fit.vc.sigma2_u)
    return ScanResult(
        baseline_tag="model2",
        baseline_sigma2_u=baseline.fit.vc.sigma2_u,
        rows=rows,
    )


def single_covariate_scan(
    dataset: CohortDataset,
    method: str = "reml",
    suppression_threshold: int = 10,
    baseline: MaihdaModelResult | None = None,
) -> ScanResult:
    """Add each factor's main effects alone to the unadjusted model.

    PCV against the unadjusted model measures how much of the total
    between-stratum variance each factor accounts for by itself.
    """
    if baseline is None:
        baseline = fit_model1(dataset, method, suppression_threshold)
    if baseline.model_tag != "model1":
        raise ValueError("single-covariate scan needs the unadjusted baseline")
    index, summaries = baseline.index, baseline.summaries
    terms = [f.name for f in index.factors]
    designs = [
        main_effects_for_codes(index.combos[:, [pos]], [factor])
        for pos, factor in enumerate(index.factors)
    ]
    rows = _run_scan(terms, designs, summaries, method, baseline.fit.vc.sigma2_u)
    return ScanResult(
        baseline_tag="model1",
        baseline_sigma2_u=baseline.fit.vc.sigma2_u,
        rows=rows,
    )


@dataclass
class CohortComparison:
    """Stratum-matched comparison of two fitted cohorts."""

    quantity: str
    labels: list[tuple[str, ...]]
    values_a: np.ndarray
    values_b: np.ndarray
    pearson_r: float
    spearman_rho: float
    n_matched: int

    @property
    def differences(self) -> np.ndarray:
        return self.values_b - self.values_a

    def extremes(self, k: int = 5):
        """Strata moving furthest down and up from cohort A to cohort B."""
        delta = self.differences
        order = np.argsort(delta, kind="stable")
        down = [(self.labels[i], float(delta[i])) for i in order[:k]]
        up = [(self.labels[i], float(delta[i])) for i in order[::-1][:k]]
        return down, up


def compare_value_maps(
    a: dict[tuple[str, ...], float],
    b: dict[tuple[str, ...], float],
    quantity: str,
) -> CohortComparison:
    """Correlate two label-keyed value maps over their common strata."""
    common = sorted(set(a) & set(b))
    if len(common) < 3:
        raise DataError(
            f"only {len(common)} strata match between cohorts; need at least 3"
        )
    va = np.array([a[key] for key in common], dtype=float)
    vb = np.array([b[key] for key in common], dtype=float)
    if np.ptp(va) == 0 or np.ptp(vb) == 0:
        raise DataError("constant values in one cohort; correlations undefined")
    pearson = float(np.corrcoef(va, vb)[0, 1])
    ra = rankdata(va, method="average")
    rb = rankdata(vb, method="average")
    spearman = float(np.corrcoef(ra, rb)[0, 1])
    return CohortComparison(
        quantity=quantity,
        labels=list(common),
        values_a=va,
        values_b=vb,
        pearson_r=pearson,
        spearman_rho=spearman,
        n_matched=len(common),
    )


def compare_cohorts(
    result_a: MaihdaModelResult,
    result_b: MaihdaModelResult,
    quantity: str = "u_hat",
) -> CohortComparison:
    """Match strata across cohorts by factor labels and correlate their positions.

    ``quantity`` is ``'u_hat'`` (shrunken effects) or ``'rank'`` (positions
    in the by-effect ranking).  Only strata present and unsuppressed in both
    cohorts enter; fewer than 3 matches is an error.
    """
    if quantity not in ("u_hat", "rank"):
        raise ValueError(f"quantity must be 'u_hat' or 'rank', got {quantity!r}")

    def extract(result: MaihdaModelResult) -> dict[tuple[str, ...], float]:
        if quantity == "u_hat":
            return {
                result.index.labels(s.stratum_id): e.u_hat
                for e, s in result.unsuppressed()
            }
        rows = stratum_table(result, order="by_effect")
        return {r.labels: float(r.rank) for r in rows if r.rank is not None}

    return compare_value_maps(extract(result_a), extract(result_b), quantity)
