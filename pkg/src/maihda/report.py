"""Report documents: JSON for machines, CSV for tables and plot data, SVG on request.

Output is deterministic: no timestamps, no filesystem paths, input files
recorded as SHA-256 digests, so re-running with the recorded configuration
reproduces every byte.  Display numbers carry 6 significant digits; each
block repeats its numbers at full precision under a ``raw`` key.
Suppressed strata appear in no table or plot file, only in
``suppressed_count``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    CohortComparison,
    MaihdaModelResult,
    ScanResult,
    benchmark_share,
    compare_value_maps,
    stratum_table,
)
from .ingest import DataError
from .lmm import OlsResult


def sig6(x: float) -> float:
    """Round to 6 significant digits (display convention)."""
    return float(f"{float(x):.6g}")


def _num(x) -> float | None:
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else sig6(x)


def _raw(x) -> float | None:
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def metadata_block(
    data_digest: str,
    config_digest: str,
    outcome: str,
    normalize: str,
    method: str,
    suppress: int,
    seed: int | None = None,
) -> dict:
    return {
        "tool": "maihda",
        "version": __version__,
        "data_sha256": data_digest,
        "config_sha256": config_digest,
        "outcome": outcome,
        "normalize": normalize,
        "method": method,
        "suppress": suppress,
        "seed": seed,
    }


def _coefficients(result: MaihdaModelResult) -> list[dict]:
    fixed = result.fit.fixed
    ses = fixed.standard_errors
    return [
        {
            "name": name,
            "estimate": _num(est),
            "se": _num(se),
            "raw": {"estimate": _raw(est), "se": _raw(se)},
        }
        for name, est, se in zip(fixed.names, fixed.estimates, ses)
    ]


def _variance_block(result: MaihdaModelResult) -> dict:
    vc = result.fit.vc
    se_u, se_e = result.fit.vc_standard_errors
    return {
        "sigma2_u": _num(vc.sigma2_u),
        "sigma2_u_se": _num(se_u),
        "sigma2_e": _num(vc.sigma2_e),
        "sigma2_e_se": _num(se_e),
        "raw": {
            "sigma2_u": _raw(vc.sigma2_u),
            "sigma2_u_se": _raw(se_u),
            "sigma2_e": _raw(vc.sigma2_e),
            "sigma2_e_se": _raw(se_e),
        },
    }


def _strata_rows(
    result: MaihdaModelResult, order: str, meaningful_threshold: float
) -> list[dict]:
    factor_names = [f.name for f in result.index.factors]
    rows = []
    for r in stratum_table(result, order=order, meaningful_threshold=meaningful_threshold):
        if r.suppressed:
            continue
        rows.append(
            {
                "stratum_id": r.stratum_id,
                "labels": dict(zip(factor_names, r.labels)),
                "n": r.n,
                "rank": r.rank,
                "mean_y": _num(r.mean_y),
                "u_hat": _num(r.u_hat),
                "se": _num(r.se_u),
                "ci_low": _num(r.ci_low),
                "ci_high": _num(r.ci_high),
                "predicted_mean": _num(r.predicted_mean),
                "significant": r.significant,
                "meaningful": r.meaningful,
                "raw": {
                    "mean_y": _raw(r.mean_y),
                    "u_hat": _raw(r.u_hat),
                    "se": _raw(r.se_u),
                    "ci_low": _raw(r.ci_low),
                    "ci_high": _raw(r.ci_high),
                    "predicted_mean": _raw(r.predicted_mean),
                },
            }
        )
    return rows


def model_block(
    result: MaihdaModelResult, meaningful_threshold: float = 0.1
) -> dict:
    fit = result.fit
    order = "by_mean" if result.model_tag == "model1" else "by_effect"
    block = {
        "tag": result.model_tag,
        "method": fit.method,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "at_boundary": fit.at_boundary,
        "deviance": _num(fit.deviance),
        "deviance_raw": _raw(fit.deviance),
        "n_total": fit.n_total,
        "coefficients": _coefficients(result),
        "variance": _variance_block(result),
        "vpc": _num(result.vpc),
        "vpc_raw": _raw(result.vpc),
        "pcv": None,
        "strata": _strata_rows(result, order, meaningful_threshold),
    }
    if result.pcv_vs_baseline is not None:
        tag, value = result.pcv_vs_baseline
        block["pcv"] = {"baseline": tag, "value": _num(value), "raw": _raw(value)}
    return block


def fit_report(
    model1: MaihdaModelResult,
    model2: MaihdaModelResult,
    metadata: dict,
    benchmarks: list[float] | None = None,
    meaningful_threshold: float = 0.1,
    n_rejected: int = 0,
    cohort_label: str = "",
) -> dict:
    suppressed = sum(1 for s in model1.summaries if s.suppressed)
    doc = {
        "kind": "fit",
        "metadata": metadata,
        "cohort": {
            "label": cohort_label,
            "n_units": model1.fit.n_total,
            "n_rejected_rows": n_rejected,
            "n_strata": model1.index.n_strata,
            "suppressed_count": suppressed,
        },
        "model1": model_block(model1, meaningful_threshold),
        "model2": model_block(model2, meaningful_threshold),
    }
    if benchmarks:
        means = [e.predicted_mean for e, _ in model1.unsuppressed()]
        doc["benchmarks"] = [
            {
                "threshold": sig6(t),
                "model": "model1",
                "share_of_strata": _num(benchmark_share(means, t)),
                "raw": _raw(benchmark_share(means, t)),
            }
            for t in benchmarks
        ]
    return doc


def scan_report(scan: ScanResult, metadata: dict) -> dict:
    return {
        "kind": "scan",
        "metadata": metadata,
        "baseline": {
            "tag": scan.baseline_tag,
            "sigma2_u": _num(scan.baseline_sigma2_u),
            "sigma2_u_raw": _raw(scan.baseline_sigma2_u),
        },
        "rows": [
            {
                "term": r.term,
                "sigma2_u": _num(r.sigma2_u),
                "sigma2_e": _num(r.sigma2_e),
                "vpc": _num(r.vpc),
                "pcv_vs_baseline": _num(r.pcv_vs_baseline),
                "converged": r.converged,
                "error": r.error,
                "raw": {
                    "sigma2_u": _raw(r.sigma2_u),
                    "sigma2_e": _raw(r.sigma2_e),
                    "vpc": _raw(r.vpc),
                    "pcv_vs_baseline": _raw(r.pcv_vs_baseline),
                },
            }
            for r in scan.rows
        ],
    }


def comparison_report(cmp: CohortComparison, metadata: dict, k: int = 5) -> dict:
    down, up = cmp.extremes(k)

    def mover(entry):
        labels, delta = entry
        return {
            "labels": _label_text(labels),
            "difference": _num(delta),
            "raw": _raw(delta),
        }

    return {
        "kind": "compare",
        "metadata": metadata,
        "quantity": cmp.quantity,
        "n_matched": cmp.n_matched,
        "pearson": _num(cmp.pearson_r),
        "spearman": _num(cmp.spearman_rho),
        "raw": {"pearson": _raw(cmp.pearson_r), "spearman": _raw(cmp.spearman_rho)},
        "largest_decreases": [mover(e) for e in down],
        "largest_increases": [mover(e) for e in up],
    }


def ols_block(ols: OlsResult) -> dict:
    ses = ols.standard_errors
    return {
        "n_total": ols.n_total,
        "df_residual": ols.df_residual,
        "coefficients": [
            {
                "name": name,
                "estimate": _num(est),
                "se": _num(se),
                "raw": {"estimate": _raw(est), "se": _raw(se)},
            }
            for name, est, se in zip(ols.names, ols.estimates, ses)
        ],
        "residual_variance": _num(ols.residual_variance),
        "residual_variance_se": _num(ols.residual_variance_se),
        "raw": {
            "residual_variance": _raw(ols.residual_variance),
            "residual_variance_se": _raw(ols.residual_variance_se),
        },
    }


def ols_report(unadjusted: OlsResult, adjusted: OlsResult, metadata: dict) -> dict:
    return {
        "kind": "ols",
        "metadata": metadata,
        "unadjusted": ols_block(unadjusted),
        "adjusted": ols_block(adjusted),
    }


def comparison_from_reports(
    doc_a: dict, doc_b: dict, model: str = "model1", quantity: str = "u_hat"
) -> CohortComparison:
    """Rebuild a cohort comparison from two fit report documents."""
    if quantity not in ("u_hat", "rank"):
        raise DataError(f"quantity must be 'u_hat' or 'rank', got {quantity!r}")

    def extract(doc: dict) -> dict[tuple, float]:
        if doc.get("kind") != "fit" or model not in doc:
            raise DataError(f"report lacks a {model!r} block; need a fit report")
        out = {}
        for row in doc[model]["strata"]:
            key = tuple(sorted(row["labels"].items()))
            value = row["raw"]["u_hat"] if quantity == "u_hat" else row["rank"]
            out[key] = float(value)
        return out

    return compare_value_maps(extract(doc_a), extract(doc_b), quantity)


def caterpillar_rows(result: MaihdaModelResult) -> list[dict]:
    """Plot data for ranked stratum effects with 95% whiskers.

    The unadjusted model plots predicted stratum means ranked by mean; the
    adjusted model plots the stratum effects ranked by effect.  One row per
    unsuppressed stratum.
    """
    by_mean = result.model_tag == "model1"
    order = "by_mean" if by_mean else "by_effect"
    rows = []
    for r in stratum_table(result, order=order):
        if r.suppressed:
            continue
        if by_mean:
            shift = r.predicted_mean - r.u_hat
            est, lo, hi = r.predicted_mean, shift + r.ci_low, shift + r.ci_high
        else:
            est, lo, hi = r.u_hat, r.ci_low, r.ci_high
        rows.append(
            {
                "stratum_id": r.stratum_id,
                "rank": r.rank,
                "estimate": est,
                "ci_low": lo,
                "ci_high": hi,
            }
        )
    rows.sort(key=lambda row: (row["rank"], row["stratum_id"]))
    return rows


def _label_text(key) -> str:
    # keys are tuples of category labels, or of (factor, category) pairs
    parts = [part if isinstance(part, str) else "=".join(part) for part in key]
    return "|".join(parts)


def scatter_rows(cmp: CohortComparison) -> list[dict]:
    return [
        {
            "labels": _label_text(key),
            "value_a": float(a),
            "value_b": float(b),
            "difference": float(b - a),
        }
        for key, a, b in zip(cmp.labels, cmp.values_a, cmp.values_b)
    ]


def write_json(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def write_csv(rows: list[dict], columns: list[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(col)) for col in columns])


def strata_csv_rows(result: MaihdaModelResult) -> tuple[list[dict], list[str]]:
    factor_names = [f.name for f in result.index.factors]
    order = "by_mean" if result.model_tag == "model1" else "by_effect"
    rows = []
    for r in stratum_table(result, order=order):
        if r.suppressed:
            continue
        row = {"stratum_id": r.stratum_id}
        row.update(dict(zip(factor_names, r.labels)))
        row.update(
            {
                "n": r.n,
                "rank": r.rank,
                "mean_y": r.mean_y,
                "u_hat": r.u_hat,
                "se": r.se_u,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "predicted_mean": r.predicted_mean,
                "significant": r.significant,
                "meaningful": r.meaningful,
            }
        )
        rows.append(row)
    columns = [
        "stratum_id",
        *factor_names,
        "n",
        "rank",
        "mean_y",
        "u_hat",
        "se",
        "ci_low",
        "ci_high",
        "predicted_mean",
        "significant",
        "meaningful",
    ]
    return rows, columns


def scan_csv_rows(scan: ScanResult) -> tuple[list[dict], list[str]]:
    rows = [
        {
            "term": r.term,
            "sigma2_u": r.sigma2_u,
            "sigma2_e": r.sigma2_e,
            "vpc": r.vpc,
            "pcv_vs_baseline": r.pcv_vs_baseline,
            "converged": r.converged,
            "error": r.error,
        }
        for r in scan.rows
    ]
    return rows, ["term", "sigma2_u", "sigma2_e", "vpc", "pcv_vs_baseline", "converged", "error"]


_SVG_HEADER = (
    '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
    'viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">'
)


def _scale(lo: float, hi: float, a: float, b: float):
    span = hi - lo or 1.0

    def to(v: float) -> float:
        return a + (v - lo) * (b - a) / span

    return to


def render_caterpillar_svg(
    rows: list[dict],
    path: str | Path,
    title: str = "",
    benchmarks: list[float] | None = None,
) -> None:
    """Ranked point estimates with vertical 95% whiskers, axes, zero line."""
    if not rows:
        raise DataError("no unsuppressed strata to plot")
    w, h, ml, mr, mt, mb = 900, 480, 60, 20, 30, 40
    xs = [float(r["rank"]) for r in rows]
    los = [r["ci_low"] for r in rows]
    his = [r["ci_high"] for r in rows]
    y_lo = min(min(los), 0.0)
    y_hi = max(max(his), 0.0)
    pad = 0.05 * (y_hi - y_lo or 1.0)
    sx = _scale(min(xs), max(xs), ml, w - mr)
    sy = _scale(y_lo - pad, y_hi + pad, h - mb, mt)
    parts = [_SVG_HEADER.format(w=w, h=h)]
    if title:
        parts.append(f'<text x="{ml}" y="18">{title}</text>')
    parts.append(
        f'<line x1="{ml}" y1="{sy(0):.2f}" x2="{w - mr}" y2="{sy(0):.2f}" '
        'stroke="#999" stroke-dasharray="4 3"/>'
    )
    for t in benchmarks or []:
        parts.append(
            f'<line x1="{ml}" y1="{sy(t):.2f}" x2="{w - mr}" y2="{sy(t):.2f}" '
            'stroke="#c33" stroke-dasharray="6 4"/>'
        )
    for r in rows:
        x = sx(float(r["rank"]))
        parts.append(
            f'<line x1="{x:.2f}" y1="{sy(r["ci_low"]):.2f}" '
            f'x2="{x:.2f}" y2="{sy(r["ci_high"]):.2f}" stroke="#369"/>'
        )
        parts.append(
            f'<circle cx="{x:.2f}" cy="{sy(r["estimate"]):.2f}" r="2" fill="#036"/>'
        )
    parts.append(
        f'<line x1="{ml}" y1="{h - mb}" x2="{w - mr}" y2="{h - mb}" stroke="#000"/>'
    )
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{h - mb}" stroke="#000"/>')
    for v in (y_lo, 0.0, y_hi):
        parts.append(
            f'<text x="{ml - 8}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>'
        )
    parts.append(
        f'<text x="{(ml + w - mr) / 2:.0f}" y="{h - 10}" text-anchor="middle">rank</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def render_scatter_svg(
    rows: list[dict], path: str | Path, title: str = ""
) -> None:
    """Cohort A vs cohort B values with the identity line."""
    if not rows:
        raise DataError("no matched strata to plot")
    w, h, m = 520, 520, 55
    va = [r["value_a"] for r in rows]
    vb = [r["value_b"] for r in rows]
    lo = min(min(va), min(vb))
    hi = max(max(va), max(vb))
    pad = 0.05 * (hi - lo or 1.0)
    sx = _scale(lo - pad, hi + pad, m, w - 20)
    sy = _scale(lo - pad, hi + pad, h - m, 20)
    parts = [_SVG_HEADER.format(w=w, h=h)]
    if title:
        parts.append(f'<text x="{m}" y="16">{title}</text>')
    parts.append(
        f'<line x1="{sx(lo):.2f}" y1="{sy(lo):.2f}" x2="{sx(hi):.2f}" '
        f'y2="{sy(hi):.2f}" stroke="#999" stroke-dasharray="4 3"/>'
    )
    for r in rows:
        parts.append(
            f'<circle cx="{sx(r["value_a"]):.2f}" cy="{sy(r["value_b"]):.2f}" '
            'r="2.5" fill="#369" fill-opacity="0.7"/>'
        )
    parts.append(f'<line x1="{m}" y1="{h - m}" x2="{w - 20}" y2="{h - m}" stroke="#000"/>')
    parts.append(f'<line x1="{m}" y1="20" x2="{m}" y2="{h - m}" stroke="#000"/>')
    for v in (lo, hi):
        parts.append(
            f'<text x="{sx(v):.2f}" y="{h - m + 16}" text-anchor="middle">{v:.2f}</text>'
        )
        parts.append(
            f'<text x="{m - 8}" y="{sy(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
