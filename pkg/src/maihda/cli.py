"""Command-line driver: fit, scan, simulate, compare, ols.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
failure.  All outputs land in ``--out`` under fixed names; reports embed
input digests rather than paths, so a report can be regenerated
byte-identically by re-running with the recorded flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .analysis import (
    fit_model1,
    fit_model2,
    interaction_scan,
    single_covariate_scan,
)
from .ingest import DataError, load_dataset, parse_factor_config
from .lmm import FitError, ols_fit
from .report import (
    caterpillar_rows,
    comparison_from_reports,
    comparison_report,
    file_digest,
    fit_report,
    metadata_block,
    ols_report,
    render_caterpillar_svg,
    render_scatter_svg,
    scan_csv_rows,
    scan_report,
    scatter_rows,
    sig6,
    strata_csv_rows,
    write_csv,
    write_json,
)
from .sim import (
    InteractionShift,
    SimConfig,
    generate,
    write_dataset_csv,
    write_truth_json,
)
from .transform import (
    intercept_design,
    main_effects_design,
    normal_scores,
    standardize,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="cohort CSV file")
    p.add_argument("--config", required=True, help="factor definition file")
    p.add_argument("--outcome", required=True, help="outcome column name")
    p.add_argument(
        "--normalize",
        choices=["none", "blom"],
        default="none",
        help="rank-based inverse-normal transform before standardizing",
    )


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=["reml", "ml"], default="reml")
    p.add_argument(
        "--suppress",
        type=int,
        default=10,
        metavar="N",
        help="hide strata with fewer than N units from tables and plots",
    )


def _add_out_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=".", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="recorded in metadata")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maihda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"maihda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_fit = sub.add_parser("fit", help="fit both models")
    _add_input_flags(p_fit)
    _add_fit_flags(p_fit)
    p_fit.add_argument(
        "--benchmark",
        type=float,
        action="append",
        default=[],
        metavar="V",
        help="benchmark threshold in outcome-SD units (repeatable)",
    )
    p_fit.add_argument("--plot", choices=["caterpillar"], default=None)
    p_fit.add_argument("--svg", action="store_true", help="also render plots as SVG")
    _add_out_flag(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_scan = sub.add_parser(
        "scan", help="variance-explained scans"
    )
    _add_input_flags(p_scan)
    _add_fit_flags(p_scan)
    mode = p_scan.add_mutually_exclusive_group(required=True)
    mode.add_argument(
        "--pairs", action="store_true", help="two-way interaction scan (vs model 2)"
    )
    mode.add_argument(
        "--single", action="store_true", help="one-factor-at-a-time scan (vs model 1)"
    )
    _add_out_flag(p_scan)
    p_scan.set_defaults(func=cmd_scan)

    p_sim = sub.add_parser(
        "simulate", help="generate a synthetic cohort"
    )
    p_sim.add_argument("--config", required=True, help="factor definition file")
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--sigma2-u", type=float, required=True)
    p_sim.add_argument("--sigma2-e", type=float, required=True)
    p_sim.add_argument(
        "--beta",
        action="append",
        default=[],
        metavar="NAME=VALUE",
        help="coefficient on a main-effects column (repeatable)",
    )
    sizes = p_sim.add_mutually_exclusive_group(required=True)
    sizes.add_argument(
        "--size-range",
        metavar="MIN,MAX",
        help="log-uniform stratum sizes in [MIN, MAX]",
    )
    sizes.add_argument(
        "--sizes", metavar="N1,N2,...", help="explicit per-stratum sizes"
    )
    p_sim.add_argument(
        "--shift",
        action="append",
        default=[],
        metavar="FACTOR=CAT,FACTOR=CAT,DELTA",
        help="add DELTA to strata matching both categories (repeatable)",
    )
    p_sim.add_argument("--label", default="simulated", help="cohort label")
    p_sim.add_argument("--out", default=".", metavar="DIR")
    p_sim.set_defaults(func=cmd_simulate)

    p_cmp = sub.add_parser(
        "compare", help="correlate two fit reports"
    )
    p_cmp.add_argument("report_a", help="fit report JSON")
    p_cmp.add_argument("report_b", help="fit report JSON")
    p_cmp.add_argument("--model", choices=["model1", "model2"], default="model1")
    p_cmp.add_argument("--quantity", choices=["u_hat", "rank"], default="u_hat")
    p_cmp.add_argument("--plot", choices=["scatter"], default=None)
    p_cmp.add_argument("--svg", action="store_true")
    p_cmp.add_argument("--out", default=".", metavar="DIR")
    p_cmp.set_defaults(func=cmd_compare)

    p_ols = sub.add_parser(
        "ols", help="single-level comparison models"
    )
    _add_input_flags(p_ols)
    _add_out_flag(p_ols)
    p_ols.set_defaults(func=cmd_ols)

    return parser


def _load_pipeline(args):
    factors = parse_factor_config(args.config)
    dataset = load_dataset(
        args.data,
        factors,
        outcome_column=args.outcome,
        cohort_label=Path(args.data).stem,
    )
    y = dataset.outcome
    if args.normalize == "blom":
        y = normal_scores(y)
    return dataset.with_outcome(standardize(y))


def _metadata(args, seed=None) -> dict:
    return metadata_block(
        data_digest=file_digest(args.data),
        config_digest=file_digest(args.config),
        outcome=args.outcome,
        normalize=args.normalize,
        method=getattr(args, "method", "reml"),
        suppress=getattr(args, "suppress", 10),
        seed=seed if seed is not None else getattr(args, "seed", None),
    )


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args) -> int:
    dataset = _load_pipeline(args)
    out = _outdir(args)
    model1 = fit_model1(dataset, method=args.method, suppression_threshold=args.suppress)
    model2 = fit_model2(
        dataset,
        method=args.method,
        suppression_threshold=args.suppress,
        baseline=model1,
    )
    doc = fit_report(
        model1,
        model2,
        metadata=_metadata(args),
        benchmarks=args.benchmark,
        n_rejected=dataset.n_rejected,
        cohort_label=dataset.cohort_label,
    )
    write_json(doc, out / "report.json")
    written = [out / "report.json"]
    for model in (model1, model2):
        rows, columns = strata_csv_rows(model)
        path = out / f"{model.model_tag}_strata.csv"
        write_csv(rows, columns, path)
        written.append(path)
    if args.plot == "caterpillar":
        for model in (model1, model2):
            rows = caterpillar_rows(model)
            path = out / f"{model.model_tag}_caterpillar.csv"
            write_csv(
                rows,
                ["stratum_id", "rank", "estimate", "ci_low", "ci_high"],
                path,
            )
            written.append(path)
            if args.svg:
                svg = out / f"{model.model_tag}_caterpillar.svg"
                render_caterpillar_svg(
                    rows,
                    svg,
                    title=f"{model.model_tag} stratum effects",
                    benchmarks=args.benchmark if model.model_tag == "model1" else None,
                )
                written.append(svg)
    for model in (model1, model2):
        vc = model.fit.vc
        line = (
            f"{model.model_tag}: sigma2_u={sig6(vc.sigma2_u)} "
            f"sigma2_e={sig6(vc.sigma2_e)} vpc={sig6(model.vpc)}"
        )
        if model.pcv_vs_baseline is not None:
            tag, value = model.pcv_vs_baseline
            line += f" pcv_vs_{tag}={sig6(value)}"
        if not model.fit.converged:
            line += " [not converged]"
        print(line)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_scan(args) -> int:
    dataset = _load_pipeline(args)
    out = _outdir(args)
    if args.pairs:
        scan = interaction_scan(
            dataset, method=args.method, suppression_threshold=args.suppress
        )
    else:
        scan = single_covariate_scan(
            dataset, method=args.method, suppression_threshold=args.suppress
        )
    doc = scan_report(scan, metadata=_metadata(args))
    write_json(doc, out / "scan.json")
    rows, columns = scan_csv_rows(scan)
    write_csv(rows, columns, out / "scan.csv")
    best = scan.rows[0]
    line = f"{len(scan.rows)} terms scanned vs {scan.baseline_tag}"
    if best.error is None:
        line += f"; best: {best.term} (pcv={sig6(best.pcv_vs_baseline)})"
    print(line)
    print(f"wrote {out / 'scan.json'}")
    print(f"wrote {out / 'scan.csv'}")
    return 0


def _parse_sizes(args):
    if args.size_range:
        parts = args.size_range.split(",")
        if len(parts) != 2:
            raise DataError(f"--size-range must be MIN,MAX, got {args.size_range!r}")
        try:
            low, high = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"--size-range must be integers, got {args.size_range!r}")
        return None, (low, high)
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise DataError(f"--sizes must be comma-separated integers, got {args.sizes!r}")
    return sizes, None


def _parse_beta(entries: list[str]) -> dict[str, float]:
    beta = {}
    for entry in entries:
        # dummy columns are themselves name=category, so split on the last '='
        name, _, value = entry.rpartition("=")
        if not name:
            raise DataError(f"--beta needs NAME=VALUE, got {entry!r}")
        try:
            beta[name] = float(value)
        except ValueError:
            raise DataError(f"--beta value must be numeric, got {entry!r}")
    return beta


def _parse_shifts(entries: list[str]) -> list[InteractionShift]:
    shifts = []
    for entry in entries:
        parts = entry.split(",")
        if len(parts) != 3:
            raise DataError(
                f"--shift needs FACTOR=CAT,FACTOR=CAT,DELTA, got {entry!r}"
            )
        pairs = []
        for part in parts[:2]:
            factor, sep, cat = part.partition("=")
            if not sep or not factor or not cat:
                raise DataError(f"--shift needs FACTOR=CAT pairs, got {entry!r}")
            pairs.append((factor, cat))
        try:
            delta = float(parts[2])
        except ValueError:
            raise DataError(f"--shift DELTA must be numeric, got {entry!r}")
        shifts.append(
            InteractionShift(
                factor_a=pairs[0][0],
                category_a=pairs[0][1],
                factor_b=pairs[1][0],
                category_b=pairs[1][1],
                shift=delta,
            )
        )
    return shifts


def cmd_simulate(args) -> int:
    factors = parse_factor_config(args.config)
    n_strata = 1
    for f in factors:
        n_strata *= len(f.categories)
    sizes, size_range = _parse_sizes(args)
    config = SimConfig(
        factors=factors,
        seed=args.seed,
        sigma2_u=args.sigma2_u,
        sigma2_e=args.sigma2_e,
        beta=_parse_beta(args.beta),
        stratum_sizes=sizes,
        size_range=size_range,
        shifts=_parse_shifts(args.shift),
        cohort_label=args.label,
    )
    dataset, truth = generate(config)
    out = _outdir(args)
    write_dataset_csv(dataset, out / "data.csv", outcome_column="y")
    write_truth_json(truth, out / "truth.json")
    print(
        f"generated {dataset.n_rows} units in {n_strata} strata "
        f"(seed {args.seed})"
    )
    print(f"wrote {out / 'data.csv'}")
    print(f"wrote {out / 'truth.json'}")
    return 0


def _read_report(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc


def cmd_compare(args) -> int:
    doc_a = _read_report(args.report_a)
    doc_b = _read_report(args.report_b)
    cmp = comparison_from_reports(
        doc_a, doc_b, model=args.model, quantity=args.quantity
    )
    metadata = {
        "tool": "maihda",
        "version": __version__,
        "report_a_sha256": file_digest(args.report_a),
        "report_b_sha256": file_digest(args.report_b),
        "model": args.model,
        "quantity": args.quantity,
    }
    out = _outdir(args)
    doc = comparison_report(cmp, metadata=metadata)
    write_json(doc, out / "compare.json")
    rows = scatter_rows(cmp)
    write_csv(
        rows, ["labels", "value_a", "value_b", "difference"], out / "compare.csv"
    )
    if args.plot == "scatter" and args.svg:
        render_scatter_svg(
            rows, out / "scatter.svg", title=f"{args.model} {args.quantity}"
        )
        print(f"wrote {out / 'scatter.svg'}")
    print(
        f"{cmp.n_matched} matched strata: pearson={sig6(cmp.pearson_r)} "
        f"spearman={sig6(cmp.spearman_rho)}"
    )
    print(f"wrote {out / 'compare.json'}")
    print(f"wrote {out / 'compare.csv'}")
    return 0


def cmd_ols(args) -> int:
    from .ingest import build_strata, summarize_strata

    dataset = _load_pipeline(args)
    out = _outdir(args)
    index = build_strata(dataset)
    summaries = summarize_strata(dataset, index)
    unadjusted = ols_fit(summaries, intercept_design(index.n_strata))
    adjusted = ols_fit(summaries, main_effects_design(index))
    doc = ols_report(unadjusted, adjusted, metadata=_metadata(args))
    write_json(doc, out / "ols.json")
    rows = [
        {"model": "unadjusted", "name": n, "estimate": float(e), "se": float(s)}
        for n, e, s in zip(
            unadjusted.names, unadjusted.estimates, unadjusted.standard_errors
        )
    ] + [
        {"model": "adjusted", "name": n, "estimate": float(e), "se": float(s)}
        for n, e, s in zip(
            adjusted.names, adjusted.estimates, adjusted.standard_errors
        )
    ]
    write_csv(rows, ["model", "name", "estimate", "se"], out / "ols.csv")
    print(
        f"unadjusted intercept={sig6(unadjusted.estimates[0])} "
        f"residual_variance={sig6(unadjusted.residual_variance)}"
    )
    print(f"wrote {out / 'ols.json'}")
    print(f"wrote {out / 'ols.csv'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
