"""Synthetic cohorts with known variance components and optional interaction shifts.

Strata are the full cross-classification of the configured factors, in the
same lexicographic order the strata builder assigns, so stratum ``j`` of a
generated dataset is combo ``j``.  Draw order is fixed for reproducibility:
stratum sizes first (when drawn from a range), then one stratum effect per
stratum, then unit residuals stratum by stratum, all from a single
``numpy.random.default_rng(seed)`` stream.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import CohortDataset, DataError, FactorSpec
from .transform import main_effects_for_codes


@dataclass(frozen=True)
class InteractionShift:
    """Additive shift, in outcome units, for strata matching a category pair."""

    factor_a: str
    category_a: str
    factor_b: str
    category_b: str
    shift: float


@dataclass
class SimConfig:
    """Everything needed to generate one cohort deterministically."""

    factors: list[FactorSpec]
    seed: int
    sigma2_u: float
    sigma2_e: float
    beta: dict[str, float]
    stratum_sizes: list[int] | None = None
    size_range: tuple[int, int] | None = None
    shifts: list[InteractionShift] = field(default_factory=list)
    cohort_label: str = "simulated"

    def __post_init__(self):
        if (self.stratum_sizes is None) == (self.size_range is None):
            raise DataError("give exactly one of stratum_sizes or size_range")
        # sigma2_e = 0 is allowed here (deterministic outcomes); fitting such
        # data is what fails, not generating it
        if self.sigma2_u < 0 or self.sigma2_e < 0:
            raise DataError("variances must be non-negative")
        if self.size_range is not None:
            low, high = self.size_range
            if not (1 <= low <= high):
                raise DataError(f"bad size range {self.size_range}")

    @property
    def n_strata(self) -> int:
        return int(np.prod([len(f.categories) for f in self.factors]))


def _all_combos(factors: list[FactorSpec]) -> np.ndarray:
    ranges = [range(len(f.categories)) for f in factors]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64)


def true_stratum_means(config: SimConfig) -> np.ndarray:
    """Fixed part of each stratum mean: main effects plus any injected shifts."""
    combos = _all_combos(config.factors)
    design = main_effects_for_codes(combos, config.factors)
    known = set(design.names)
    unknown = sorted(set(config.beta) - known)
    if unknown:
        raise DataError(f"beta names not in the main-effects design: {unknown}")
    beta = np.array([config.beta.get(name, 0.0) for name in design.names])
    mu = design.values @ beta
    by_name = {f.name: pos for pos, f in enumerate(config.factors)}
    for s in config.shifts:
        for fname in (s.factor_a, s.factor_b):
            if fname not in by_name:
                raise DataError(f"shift names unknown factor {fname!r}")
        ia, ib = by_name[s.factor_a], by_name[s.factor_b]
        ca = config.factors[ia].code(s.category_a)
        cb = config.factors[ib].code(s.category_b)
        mask = (combos[:, ia] == ca) & (combos[:, ib] == cb)
        mu[mask] += s.shift
    return mu


def _draw_sizes(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    if config.stratum_sizes is not None:
        sizes = np.asarray(config.stratum_sizes, dtype=np.int64)
        if sizes.shape != (config.n_strata,):
            raise DataError(
                f"stratum_sizes has length {sizes.shape[0]}, "
                f"expected {config.n_strata}"
            )
        if (sizes < 1).any():
            raise DataError("stratum sizes must be at least 1")
        return sizes
    low, high = config.size_range
    # log-uniform keeps small strata common while allowing very large ones
    draws = rng.uniform(math.log(low), math.log(high + 1), size=config.n_strata)
    return np.minimum(np.exp(draws).astype(np.int64), high).clip(min=low)


def generate(config: SimConfig) -> tuple[CohortDataset, dict]:
    """Generate a cohort; returns the dataset and a truth record.

    The truth record is JSON-ready: seed, variance components, coefficient
    names with values, injected shifts, per-stratum sizes, and the drawn
    stratum effects.
    """
    rng = np.random.default_rng(config.seed)
    sizes = _draw_sizes(config, rng)
    mu = true_stratum_means(config)
    J = config.n_strata
    u = rng.normal(0.0, math.sqrt(config.sigma2_u), size=J)
    n_total = int(sizes.sum())
    e = rng.normal(0.0, math.sqrt(config.sigma2_e), size=n_total)
    combos = _all_combos(config.factors)
    codes = np.repeat(combos, sizes, axis=0)
    outcome = np.repeat(mu + u, sizes) + e
    unit_ids = [f"u{i + 1}" for i in range(n_total)]
    dataset = CohortDataset(
        cohort_label=config.cohort_label,
        factors=list(config.factors),
        codes=codes,
        outcome=outcome,
        unit_ids=unit_ids,
    )
    truth = {
        "seed": config.seed,
        "cohort_label": config.cohort_label,
        "sigma2_u": config.sigma2_u,
        "sigma2_e": config.sigma2_e,
        "beta": dict(config.beta),
        "shifts": [
            {
                "factor_a": s.factor_a,
                "category_a": s.category_a,
                "factor_b": s.factor_b,
                "category_b": s.category_b,
                "shift": s.shift,
            }
            for s in config.shifts
        ],
        "stratum_sizes": sizes.tolist(),
        "true_u": u.tolist(),
    }
    return dataset, truth


def write_dataset_csv(
    dataset: CohortDataset,
    path: str | Path,
    outcome_column: str = "y",
    id_column: str = "unit_id",
) -> None:
    """Write a cohort as CSV readable by the loader, full float precision."""
    path = Path(path)
    names = dataset.factor_names
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([id_column, *names, outcome_column])
        for i in range(dataset.n_rows):
            unit = dataset.unit_ids[i] if dataset.unit_ids else str(i + 1)
            writer.writerow(
                [unit, *dataset.row_labels(i), repr(float(dataset.outcome[i]))]
            )


def write_factor_config(factors: list[FactorSpec], path: str | Path) -> None:
    """Write a factor definition file readable by the config parser."""
    lines = []
    for f in factors:
        line = f"{f.name} = {', '.join(f.categories)}"
        if f.reference != f.categories[0]:
            line += f" ; ref={f.reference}"
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n")


def write_truth_json(truth: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(truth, indent=2) + "\n")
