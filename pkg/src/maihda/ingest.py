"""Cohort ingestion: factor definitions, CSV loading, and stratum construction.

Factors are ordered categorical variables; the cross-product of their
categories defines intersectional strata.  Rows are stored as integer
category codes so downstream summaries stay vectorized.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid input data or factor configuration."""


@dataclass(frozen=True)
class FactorSpec:
    """A named categorical factor with ordered categories and a reference.

    The category order fixes both the stratum enumeration and the dummy
    coding; the first category is the reference unless one is named.
    """

    name: str
    categories: tuple[str, ...]
    reference: str | None = None

    def __post_init__(self):
        cats = tuple(self.categories)
        object.__setattr__(self, "categories", cats)
        if not self.name:
            raise DataError("factor name must be non-empty")
        if len(cats) < 2:
            raise DataError(f"factor {self.name!r} needs at least 2 categories")
        if any(not c for c in cats) or len(set(cats)) != len(cats):
            raise DataError(f"factor {self.name!r} has empty or duplicate categories")
        ref = cats[0] if self.reference is None else self.reference
        if ref not in cats:
            raise DataError(
                f"reference {ref!r} is not a category of factor {self.name!r}"
            )
        object.__setattr__(self, "reference", ref)

    def code(self, label: str) -> int:
        """Index of ``label`` in the category order."""
        try:
            return self.categories.index(label)
        except ValueError:
            raise DataError(
                f"unknown category {label!r} for factor {self.name!r}; "
                f"expected one of {list(self.categories)}"
            ) from None


def parse_factor_config(path: str | Path) -> list[FactorSpec]:
    """Parse a plain-text factor configuration file.

    One factor per line, in stratum order::

        # column = ordered category list [; ref=<category>]
        term      = Autumn, Spring, Summer
        ethnicity = White, Black, Asian, Mixed, Other, Unclassified ; ref=White

    The key is the CSV column name; ``ref=`` overrides the default
    (first-category) reference.  ``#`` starts a comment.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"factor config file not found: {path}")
    factors: list[FactorSpec] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'column = categories'")
        name, rest = (part.strip() for part in line.split("=", 1))
        reference = None
        if ";" in rest:
            rest, opt = (part.strip() for part in rest.split(";", 1))
            if not opt.startswith("ref"):
                raise DataError(f"{path}:{lineno}: unknown option {opt!r}")
            reference = opt.split("=", 1)[1].strip()
        categories = tuple(c.strip() for c in rest.split(",") if c.strip())
        if name in seen:
            raise DataError(f"{path}:{lineno}: duplicate factor {name!r}")
        seen.add(name)
        try:
            factors.append(FactorSpec(name, categories, reference))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    if not factors:
        raise DataError(f"{path}: no factors defined")
    return factors


@dataclass
class CohortDataset:
    """Validated per-unit rows: factor category codes plus a continuous outcome.

    ``codes[i, f]`` is the category index of row ``i`` on factor ``f``
    (ordered as ``factors``); labels are recovered through the specs.
    """

    cohort_label: str
    factors: tuple[FactorSpec, ...]
    codes: np.ndarray
    outcome: np.ndarray
    unit_ids: list[str] | None = None
    n_rejected: int = 0

    def __post_init__(self):
        self.factors = tuple(self.factors)
        self.codes = np.asarray(self.codes, dtype=np.int64)
        self.outcome = np.asarray(self.outcome, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[1] != len(self.factors):
            raise DataError("codes must be (n_rows, n_factors)")
        if self.outcome.shape != (self.codes.shape[0],):
            raise DataError("outcome length must match number of rows")
        if self.outcome.size and not np.all(np.isfinite(self.outcome)):
            raise DataError("outcome contains non-finite values")
        for f, spec in enumerate(self.factors):
            col = self.codes[:, f]
            if col.size and (col.min() < 0 or col.max() >= len(spec.categories)):
                raise DataError(f"category code out of range for factor {spec.name!r}")

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]

    @property
    def factor_names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.factors)

    def row_labels(self, i: int) -> tuple[str, ...]:
        """Category labels of row ``i``, in factor order."""
        return tuple(
            spec.categories[self.codes[i, f]] for f, spec in enumerate(self.factors)
        )

    def with_outcome(self, outcome: np.ndarray) -> "CohortDataset":
        """Copy of the dataset with a replaced (e.g. standardized) outcome."""
        return CohortDataset(
            cohort_label=self.cohort_label,
            factors=self.factors,
            codes=self.codes,
            outcome=np.asarray(outcome, dtype=np.float64),
            unit_ids=self.unit_ids,
            n_rejected=self.n_rejected,
        )


def load_dataset(
    path: str | Path,
    factors: list[FactorSpec] | tuple[FactorSpec, ...],
    outcome_column: str,
    id_column: str | None = None,
    cohort_label: str = "",
) -> CohortDataset:
    """Load and validate a cohort CSV (UTF-8, header row, comma-separated).

    One column per factor (named after the factor) plus the outcome column.
    Rows with missing fields (empty outcome or empty factor cell) are
    rejected and counted in ``n_rejected``; an unknown category label or a
    non-numeric outcome is an error naming the row, column, and value.
    """
    path = Path(path)
    factors = tuple(factors)
    if not path.exists():
        raise DataError(f"data file not found: {path}")
    codes: list[list[int]] = []
    outcome: list[float] = []
    unit_ids: list[str] = []
    n_rejected = 0
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        required = [outcome_column] + [spec.name for spec in factors]
        if id_column is not None:
            required.append(id_column)
        missing = [col for col in required if col not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        for row in reader:
            raw_outcome = (row.get(outcome_column) or "").strip()
            raw_factors = [(row.get(spec.name) or "").strip() for spec in factors]
            if not raw_outcome or any(not v for v in raw_factors):
                n_rejected += 1
                continue
            try:
                y = float(raw_outcome)
            except ValueError:
                raise DataError(
                    f"{path}: line {reader.line_num}: non-numeric outcome "
                    f"{raw_outcome!r} in column {outcome_column!r}"
                ) from None
            if not np.isfinite(y):
                raise DataError(
                    f"{path}: line {reader.line_num}: non-finite outcome {raw_outcome!r}"
                )
            row_codes = []
            for spec, label in zip(factors, raw_factors):
                try:
                    row_codes.append(spec.code(label))
                except DataError as exc:
                    raise DataError(f"{path}: line {reader.line_num}: {exc}") from None
            codes.append(row_codes)
            outcome.append(y)
            unit_ids.append(
                (row.get(id_column) or "").strip() if id_column else str(len(outcome))
            )
    if not outcome:
        raise DataError(f"{path}: no valid rows ({n_rejected} rejected)")
    return CohortDataset(
        cohort_label=cohort_label,
        factors=factors,
        codes=np.asarray(codes, dtype=np.int64),
        outcome=np.asarray(outcome, dtype=np.float64),
        unit_ids=unit_ids,
        n_rejected=n_rejected,
    )


@dataclass
class StratumIndex:
    """Observed factor combinations mapped to stratum ids 1..J.

    Combinations are enumerated in lexicographic order of category indices;
    only observed combinations receive an id.
    """

    factors: tuple[FactorSpec, ...]
    combos: np.ndarray
    row_stratum: np.ndarray

    @property
    def n_strata(self) -> int:
        return self.combos.shape[0]

    def labels(self, stratum_id: int) -> tuple[str, ...]:
        """Category labels of stratum ``stratum_id`` (1-based), in factor order."""
        combo = self.combos[stratum_id - 1]
        return tuple(
            spec.categories[combo[f]] for f, spec in enumerate(self.factors)
        )

    @cached_property
    def strata(self) -> dict[tuple[str, ...], int]:
        """Map from label combination to stratum id."""
        return {self.labels(j): j for j in range(1, self.n_strata + 1)}


def build_strata(
    dataset: CohortDataset,
    factors: list[FactorSpec] | tuple[FactorSpec, ...] | None = None,
) -> StratumIndex:
    """Assign every row to its intersectional stratum.

    Stratum ids are a pure function of the factor combination: re-running
    on permuted rows yields identical ids.
    """
    factors = dataset.factors if factors is None else tuple(factors)
    if factors != dataset.factors:
        raise DataError("factors do not match the dataset's validated factors")
    combos, inverse = np.unique(dataset.codes, axis=0, return_inverse=True)
    return StratumIndex(
        factors=factors,
        combos=combos,
        row_stratum=inverse.reshape(-1) + 1,
    )


@dataclass(frozen=True)
class StratumSummary:
    """Per-stratum size and outcome sufficient statistics."""

    stratum_id: int
    n: int
    sum_y: float
    sum_y2: float
    mean_y: float
    suppressed: bool


def summarize_strata(
    dataset: CohortDataset,
    index: StratumIndex,
    suppression_threshold: int = 10,
) -> list[StratumSummary]:
    """Sufficient statistics per stratum, ordered by stratum id.

    ``suppressed`` marks strata with fewer than ``suppression_threshold``
    units; the flag affects reporting only, never fitting.
    """
    if index.row_stratum.shape[0] != dataset.n_rows:
        raise DataError("stratum index was not built from this dataset")
    J = index.n_strata
    n = np.bincount(index.row_stratum, minlength=J + 1)[1:]
    sum_y = np.bincount(index.row_stratum, weights=dataset.outcome, minlength=J + 1)[1:]
    sum_y2 = np.bincount(
        index.row_stratum, weights=dataset.outcome**2, minlength=J + 1
    )[1:]
    return [
        StratumSummary(
            stratum_id=j + 1,
            n=int(n[j]),
            sum_y=float(sum_y[j]),
            sum_y2=float(sum_y2[j]),
            mean_y=float(sum_y[j] / n[j]),
            suppressed=bool(n[j] < suppression_threshold),
        )
        for j in range(J)
    ]
