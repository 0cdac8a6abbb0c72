"""Outcome transforms and stratum-level design matrices."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .ingest import DataError, FactorSpec, StratumIndex


def standardize(values) -> np.ndarray:
    """Z-standardize to sample mean 0 and sample SD 1 (n-1 denominator)."""
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise DataError("standardize needs at least 2 values")
    sd = float(np.std(y, ddof=1))
    if sd == 0.0:
        raise DataError("cannot standardize a constant outcome (zero variance)")
    return (y - y.mean()) / sd


def normal_scores(values) -> np.ndarray:
    """Rank-based inverse-normal (Blom) scores.

    Maps value ``i`` to ``Phi^{-1}((r_i - 3/8) / (n + 1/4))`` where ``r_i``
    is the tie-averaged rank; monotone in the input.
    """
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1 or y.size < 2:
        raise DataError("normal_scores needs at least 2 values")
    ranks = rankdata(y, method="average")
    return norm.ppf((ranks - 0.375) / (y.size + 0.25))


@dataclass
class DesignMatrix:
    """Stratum-level 0/1 design: intercept, reference-coded dummies, interactions.

    ``names[k]`` reconstructs what column ``k`` encodes (``intercept``,
    ``factor=category``, or ``a=ca:b=cb`` for a product dummy).
    """

    names: list[str]
    values: np.ndarray
    dummy_columns: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.names):
            raise DataError("design values must be (n_strata, len(names))")
        if len(set(self.names)) != len(self.names):
            raise DataError("design column names must be unique")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def factor_categories(self, factor: str) -> list[str]:
        """Non-reference categories of ``factor`` present as dummy columns."""
        return [cat for (name, cat) in self.dummy_columns if name == factor]


def intercept_design(n_strata: int) -> DesignMatrix:
    """Intercept-only design (the unadjusted model)."""
    return DesignMatrix(names=["intercept"], values=np.ones((n_strata, 1)))


def main_effects_for_codes(
    codes: np.ndarray, factors: tuple[FactorSpec, ...] | list[FactorSpec]
) -> DesignMatrix:
    """Main-effects design for explicit stratum category codes (J, F)."""
    codes = np.asarray(codes)
    factors = tuple(factors)
    if codes.ndim != 2 or codes.shape[1] != len(factors):
        raise DataError("codes must be (n_strata, n_factors)")
    columns = [np.ones(codes.shape[0])]
    names = ["intercept"]
    dummy_columns: dict[tuple[str, str], int] = {}
    for f, spec in enumerate(factors):
        for cat in spec.categories:
            if cat == spec.reference:
                continue
            dummy_columns[(spec.name, cat)] = len(names)
            names.append(f"{spec.name}={cat}")
            columns.append((codes[:, f] == spec.categories.index(cat)).astype(float))
    return DesignMatrix(
        names=names, values=np.column_stack(columns), dummy_columns=dummy_columns
    )


def main_effects_design(
    index: StratumIndex,
    factors: tuple[FactorSpec, ...] | list[FactorSpec] | None = None,
) -> DesignMatrix:
    """Reference-coded main-effects design over the observed strata.

    ``p = 1 + sum_f (|categories_f| - 1)`` columns; row j encodes stratum
    j's categories.
    """
    factors = index.factors if factors is None else tuple(factors)
    if factors != index.factors:
        raise DataError("factors do not match the stratum index")
    return main_effects_for_codes(index.combos, factors)


def with_interaction(
    design: DesignMatrix, factor_a: str, factor_b: str
) -> DesignMatrix:
    """Append the ``(|A|-1)(|B|-1)`` product-dummy columns for a factor pair."""
    if factor_a == factor_b:
        raise DataError("interaction requires two distinct factors")
    cats_a = design.factor_categories(factor_a)
    cats_b = design.factor_categories(factor_b)
    if not cats_a or not cats_b:
        missing = factor_a if not cats_a else factor_b
        raise DataError(f"factor {missing!r} has no dummy columns in this design")
    names = list(design.names)
    columns = [design.values]
    for ca in cats_a:
        col_a = design.values[:, design.dummy_columns[(factor_a, ca)]]
        for cb in cats_b:
            col_b = design.values[:, design.dummy_columns[(factor_b, cb)]]
            names.append(f"{factor_a}={ca}:{factor_b}={cb}")
            columns.append((col_a * col_b)[:, None])
    return DesignMatrix(
        names=names,
        values=np.hstack(columns),
        dummy_columns=dict(design.dummy_columns),
    )
