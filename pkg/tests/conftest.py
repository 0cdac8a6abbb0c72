from pathlib import Path

import pytest

from maihda import FactorSpec, SimConfig, generate

DATA_DIR = Path(__file__).resolve().parent.parent / "data"


def five_factors():
    return [
        FactorSpec("term_of_birth", ("autumn", "spring", "summer")),
        FactorSpec("gender", ("male", "female")),
        FactorSpec("fsm", ("no_fsm", "fsm")),
        FactorSpec("sen", ("no_sen", "sen")),
        FactorSpec(
            "ethnicity", ("white", "black", "asian", "mixed", "other", "unclassified")
        ),
    ]


@pytest.fixture(scope="session")
def factors5():
    return five_factors()


@pytest.fixture(scope="session")
def small_cohort(factors5):
    """144 strata, modest sizes: fast to fit, far from the boundary."""
    cfg = SimConfig(
        factors=factors5,
        seed=515,
        sigma2_u=0.05,
        sigma2_e=0.8,
        beta={
            "intercept": 0.2,
            "gender=female": 0.1,
            "fsm=fsm": -0.3,
            "sen=sen": -1.0,
            "ethnicity=asian": 0.1,
        },
        size_range=(11, 200),
    )
    dataset, truth = generate(cfg)
    return dataset, truth


@pytest.fixture(scope="session")
def reference_paths():
    return {
        "data": DATA_DIR / "reference_data.csv",
        "config": DATA_DIR / "reference_config.txt",
        "truth": DATA_DIR / "reference_truth.json",
        "golden": DATA_DIR / "golden_report.json",
    }
