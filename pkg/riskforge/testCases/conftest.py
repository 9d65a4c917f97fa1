import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from riskforge.lib.tabular import PatientFrame

CASE_DIR = Path(__file__).parent


def load_case(name: str):
    with open(CASE_DIR / name, encoding="utf-8") as f:
        return json.load(f)


def frame_of(columns: dict) -> PatientFrame:
    """JSON null becomes a masked cell."""
    data = {k: pd.Series([np.nan if v is None else v for v in vals],
                         dtype=object if any(isinstance(v, str) for v in vals) else float)
            for k, vals in columns.items()}
    return PatientFrame(pd.DataFrame(data))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def logistic_data(rng):
    """n=500, p=10 standardized design with a known sparse signal."""
    n, p = 500, 10
    X = rng.normal(size=(n, p))
    beta = np.array([1.0, -0.8, 0.5, 0, 0, 0, 0, 0, 0, 0])
    prob = 1.0 / (1.0 + np.exp(-(0.2 + X @ beta)))
    y = (rng.random(n) < prob).astype(float)
    return X, y, beta
