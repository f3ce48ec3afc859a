"""Final age aggregation over the top correlated predictors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor
from sklearn.linear_model import LinearRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.svm import SVR

from .errors import SelectionLeakage, UnfittedAggregator
from .selection import PredictionMatrix, SelectionResult, check_selection

REGRESSORS = ("linear", "support_vector", "random_forest")
SVR_PARAMS = {"kernel": "rbf", "C": 100.0, "epsilon": 0.5, "gamma": "scale"}
FOREST_PARAMS = {"n_estimators": 100}


def make_regressor(kind: str, seed: int = 0):
    if kind == "linear":
        return LinearRegression()
    if kind == "support_vector":
        return make_pipeline(StandardScaler(), SVR(**SVR_PARAMS))
    if kind == "random_forest":
        return RandomForestRegressor(random_state=seed, **FOREST_PARAMS)
    raise ValueError(f"unknown regressor {kind!r}; choose from {REGRESSORS}")


@dataclass
class Aggregator:
    mode: str = "average"
    regressor: str = "support_vector"
    seed: int = 0
    model: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("average", "regression"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")

    @property
    def fitted(self) -> bool:
        return self.mode == "average" or self.model is not None

    def fit(self, matrix: PredictionMatrix, selection: SelectionResult) -> "Aggregator":
        """Fit the regression stacker on training rows (no-op for averaging)."""
        if self.mode == "average":
            return self
        if matrix.split != "train":
            raise SelectionLeakage("regression aggregator must be fitted on training rows")
        self.model = make_regressor(self.regressor, self.seed)
        self.model.fit(matrix.values[:, selection.indices], matrix.targets)
        return self


def aggregate(corrected: PredictionMatrix, selection: SelectionResult, agg: Aggregator,
              train_ids=None) -> np.ndarray:
    """Per-subject final age from the selected columns of ``corrected``."""
    check_selection(selection, train_ids)
    sub = corrected.values[:, selection.indices]
    if agg.mode == "average":
        # centred on the first column so identical columns average to themselves exactly
        base = sub[:, 0]
        return base + (sub - base[:, None]).mean(axis=1)
    if not agg.fitted:
        raise UnfittedAggregator("fit the regression aggregator on training rows first")
    return np.asarray(agg.model.predict(sub), dtype=float)
