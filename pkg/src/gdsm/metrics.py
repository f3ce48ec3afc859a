"""Regression metrics for predicted vs. chronological age."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConstantTargets, ConstantVector, EmptyInput, LengthMismatch, NonFiniteInput


def _pair(pred, actual, min_n: int = 1) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    actual = np.asarray(actual, dtype=np.float64).ravel()
    if pred.shape != actual.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {actual.size} targets")
    if pred.size < min_n:
        raise EmptyInput(f"need at least {min_n} pairs, got {pred.size}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(actual))):
        raise NonFiniteInput("metrics need finite inputs")
    return pred, actual


def mae(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean(np.abs(pred - actual)))


def mse(pred, actual) -> float:
    pred, actual = _pair(pred, actual)
    return float(np.mean((pred - actual) ** 2))


def rmse(pred, actual) -> float:
    return math.sqrt(mse(pred, actual))


def r_squared(pred, actual) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot with SS_tot about the mean target."""
    pred, actual = _pair(pred, actual, min_n=2)
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantTargets("R^2 is undefined for constant targets")
    ss_res = float(np.sum((actual - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def pearson_r(pred, actual) -> float:
    pred, actual = _pair(pred, actual, min_n=2)
    dp = pred - pred.mean()
    da = actual - actual.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(da * da)))
    if denom == 0.0:
        raise ConstantVector("Pearson r is undefined for a constant vector")
    return float(np.clip(np.sum(dp * da) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    r_squared: float
    pearson_r: float
    n: int

    @classmethod
    def compute(cls, pred, actual) -> "MetricsReport":
        pred, actual = _pair(pred, actual)
        nan = float("nan")
        try:
            r2 = r_squared(pred, actual)
        except (ConstantTargets, EmptyInput):
            r2 = nan
        try:
            r = pearson_r(pred, actual)
        except (ConstantVector, EmptyInput):
            r = nan
        m = mse(pred, actual)
        return cls(mae(pred, actual), m, math.sqrt(m), r2, r, int(pred.size))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self, title: str = "") -> str:
        rows = [("MAE", self.mae, "years"), ("MSE", self.mse, "years^2"), ("RMSE", self.rmse, "years"),
                ("R^2", self.r_squared, ""), ("Pearson r", self.pearson_r, ""), ("n", self.n, "")]
        lines = [title] if title else []
        lines.append(f"{'metric':<10} {'value':>12}  unit")
        for name, value, unit in rows:
            cell = f"{value:>12d}" if isinstance(value, int) else f"{value:>12.4f}"
            lines.append(f"{name:<10} {cell}  {unit}".rstrip())
        return "\n".join(lines) + "\n"
