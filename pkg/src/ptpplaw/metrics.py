"""Forecast error metrics on log and relative scales, plus OLS calibration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .fitting import huber

Y_CLIP = 1e-8


def _pair(preds, obs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float).ravel()
    y = np.asarray(obs, dtype=float).ravel()
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} observations")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    if np.any(p <= 0) or np.any(y <= 0):
        raise ValueError("predictions and observations must be positive")
    return p, y


def log_residuals(preds, obs) -> np.ndarray:
    p, y = _pair(preds, obs)
    return np.log(p) - np.log(y)


def huber_log(preds, obs, delta: float = 0.02) -> float:
    return float(np.mean(huber(log_residuals(preds, obs), delta)))


def rmse_log(preds, obs) -> float:
    return float(np.sqrt(np.mean(np.square(log_residuals(preds, obs)))))


def mae_rel(preds, obs) -> float:
    p, y = _pair(preds, obs)
    return float(np.mean(np.abs(p - y) / y))


def mape_clip(preds, obs, y_clip: float = Y_CLIP) -> float:
    p, y = _pair(preds, obs)
    return float(np.mean(np.abs(p - y) / np.maximum(y, y_clip)))


class DegenerateDesignError(ValueError):
    pass


def calibration_ols(preds, obs) -> tuple[float, float]:
    """Intercept and slope of ``ln obs = a + b ln preds`` by least squares."""
    p, y = _pair(preds, obs)
    if p.size < 2:
        raise DegenerateDesignError("calibration needs at least two points")
    x = np.log(p)
    t = np.log(y)
    xc = x - x.mean()
    sxx = float(np.dot(xc, xc))
    if sxx <= np.finfo(float).eps * max(1.0, float(np.dot(x, x))):
        raise DegenerateDesignError("log predictions are constant; slope is undefined")
    b = float(np.dot(xc, t - t.mean()) / sxx)
    a = float(t.mean() - b * x.mean())
    return a, b


@dataclass(frozen=True)
class MetricsReport:
    huber_log: float
    rmse_log: float
    mae_rel: float
    mape_clip: float
    intercept: float
    slope: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data) -> "MetricsReport":
        return cls(**{k: (int(data[k]) if k == "n" else float(data[k])) for k in cls.__dataclass_fields__})


def metrics_report(preds, obs, delta: float = 0.02, y_clip: float = Y_CLIP) -> MetricsReport:
    a, b = calibration_ols(preds, obs)
    return MetricsReport(
        huber_log=huber_log(preds, obs, delta),
        rmse_log=rmse_log(preds, obs),
        mae_rel=mae_rel(preds, obs),
        mape_clip=mape_clip(preds, obs, y_clip),
        intercept=a,
        slope=b,
        n=int(np.size(preds)),
    )


def sci(value: float, digits: int = 2) -> str:
    """Scientific notation the way the result tables print it, e.g. ``4.43e-05``."""
    return f"{value:.{digits}e}"
