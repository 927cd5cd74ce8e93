"""Robust multi-start fitting of the adaptation laws.

The objective is the mean Huber loss of log residuals. Each start is
minimized with L-BFGS-B inside a box; strictly positive parameters are
optimized as logarithms (the box maps to a box), ``lambda`` and ``zeta`` on
their natural scale.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize

from .data import Dataset
from .forms import PARAM_NAMES, Features, LawForm, LawParams, jacobian_features, predict_features

log = logging.getLogger(__name__)

DEFAULT_BOUNDS: dict[str, tuple[float, float]] = {
    "E": (1e-9, 20.0),
    **{name: (1e-9, 1e6) for name in ("A", "alpha", "B", "beta", "nu", "C", "gamma", "F", "eta")},
    "lambda": (0.0, 1.0 - 1e-6),
    "zeta": (-20.0, 20.0),
}
LINEAR = frozenset({"lambda", "zeta"})
DIVERGED = 1e30


class FitError(RuntimeError):
    """Every start failed to produce a finite objective."""

    def __init__(self, message: str, diagnostics: list[dict]):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class FitConfig:
    huber_delta: float = 0.02
    bounds: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    n_starts: int = 64
    seed: int = 0
    max_iters: int = 2000
    grad_tol: float = 1e-10
    objective_tol: float = 1e-14

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        merged = dict(DEFAULT_BOUNDS)
        merged.update({k: (float(lo), float(hi)) for k, (lo, hi) in dict(self.bounds).items()})
        for name, (lo, hi) in merged.items():
            if name not in PARAM_NAMES:
                raise ValueError(f"bounds given for unknown parameter {name!r}")
            if not lo < hi:
                raise ValueError(f"bounds for {name} must satisfy lo < hi, got ({lo}, {hi})")
            if name not in LINEAR and lo <= 0:
                raise ValueError(f"lower bound for {name} must be positive")
        object.__setattr__(self, "bounds", merged)


@dataclass(frozen=True)
class FitResult:
    form: LawForm
    params: LawParams
    objective: float
    converged: bool
    n_iters: int
    best_start_index: int
    seed: int
    start_objectives: tuple[float, ...] = ()
    projected_grad_norm: float = float("nan")

    def predict(self, N, D, r, ptpp) -> np.ndarray:
        return predict_features(self.form, _theta_dict(self.form, self.params), Features(N, D, r, ptpp))

    def to_dict(self) -> dict:
        return {
            "form": self.form.value,
            "params": self.params.to_dict(self.form),
            "objective": self.objective,
            "converged": self.converged,
            "n_iters": self.n_iters,
            "best_start_index": self.best_start_index,
            "seed": self.seed,
            "start_objectives": list(self.start_objectives),
            "projected_grad_norm": self.projected_grad_norm,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: Mapping) -> "FitResult":
        params_obj = dict(data["params"])
        params_obj.setdefault("form", data["form"])
        params, form = LawParams.from_dict(params_obj)
        if form != LawForm.parse(data["form"]):
            raise ValueError("form of params does not match result form")
        return cls(
            form=form,
            params=params,
            objective=float(data["objective"]),
            converged=bool(data["converged"]),
            n_iters=int(data["n_iters"]),
            best_start_index=int(data["best_start_index"]),
            seed=int(data["seed"]),
            start_objectives=tuple(float(v) for v in data.get("start_objectives", ())),
            projected_grad_norm=float(data.get("projected_grad_norm", float("nan"))),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FitResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def huber(residuals, delta: float) -> np.ndarray:
    a = np.abs(residuals)
    return np.where(a <= delta, 0.5 * np.square(residuals), delta * (a - 0.5 * delta))


def huber_psi(residuals, delta: float) -> np.ndarray:
    """Derivative of the Huber loss."""
    return np.clip(residuals, -delta, delta)


def _theta_dict(form: LawForm, params: LawParams) -> dict:
    return {n: params.get(n) for n in PARAM_NAMES}


def _check_slice(ds: Dataset) -> None:
    if len(ds) == 0:
        raise ValueError("empty measurement slice")
    if len(ds.domains) != 1:
        raise ValueError(f"slice mixes domains {sorted(ds.domains)}; filter on one domain first")
    if np.any(ds.column("D") <= 0):
        raise ValueError("fitting requires D > 0 for every measurement")


def _stack(slices: Sequence[Dataset]) -> tuple[Features, np.ndarray]:
    cols = {name: np.concatenate([s.column(name) for s in slices]) for name in ("N", "D", "r", "ptpp", "loss")}
    return Features(cols["N"], cols["D"], cols["r"], cols["ptpp"]), cols["loss"]


class _Problem:
    """Objective and gradient in optimizer coordinates for one form and data slice."""

    def __init__(self, form: LawForm, X: Features, loss: np.ndarray, cfg: FitConfig):
        self.form = form
        self.X = X
        self.ln_y = np.log(loss)
        self.delta = cfg.huber_delta
        self.names = form.active
        self.log_mask = np.array([n not in LINEAR for n in self.names])
        lo = np.array([cfg.bounds[n][0] for n in self.names], dtype=float)
        hi = np.array([cfg.bounds[n][1] for n in self.names], dtype=float)
        self.lo = np.where(self.log_mask, np.log(np.where(self.log_mask, lo, 1.0)), lo)
        self.hi = np.where(self.log_mask, np.log(np.where(self.log_mask, hi, 1.0)), hi)
        self.theta_lo, self.theta_hi = lo, hi

    def to_theta(self, u: np.ndarray) -> np.ndarray:
        return np.where(self.log_mask, np.exp(u), u)

    def to_u(self, theta: np.ndarray) -> np.ndarray:
        theta = np.clip(theta, self.theta_lo, self.theta_hi)
        return np.clip(np.where(self.log_mask, np.log(np.where(self.log_mask, theta, 1.0)), theta), self.lo, self.hi)

    def theta_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        values = dict.fromkeys(PARAM_NAMES, 0.0)
        values.update(zip(self.names, theta))
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            pred, J = jacobian_features(self.form, values, self.X)
            res = np.log(pred) - self.ln_y
            f = float(np.mean(huber(res, self.delta)))
            g = J.T @ (huber_psi(res, self.delta) / pred) / len(res)
        return f, g

    def __call__(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        theta = self.to_theta(u)
        f, g = self.theta_grad(theta)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            return DIVERGED, np.zeros_like(u)
        return f, g * np.where(self.log_mask, theta, 1.0)

    def projected_grad_norm(self, u: np.ndarray) -> float:
        _, g = self(u)
        step = np.clip(u - g, self.lo, self.hi) - u
        return float(np.max(np.abs(step)))


def objective(params: LawParams, form, ds: Dataset, delta: float = 0.02) -> float:
    """Mean Huber loss of ``ln L_hat - ln loss`` over a single-domain slice."""
    form = LawForm.parse(form)
    _check_slice(ds)
    params.check_form(form)
    pred = predict_features(form, _theta_dict(form, params), ds.features())
    assert np.all(pred > 0), "predicted loss must be positive"
    return float(np.mean(huber(np.log(pred) - np.log(ds.loss), delta)))


def objective_grad(params: LawParams, form, ds: Dataset, delta: float = 0.02) -> np.ndarray:
    """Gradient of :func:`objective` with respect to the active parameters."""
    form = LawForm.parse(form)
    _check_slice(ds)
    params.check_form(form)
    X, loss = _stack([ds])
    prob = _Problem(form, X, loss, FitConfig(huber_delta=delta, n_starts=1))
    return prob.theta_grad(params.active_vector(form))[1]


def multistart_init(cfg: FitConfig, form, ds: Dataset) -> list[LawParams]:
    """Deterministic start points drawn from ``cfg.seed``.

    Every start draws all twelve symbols in the same order regardless of
    form, so start ``k`` agrees across forms on the shared parameters.
    """
    return _starts(cfg, LawForm.parse(form), float(np.min(ds.loss)))


def _starts(cfg: FitConfig, form: LawForm, y_min: float) -> list[LawParams]:
    rng = np.random.default_rng(cfg.seed)

    def log_uniform(lo: float, hi: float) -> float:
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    starts = []
    for _ in range(cfg.n_starts):
        draw = {
            "E": rng.uniform(0.5 * y_min, y_min),
            "A": log_uniform(1e-3, 1e3),
            "alpha": log_uniform(0.05, 1.5),
            "B": log_uniform(1e-3, 1e3),
            "beta": log_uniform(0.05, 1.5),
            "nu": log_uniform(0.05, 1.5),
            "C": log_uniform(1e-3, 1e3),
            "gamma": log_uniform(0.05, 1.5),
            "F": log_uniform(1e-3, 1e3),
            "eta": log_uniform(0.05, 1.5),
            "lambda": rng.uniform(0.0, 0.95),
            "zeta": rng.uniform(-5.0, 5.0),
        }
        values = [
            float(np.clip(draw[n], *cfg.bounds[n])) if n in form.active else 0.0 for n in PARAM_NAMES
        ]
        starts.append(LawParams.from_vector(values))
    return starts


def _run(form: LawForm, slices: Sequence[Dataset], cfg: FitConfig) -> FitResult:
    for s in slices:
        _check_slice(s)
    if len({d for s in slices for d in s.domains}) != 1:
        raise ValueError("all slices must share one domain")
    X, loss = _stack(slices)
    return fit_arrays(X, loss, form, cfg)


def fit_arrays(X: Features, loss: np.ndarray, form, cfg: FitConfig | None = None) -> FitResult:
    """Fit on precomputed features; callers are responsible for slicing by domain."""
    form = LawForm.parse(form)
    cfg = cfg or FitConfig()
    loss = np.asarray(loss, dtype=float)
    if loss.size == 0 or np.any(~np.isfinite(loss)) or np.any(loss <= 0):
        raise ValueError("loss values must be finite and positive")
    prob = _Problem(form, X, loss, cfg)
    bounds = list(zip(prob.lo, prob.hi))
    starts = _starts(cfg, form, float(np.min(loss)))

    finals: list[float] = []
    outcomes = []
    diagnostics = []
    for k, start in enumerate(starts):
        u0 = prob.to_u(start.active_vector(form))
        f0 = prob(u0)[0]
        res = minimize(
            prob,
            u0,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={
                "maxiter": cfg.max_iters,
                "maxcor": 10,
                "gtol": cfg.grad_tol,
                "ftol": cfg.objective_tol,
                "maxls": 50,
            },
        )
        f = float(res.fun) if np.isfinite(res.fun) else DIVERGED
        finals.append(f)
        outcomes.append(res)
        diagnostics.append({"start": k, "initial": f0, "final": f, "status": int(res.status), "message": str(res.message)})
        log.debug("start %d: %.3e -> %.3e (%s)", k, f0, f, res.message)

    finals_arr = np.array(finals)
    if np.all(finals_arr >= DIVERGED):
        raise FitError(f"all {len(starts)} starts diverged", diagnostics)
    best = int(np.argmin(finals_arr))
    res = outcomes[best]
    u = np.clip(res.x, prob.lo, prob.hi)
    theta = prob.to_theta(u)
    pg = prob.projected_grad_norm(u)
    return FitResult(
        form=form,
        params=LawParams.from_active(form, theta),
        objective=float(prob(u)[0]),
        converged=bool(res.status == 0 and pg <= 1e-6),
        n_iters=int(res.nit),
        best_start_index=best,
        seed=cfg.seed,
        start_objectives=tuple(finals),
        projected_grad_norm=pg,
    )


def fit(ds: Dataset, form, cfg: FitConfig | None = None) -> FitResult:
    """Fit one law form to a single-domain slice."""
    return _run(LawForm.parse(form), [ds], cfg or FitConfig())


def fit_with_anchors(train: Dataset, anchors: Dataset | None, form, cfg: FitConfig | None = None) -> FitResult:
    """Fit on train plus anchor measurements, each point weighted equally."""
    if anchors is None or len(anchors) == 0:
        raise ValueError("anchor slice must be non-empty")
    if anchors.domains != train.domains:
        raise ValueError("anchors must share the training slice's domain")
    return _run(LawForm.parse(form), [train, anchors], cfg or FitConfig())
