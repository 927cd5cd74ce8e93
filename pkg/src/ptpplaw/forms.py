"""PTPP-aware adaptation loss laws.

Four closed forms share an N-term, a replay-weighted data term and a replay
barrier::

    L = E + A/N^alpha + B r^nu / D^beta_eff + C/(r + eps)^gamma [+ F/ptpp^eta]

``additive-floor`` keeps ``beta_eff = beta`` and adds the ptpp floor,
``gated`` modulates the data exponent with a bounded logistic gate in
``ln ptpp``, ``gated-floor`` does both, and ``dcpt`` has neither.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

EPS_R = 1e-5
BETA_EFF_MIN = 1e-6
R_CLIP = 1e-9

PARAM_NAMES: tuple[str, ...] = (
    "E", "A", "alpha", "B", "beta", "nu", "C", "gamma", "F", "eta", "lambda", "zeta",
)
_CORE = ("E", "A", "alpha", "B", "beta", "nu", "C", "gamma")
_FLOOR = ("F", "eta")
_GATE = ("lambda", "zeta")


class LawForm(str, enum.Enum):
    ADDITIVE_FLOOR = "additive-floor"
    GATED_EXPONENT = "gated"
    GATED_PLUS_FLOOR = "gated-floor"
    DCPT_BASELINE = "dcpt"

    @property
    def has_floor(self) -> bool:
        return self in (LawForm.ADDITIVE_FLOOR, LawForm.GATED_PLUS_FLOOR)

    @property
    def has_gate(self) -> bool:
        return self in (LawForm.GATED_EXPONENT, LawForm.GATED_PLUS_FLOOR)

    @property
    def active(self) -> tuple[str, ...]:
        names = _CORE
        if self.has_floor:
            names = names + _FLOOR
        if self.has_gate:
            names = names + _GATE
        return tuple(n for n in PARAM_NAMES if n in names)

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def parse(cls, name: "str | LawForm") -> "LawForm":
        if isinstance(name, LawForm):
            return name
        key = str(name).strip().lower()
        if key in _ALIASES:
            return _ALIASES[key]
        valid = ", ".join(f.value for f in cls)
        raise ValueError(f"unknown law form {name!r}; valid forms: {valid}")


_LABELS = {
    LawForm.ADDITIVE_FLOOR: "Form 1 (Additive Prior)",
    LawForm.GATED_EXPONENT: "Form 2 (Gated Exponent)",
    LawForm.GATED_PLUS_FLOOR: "Form 3 (Gated+Floor)",
    LawForm.DCPT_BASELINE: "D-CPT (no ptpp, transfer)",
}

_ALIASES = {f.value: f for f in LawForm}
_ALIASES.update(
    {
        "form1": LawForm.ADDITIVE_FLOOR,
        "form2": LawForm.GATED_EXPONENT,
        "form3": LawForm.GATED_PLUS_FLOOR,
        "additive": LawForm.ADDITIVE_FLOOR,
        "gated-exponent": LawForm.GATED_EXPONENT,
        "gated+floor": LawForm.GATED_PLUS_FLOOR,
        "d-cpt": LawForm.DCPT_BASELINE,
        "baseline": LawForm.DCPT_BASELINE,
    }
)

ALL_FORMS: tuple[LawForm, ...] = tuple(LawForm)


@dataclass(frozen=True)
class LawParams:
    """Full twelve-symbol parameter set; inactive symbols stay at zero."""

    E: float = 0.0
    A: float = 0.0
    alpha: float = 0.0
    B: float = 0.0
    beta: float = 0.0
    nu: float = 0.0
    C: float = 0.0
    gamma: float = 0.0
    F: float = 0.0
    eta: float = 0.0
    lam: float = 0.0
    zeta: float = 0.0

    def get(self, name: str) -> float:
        return getattr(self, _attr(name))

    def to_vector(self) -> np.ndarray:
        return np.array([self.get(n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, values) -> "LawParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} values, got shape {values.shape}")
        return cls(**{_attr(n): float(v) for n, v in zip(PARAM_NAMES, values)})

    @classmethod
    def from_active(cls, form: LawForm, values) -> "LawParams":
        form = LawForm.parse(form)
        values = np.asarray(values, dtype=float)
        kwargs = {_attr(n): float(v) for n, v in zip(form.active, values)}
        return cls(**kwargs)

    def active_vector(self, form: LawForm) -> np.ndarray:
        return np.array([self.get(n) for n in LawForm.parse(form).active], dtype=float)

    def replace(self, **changes: float) -> "LawParams":
        data = asdict(self)
        for key, value in changes.items():
            data[_attr(key)] = float(value)
        return LawParams(**data)

    def restrict(self, form: LawForm) -> "LawParams":
        """Zero every symbol the form does not use."""
        form = LawForm.parse(form)
        return LawParams(**{_attr(n): (self.get(n) if n in form.active else 0.0) for n in PARAM_NAMES})

    def check_form(self, form: LawForm) -> None:
        form = LawForm.parse(form)
        stray = [n for n in PARAM_NAMES if n not in form.active and self.get(n) != 0.0]
        if stray:
            raise ValueError(f"parameters {stray} are not used by form {form.value!r} but are nonzero")

    def to_dict(self, form: LawForm) -> dict:
        form = LawForm.parse(form)
        self.check_form(form)
        out: dict = {"form": form.value}
        out.update({n: self.get(n) for n in form.active})
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> tuple["LawParams", LawForm]:
        if "form" not in data:
            raise ValueError("parameter object has no 'form' key")
        form = LawForm.parse(data["form"])
        extra = set(data) - {"form"} - set(PARAM_NAMES)
        if extra:
            raise ValueError(f"unknown parameter keys: {sorted(extra)}")
        inactive = [k for k in data if k in PARAM_NAMES and k not in form.active]
        if inactive:
            raise ValueError(f"keys {inactive} must be absent for form {form.value!r}")
        missing = [n for n in form.active if n not in data]
        if missing:
            raise ValueError(f"missing parameters for form {form.value!r}: {missing}")
        return cls(**{_attr(n): float(data[n]) for n in form.active}), form


def _attr(name: str) -> str:
    return "lam" if name == "lambda" else name


@dataclass(frozen=True)
class EvalPoint:
    N: float
    D: float
    r: float
    ptpp: float

    def __post_init__(self):
        if not (self.N > 0 and self.ptpp > 0):
            raise ValueError(f"N and ptpp must be positive: {self}")
        if not self.D >= 0:
            raise ValueError(f"D must be non-negative: {self}")
        if not (R_CLIP <= self.r <= 1 - R_CLIP):
            raise ValueError(f"r must lie in [{R_CLIP}, 1-{R_CLIP}]: {self}")


def gate(zeta, ptpp):
    """ptpp^zeta / (1 + ptpp^zeta), evaluated as a logistic in ln ptpp."""
    z = np.multiply(zeta, np.log(ptpp))
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def beta_eff(beta, lam, zeta, ptpp):
    """Gated data exponent, clamped below at 1e-6."""
    if not np.all(np.isfinite([beta, lam, zeta])) or not np.all(np.isfinite(ptpp)):
        raise ValueError("beta_eff inputs must be finite")
    if np.any(np.asarray(ptpp) <= 0):
        raise ValueError("ptpp must be positive")
    out = np.maximum(beta * (1.0 - lam * gate(zeta, ptpp)), BETA_EFF_MIN)
    return float(out) if np.ndim(out) == 0 else out


class Features:
    """Log-transformed covariates, computed once per dataset slice."""

    def __init__(self, N, D, r, ptpp):
        self.N = np.atleast_1d(np.asarray(N, dtype=float))
        self.D = np.atleast_1d(np.asarray(D, dtype=float))
        self.r = np.atleast_1d(np.asarray(r, dtype=float))
        self.ptpp = np.atleast_1d(np.asarray(ptpp, dtype=float))
        self.N, self.D, self.r, self.ptpp = np.broadcast_arrays(self.N, self.D, self.r, self.ptpp)
        if np.any(self.N <= 0) or np.any(self.ptpp <= 0):
            raise ValueError("N and ptpp must be positive")
        if np.any(self.D <= 0):
            raise ValueError("D must be positive; the data term is singular at D=0 (use baseline_source_loss)")
        if np.any(self.r < R_CLIP) or np.any(self.r > 1 - R_CLIP):
            raise ValueError(f"r must lie in [{R_CLIP}, 1-{R_CLIP}]")
        self.ln_N = np.log(self.N)
        self.ln_D = np.log(self.D)
        self.ln_r = np.log(self.r)
        self.ln_barrier = np.log(self.r + EPS_R)
        self.ln_ptpp = np.log(self.ptpp)

    def __len__(self) -> int:
        return self.N.shape[0]


def _terms(form: LawForm, theta: Mapping[str, float], X: Features):
    n_term = theta["A"] * np.exp(-theta["alpha"] * X.ln_N)
    if form.has_gate:
        g = 0.5 * (1.0 + np.tanh(0.5 * theta["zeta"] * X.ln_ptpp))
        raw = theta["beta"] * (1.0 - theta["lambda"] * g)
        be = np.maximum(raw, BETA_EFF_MIN)
    else:
        g = None
        raw = None
        be = theta["beta"]
    d_term = theta["B"] * np.exp(theta["nu"] * X.ln_r - be * X.ln_D)
    barrier = theta["C"] * np.exp(-theta["gamma"] * X.ln_barrier)
    floor = theta["F"] * np.exp(-theta["eta"] * X.ln_ptpp) if form.has_floor else 0.0
    return n_term, d_term, barrier, floor, g, raw


def predict_features(form: LawForm, theta: Mapping[str, float], X: Features) -> np.ndarray:
    n_term, d_term, barrier, floor, _, _ = _terms(form, theta, X)
    return theta["E"] + n_term + d_term + barrier + floor


def jacobian_features(form: LawForm, theta: Mapping[str, float], X: Features):
    """Predictions and the (n, n_active) matrix of partials, columns in ``form.active`` order."""
    n_term, d_term, barrier, floor, g, raw = _terms(form, theta, X)
    pred = theta["E"] + n_term + d_term + barrier + floor
    cols = {
        "E": np.ones_like(pred),
        "A": np.exp(-theta["alpha"] * X.ln_N),
        "alpha": -n_term * X.ln_N,
        "B": np.exp(theta["nu"] * X.ln_r - (np.maximum(raw, BETA_EFF_MIN) if form.has_gate else theta["beta"]) * X.ln_D),
        "nu": d_term * X.ln_r,
        "C": np.exp(-theta["gamma"] * X.ln_barrier),
        "gamma": -barrier * X.ln_barrier,
    }
    d_be = -d_term * X.ln_D
    if form.has_gate:
        live = raw > BETA_EFF_MIN
        cols["beta"] = np.where(live, d_be * (1.0 - theta["lambda"] * g), 0.0)
        cols["lambda"] = np.where(live, d_be * (-theta["beta"] * g), 0.0)
        cols["zeta"] = np.where(
            live, d_be * (-theta["beta"] * theta["lambda"] * g * (1.0 - g) * X.ln_ptpp), 0.0
        )
    else:
        cols["beta"] = d_be
    if form.has_floor:
        cols["F"] = np.exp(-theta["eta"] * X.ln_ptpp)
        cols["eta"] = -floor * X.ln_ptpp
    J = np.column_stack([cols[n] for n in form.active])
    return pred, J


def _theta(form: LawForm, params: LawParams) -> dict:
    params.check_form(form)
    return {n: params.get(n) for n in PARAM_NAMES}


def predict(form, params: LawParams, N, D, r, ptpp) -> np.ndarray:
    """Vectorized loss prediction over broadcastable covariate arrays."""
    form = LawForm.parse(form)
    return predict_features(form, _theta(form, params), Features(N, D, r, ptpp))


def eval_law(form, params: LawParams, x: EvalPoint) -> float:
    form = LawForm.parse(form)
    if x.D == 0:
        raise ValueError("D=0 makes the data term singular; use baseline_source_loss")
    return float(predict(form, params, x.N, x.D, x.r, x.ptpp)[0])


def grad_law(form, params: LawParams, x: EvalPoint) -> np.ndarray:
    """Partials of the predicted loss with respect to each active parameter."""
    form = LawForm.parse(form)
    if x.D == 0:
        raise ValueError("D=0 makes the data term singular; use baseline_source_loss")
    _, J = jacobian_features(form, _theta(form, params), Features(x.N, x.D, x.r, x.ptpp))
    return J[0]


def baseline_source_loss(params: LawParams, form, N: float, ptpp: float, measured: float | None = None) -> float:
    """Loss of the unadapted model, L(N, 0, 1, ptpp).

    With ``measured`` given, that value is returned unchanged. Otherwise the
    data term is dropped (its D -> 0 limit is not representable) and the
    remaining terms are evaluated at r = 1.
    """
    if measured is not None:
        if not measured > 0:
            raise ValueError("measured baseline loss must be positive")
        return float(measured)
    form = LawForm.parse(form)
    params.check_form(form)
    if not (N > 0 and ptpp > 0):
        raise ValueError("N and ptpp must be positive")
    value = params.E + params.A * N ** (-params.alpha) + params.C / (1.0 + EPS_R) ** params.gamma
    if form.has_floor:
        value += params.F / ptpp**params.eta
    return float(value)


def asymptotic_loss(params: LawParams, form, N: float, r: float, ptpp: float) -> float:
    """D -> infinity limit of the law at fixed (N, r, ptpp)."""
    form = LawForm.parse(form)
    params.check_form(form)
    value = params.E + params.A * N ** (-params.alpha) + params.C / (r + EPS_R) ** params.gamma
    if form.has_floor:
        value += params.F / ptpp**params.eta
    return float(value)


def is_decreasing_in_D(params: LawParams, form) -> bool:
    """True when every active parameter is positive (data term strictly decreasing in D)."""
    form = LawForm.parse(form)
    vec = params.active_vector(form)
    return bool(np.all(vec[[n != "zeta" and n != "lambda" for n in form.active]] > 0)) and (
        not form.has_gate or params.lam < 1.0
    )

