"""Joint replay-ratio / adaptation-budget planning.

For fixed model size and pre-training budget, find the smallest adaptation
tokens-per-parameter (ATPP) and the replay ratio ``r`` such that the source
loss rises by at most the tolerated forgetting and the target loss reaches
the threshold. Each ``r`` on a grid is solved independently; the answer is the
grid-wide minimum.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fitting import FitResult
from .forms import (
    PARAM_NAMES,
    R_CLIP,
    EvalPoint,
    Features,
    asymptotic_loss,
    baseline_source_loss,
    eval_law,
    is_decreasing_in_D,
    predict_features,
)

FLOPS_PER_PARAM_TOKEN = 6.0
BISECT_REL = 1e-6
SCAN_POINTS = 4096


def flops(N: float, atpp: float) -> float:
    """Training cost 6 N D with D = atpp * N."""
    return FLOPS_PER_PARAM_TOKEN * N * (atpp * N)


def default_r_grid(n: int = 2048, lo: float = 1e-3) -> np.ndarray:
    """``n`` replay ratios on [lo, 1 - 1e-9], evenly spaced in logit(r), ascending.

    Logit spacing is log-spaced in ``1 - r`` near 1 and in ``r`` near 0, so
    small replay ratios get as much resolution as the approach to r = 1.
    """
    z = np.linspace(math.log(lo / (1.0 - lo)), math.log((1.0 - R_CLIP) / R_CLIP), n)
    return np.clip(1.0 / (1.0 + np.exp(-z)), R_CLIP, 1.0 - R_CLIP)


@dataclass(frozen=True)
class PlanConstraints:
    forgetting: float
    tau: float
    mode: str = "relative"

    def __post_init__(self):
        if self.mode not in ("relative", "absolute"):
            raise ValueError("tolerance mode must be 'relative' or 'absolute'")
        if not self.forgetting >= 0:
            raise ValueError("forgetting tolerance must be non-negative")
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise ValueError("target threshold tau must be finite and non-negative")

    @classmethod
    def parse(cls, forget: str, tau: float) -> "PlanConstraints":
        """``"2%"`` selects relative mode (fraction 0.02); a bare number is absolute nats."""
        text = str(forget).strip()
        if text.endswith("%"):
            return cls(float(text[:-1]) / 100.0, float(tau), "relative")
        if text.lower() in ("inf", "+inf", "infinity"):
            return cls(math.inf, float(tau), "absolute")
        return cls(float(text), float(tau), "absolute")

    def allowed_forgetting(self, baseline: float) -> float:
        """Tolerance in nats."""
        return self.forgetting * baseline if self.mode == "relative" else self.forgetting


@dataclass(frozen=True)
class PlanProblem:
    src_fit: FitResult
    tgt_fit: FitResult
    N: float
    ptpp: float
    constraints: PlanConstraints
    baseline_measured: float | None = None
    r_grid: tuple[float, ...] = field(default_factory=lambda: tuple(default_r_grid()))
    atpp_max: float = 1e3
    atpp_min: float = 1e-3
    landscape_atpp_points: int = 128
    landscape_r_points: int = 128
    require_converged: bool = True

    def __post_init__(self):
        if not (self.N > 0 and self.ptpp > 0):
            raise ValueError("N and ptpp must be positive")
        if not 0 < self.atpp_min < self.atpp_max:
            raise ValueError("need 0 < atpp_min < atpp_max")
        grid = np.asarray(self.r_grid, dtype=float)
        if grid.size == 0 or np.any(grid < R_CLIP) or np.any(grid > 1 - R_CLIP):
            raise ValueError("r_grid must be non-empty and inside [1e-9, 1-1e-9]")
        object.__setattr__(self, "r_grid", tuple(float(r) for r in grid))

    @property
    def baseline(self) -> float:
        return baseline_source_loss(
            self.src_fit.params, self.src_fit.form, self.N, self.ptpp, measured=self.baseline_measured
        )

    @property
    def forgetting_allowance(self) -> float:
        return self.constraints.allowed_forgetting(self.baseline)

    def check(self) -> None:
        if self.require_converged:
            bad = [name for name, f in (("source", self.src_fit), ("target", self.tgt_fit)) if not f.converged]
            if bad:
                raise ValueError(f"{' and '.join(bad)} fit(s) did not converge")


def _law(fr: FitResult):
    theta = {n: fr.params.get(n) for n in PARAM_NAMES}
    return lambda X: predict_features(fr.form, theta, X)


def _constraint_values(problem: PlanProblem, r: np.ndarray, atpp: np.ndarray):
    """Forgetting (nats) and target loss at broadcast (r, atpp)."""
    r, atpp = np.broadcast_arrays(np.asarray(r, float), np.asarray(atpp, float))
    X = Features(problem.N, atpp.ravel() * problem.N, r.ravel(), problem.ptpp)
    src = _law(problem.src_fit)(X).reshape(r.shape)
    tgt = _law(problem.tgt_fit)(X).reshape(r.shape)
    return src - problem.baseline, tgt


def slacks(problem: PlanProblem, r, atpp) -> tuple[np.ndarray, np.ndarray]:
    """(forgetting slack, target slack); both non-negative means feasible."""
    forget, tgt = _constraint_values(problem, r, atpp)
    return problem.forgetting_allowance - forget, problem.constraints.tau - tgt


def forgetting(src_fit: FitResult, x: EvalPoint, baseline_measured: float | None = None) -> float:
    """Source-loss increase over the unadapted model at the same N and ptpp."""
    if x.D <= 0:
        raise ValueError("forgetting needs D > 0; the unadapted model is the baseline itself")
    base = baseline_source_loss(src_fit.params, src_fit.form, x.N, x.ptpp, measured=baseline_measured)
    return eval_law(src_fit.form, src_fit.params, x) - base


def _monotone(problem: PlanProblem) -> bool:
    return is_decreasing_in_D(problem.src_fit.params, problem.src_fit.form) and is_decreasing_in_D(
        problem.tgt_fit.params, problem.tgt_fit.form
    )


def _feasible(problem: PlanProblem, r: np.ndarray, atpp: np.ndarray) -> np.ndarray:
    s, t = slacks(problem, r, atpp)
    return (s >= 0) & (t >= 0)


def _bisect(problem: PlanProblem, r: np.ndarray) -> np.ndarray:
    """Smallest feasible point of a log lattice with ratio (1 + 1e-6), per r; NaN if none."""
    lo_ln, hi_ln = math.log(problem.atpp_min), math.log(problem.atpp_max)
    step = math.log1p(BISECT_REL)
    n_steps = int(math.ceil((hi_ln - lo_ln) / step))

    def at(k):
        return np.exp(np.minimum(lo_ln + k * step, hi_ln))

    r = np.asarray(r, dtype=float)
    top = np.full(r.shape, n_steps, dtype=np.int64)
    ok_top = _feasible(problem, r, at(top))
    bottom = np.zeros(r.shape, dtype=np.int64)
    ok_bottom = _feasible(problem, r, at(bottom))
    # invariant: lattice point `hi` feasible, `lo` infeasible
    lo = np.where(ok_bottom, -1, bottom)
    hi = top.copy()
    active = ok_top & ~ok_bottom
    while np.any(active & (hi - lo > 1)):
        mid = (lo + hi) // 2
        ok = _feasible(problem, r, at(mid))
        move = active & (hi - lo > 1)
        hi = np.where(move & ok, mid, hi)
        lo = np.where(move & ~ok, mid, lo)
    out = np.where(ok_bottom, at(bottom), at(hi))
    return np.where(ok_top | ok_bottom, out, np.nan)


def _scan(problem: PlanProblem, r: np.ndarray, n: int = SCAN_POINTS) -> np.ndarray:
    grid = np.geomspace(problem.atpp_min, problem.atpp_max, n)
    ok = _feasible(problem, np.asarray(r, float)[:, None], grid[None, :])
    first = np.argmax(ok, axis=1)
    return np.where(ok.any(axis=1), grid[first], np.nan)


def min_feasible_atpp(r: float, problem: PlanProblem, method: str = "auto") -> float | None:
    """Smallest ATPP in [atpp_min, atpp_max] meeting both constraints at ratio ``r``.

    ``auto`` bisects when both laws are strictly decreasing in D and falls
    back to a dense log scan otherwise. Returns None when infeasible.
    """
    problem.check()
    if not (R_CLIP <= r <= 1 - R_CLIP):
        raise ValueError(f"r must lie in [{R_CLIP}, 1-{R_CLIP}]")
    value = _solve(problem, np.array([float(r)]), method)[0]
    return None if np.isnan(value) else float(value)


def _solve(problem: PlanProblem, r: np.ndarray, method: str) -> np.ndarray:
    if method == "auto":
        method = "bisect" if _monotone(problem) else "scan"
    if method == "bisect":
        return _bisect(problem, r)
    if method == "scan":
        return _scan(problem, r)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class PlanResult:
    feasible: bool
    atpp_star: float | None
    r_star: float | None
    N: float
    ptpp: float
    baseline_source_loss: float
    forgetting_allowance: float
    constraints: PlanConstraints
    binding_constraint: str
    src_slack: float | None = None
    tgt_slack: float | None = None
    per_r_atpp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    r_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    landscape_r: np.ndarray = field(default_factory=lambda: np.zeros(0))
    landscape_atpp: np.ndarray = field(default_factory=lambda: np.zeros(0))
    landscape_src_slack: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    landscape_tgt_slack: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    landscape_forgetting: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    landscape_target: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    method: str = "bisect"
    diagnoses: list[str] = field(default_factory=list)

    @property
    def D_star(self) -> float | None:
        return None if self.atpp_star is None else self.atpp_star * self.N

    @property
    def flops(self) -> float | None:
        return None if self.atpp_star is None else flops(self.N, self.atpp_star)

    def to_dict(self) -> dict:
        return {
            "feasible": self.feasible,
            "atpp_star": self.atpp_star,
            "r_star": self.r_star,
            "D_star": self.D_star,
            "flops": self.flops,
            "N": self.N,
            "ptpp": self.ptpp,
            "baseline_source_loss": self.baseline_source_loss,
            "forgetting_allowance_nats": _finite_or_str(self.forgetting_allowance),
            "constraints": {
                "forgetting": _finite_or_str(self.constraints.forgetting),
                "tau": self.constraints.tau,
                "tolerance_mode": self.constraints.mode,
            },
            "binding_constraint": self.binding_constraint,
            "src_slack": None if self.src_slack is None else _finite_or_str(self.src_slack),
            "tgt_slack": self.tgt_slack,
            "method": self.method,
            "diagnoses": self.diagnoses,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    def feasibility_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "atpp", "src_slack", "tgt_slack", "feasible"])
        for i, r in enumerate(self.landscape_r):
            for j, a in enumerate(self.landscape_atpp):
                s, t = self.landscape_src_slack[i, j], self.landscape_tgt_slack[i, j]
                w.writerow([repr(float(r)), repr(float(a)), repr(float(s)), repr(float(t)), int(s >= 0 and t >= 0)])
        return buf.getvalue()

    def forgetting_landscape_csv(self) -> str:
        """Left panel: forgetting (nats) over (replay %, ATPP)."""
        forget = self.landscape_forgetting
        return _landscape_csv(self.landscape_r, self.landscape_atpp, forget, "forgetting_nats",
                              extra=forget / self.baseline_source_loss, extra_name="forgetting_rel")

    def target_landscape_csv(self) -> str:
        """Right panel: target loss over (replay %, ATPP)."""
        return _landscape_csv(self.landscape_r, self.landscape_atpp, self.landscape_target,
                              "target_loss")


def _finite_or_str(v: float):
    # strict JSON has no infinity; an unbounded tolerance is written as "inf"
    return v if math.isfinite(v) else str(v)


def _landscape_csv(r_grid, atpp, values, name, extra=None, extra_name=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replay_pct", "atpp", name] + ([extra_name] if extra is not None else []))
    for i, r in enumerate(r_grid):
        for j, a in enumerate(atpp):
            row = [repr(float(100.0 * r)), repr(float(a)), repr(float(values[i, j]))]
            if extra is not None:
                row.append(repr(float(extra[i, j])))
            w.writerow(row)
    return buf.getvalue()


def plan(problem: PlanProblem, method: str = "auto") -> PlanResult:
    """Minimum ATPP over the replay grid.

    Ties within 1e-9 relative ATPP go to the larger minimum slack, then to the
    smaller ratio. Infeasibility is reported, not raised.
    """
    problem.check()
    chosen = method if method != "auto" else ("bisect" if _monotone(problem) else "scan")
    r = np.asarray(problem.r_grid)
    per_r = _solve(problem, r, chosen)

    atpp_axis = np.geomspace(problem.atpp_min, problem.atpp_max, problem.landscape_atpp_points)
    r_axis = np.linspace(0.0, 1.0, problem.landscape_r_points + 2)[1:-1]
    land_f, land_l = _constraint_values(problem, r_axis[:, None], atpp_axis[None, :])
    land_s, land_t = problem.forgetting_allowance - land_f, problem.constraints.tau - land_l
    base = problem.baseline
    allowance = problem.forgetting_allowance
    common = dict(
        N=problem.N,
        ptpp=problem.ptpp,
        baseline_source_loss=base,
        forgetting_allowance=allowance,
        constraints=problem.constraints,
        per_r_atpp=per_r,
        r_grid=r,
        landscape_r=r_axis,
        landscape_atpp=atpp_axis,
        landscape_src_slack=land_s,
        landscape_tgt_slack=land_t,
        landscape_forgetting=land_f,
        landscape_target=land_l,
        method=chosen,
    )
    ok = ~np.isnan(per_r)
    if not ok.any():
        return PlanResult(feasible=False, atpp_star=None, r_star=None, binding_constraint="none",
                          diagnoses=_diagnose(problem, r), **common)

    best = np.nanmin(per_r)
    tied = np.flatnonzero(ok & (per_r <= best * (1.0 + 1e-9)))
    s, t = slacks(problem, r[tied], per_r[tied])
    min_slack = np.minimum(s, t)
    # larger slack first, then smaller r (r_grid ascending, lexsort is stable)
    order = np.lexsort((r[tied], -min_slack))
    k = tied[order[0]]
    s_k, t_k = (float(v) for v in slacks(problem, r[k], per_r[k]))
    if problem.constraints.mode == "absolute" and math.isinf(allowance):
        binding = "target"
    else:
        binding = _binding(problem, float(r[k]), float(per_r[k]))
    return PlanResult(
        feasible=True,
        atpp_star=float(per_r[k]),
        r_star=float(r[k]),
        binding_constraint=binding,
        src_slack=s_k,
        tgt_slack=t_k,
        **common,
    )


def _binding(problem: PlanProblem, r: float, atpp: float) -> str:
    """Which constraint stops a smaller ATPP: the one violated just below the optimum."""
    if atpp <= problem.atpp_min * (1 + 1e-12):
        return "none"
    below = atpp / (1.0 + 4 * BISECT_REL)
    s, t = (float(v) for v in slacks(problem, r, below))
    if s < 0 and t < 0:
        return "both"
    if s < 0:
        return "forgetting"
    if t < 0:
        return "target"
    return "none"


def _diagnose(problem: PlanProblem, r: np.ndarray) -> list[str]:
    """One line per distinct failure cause across the grid."""
    s, t = slacks(problem, r, np.full(r.shape, problem.atpp_max))
    notes = []
    if np.any(t < 0):
        tgt = problem.tgt_fit
        floor = np.array([asymptotic_loss(tgt.params, tgt.form, problem.N, float(ri), problem.ptpp) for ri in r[t < 0]])
        unreachable = int(np.sum(floor > problem.constraints.tau))
        notes.append(
            f"target loss above tau={problem.constraints.tau:g} at atpp_max for {int(np.sum(t < 0))}/{r.size} ratios"
            f" ({unreachable} have a D->inf floor above tau)"
        )
    if np.any(s < 0):
        notes.append(f"forgetting above allowance at atpp_max for {int(np.sum(s < 0))}/{r.size} ratios")
    return notes


def verify_plan(result: dict, src_fit: FitResult, tgt_fit: FitResult, baseline_measured: float | None = None,
                tol: float = 1e-6) -> dict:
    """Recheck a serialized plan directly through the laws.

    Returns the recomputed forgetting, target loss and slacks; ``ok`` is True
    when both slacks are at least ``-tol`` (or the plan is infeasible).
    """
    if not result["feasible"]:
        return {"ok": True, "feasible": False}
    N, ptpp = result["N"], result["ptpp"]
    x = EvalPoint(N=N, D=result["atpp_star"] * N, r=result["r_star"], ptpp=ptpp)
    c = result["constraints"]
    cons = PlanConstraints(float(c["forgetting"]), float(c["tau"]), c["tolerance_mode"])
    base = baseline_source_loss(src_fit.params, src_fit.form, N, ptpp, measured=baseline_measured)
    dl = forgetting(src_fit, x, baseline_measured)
    tgt = eval_law(tgt_fit.form, tgt_fit.params, x)
    s = cons.allowed_forgetting(base) - dl
    t = cons.tau - tgt
    return {
        "ok": bool(s >= -tol and t >= -tol),
        "feasible": True,
        "forgetting_nats": dl,
        "forgetting_rel": dl / base,
        "target_loss": tgt,
        "src_slack": s,
        "tgt_slack": t,
    }
