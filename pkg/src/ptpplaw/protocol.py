"""Train-on-early-stages / forecast-at-unseen-stage experiments."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import DataError, Dataset, GridSpec
from .fitting import FitConfig, FitResult, fit, fit_with_anchors
from .forms import ALL_FORMS, LawForm
from .metrics import MetricsReport, metrics_report, sci

METRIC_KEYS = ("huber_log", "rmse_log", "mae_rel", "mape_clip", "intercept", "slope")
_HEADERS = {
    "huber_log": "Huber_log",
    "rmse_log": "RMSE_log",
    "mae_rel": "MAE_rel",
    "mape_clip": "MAPE_clip",
    "intercept": "Interc.",
    "slope": "Slope",
}


@dataclass(frozen=True)
class AnchorPolicy:
    kind: str = "none"
    n_anchors: int = 20
    model_size: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "from-flags", "auto"):
            raise ValueError(f"unknown anchor policy {self.kind!r}")
        if self.kind == "auto" and self.n_anchors < 1:
            raise ValueError("auto anchor policy needs n_anchors >= 1")

    @classmethod
    def parse(cls, text: str | None) -> "AnchorPolicy":
        """``none``, ``flags`` or ``auto:<n>[@<model_size>]``."""
        if text is None or text.strip().lower() in ("", "none"):
            return cls()
        t = text.strip().lower()
        if t in ("flags", "from-flags"):
            return cls(kind="from-flags")
        if t.startswith("auto"):
            rest = t[4:].lstrip(":")
            size = None
            if "@" in rest:
                rest, size_txt = rest.split("@", 1)
                size = float(size_txt)
            return cls(kind="auto", n_anchors=int(rest) if rest else 20, model_size=size)
        raise ValueError(f"cannot parse anchor policy {text!r}; use none, flags or auto:<n>")

    def describe(self) -> str:
        if self.kind == "auto":
            where = "smallest N" if self.model_size is None else f"N={self.model_size:g}"
            return f"auto:{self.n_anchors} at {where}"
        return self.kind


@dataclass(frozen=True)
class ExperimentSpec:
    train_stages: tuple[float, ...] = (15.0, 31.0)
    eval_stages: tuple[float, ...] = (279.0,)
    forms: tuple[LawForm, ...] = ALL_FORMS
    domain: str = "target"
    anchor_policy: AnchorPolicy = field(default_factory=AnchorPolicy)
    fit_config: FitConfig = field(default_factory=FitConfig)
    huber_delta: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "train_stages", tuple(sorted(float(s) for s in self.train_stages)))
        object.__setattr__(self, "eval_stages", tuple(sorted(float(s) for s in self.eval_stages)))
        object.__setattr__(self, "forms", tuple(LawForm.parse(f) for f in self.forms))
        if set(self.train_stages) & set(self.eval_stages):
            raise ValueError("train and eval stages must be disjoint")
        if not self.forms:
            raise ValueError("at least one form is required")


@dataclass(frozen=True)
class TableRow:
    form: LawForm
    variant: str
    metrics: MetricsReport
    best: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[TableRow, ...]
    mode: str = "transfer"
    domain: str = "target"
    train_stages: tuple[float, ...] = ()
    eval_stages: tuple[float, ...] = ()
    anchors: str = "none"

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.rows))

    @property
    def forms(self) -> list[LawForm]:
        return list(dict.fromkeys(r.form for r in self.rows))

    def row(self, form, variant: str | None = None) -> TableRow:
        form = LawForm.parse(form)
        variant = variant or self.variants[0]
        for r in self.rows:
            if r.form == form and r.variant == variant:
                return r
        raise KeyError((form.value, variant))

    def best_form(self, metric: str = "huber_log", variant: str | None = None) -> LawForm:
        variant = variant or self.variants[0]
        winners = [r.form for r in self.rows if r.variant == variant and metric in r.best]
        return winners[0]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "domain": self.domain,
            "train_stages": list(self.train_stages),
            "eval_stages": list(self.eval_stages),
            "anchors": self.anchors,
            "rows": [
                {
                    "form": r.form.value,
                    "label": r.form.label,
                    "variant": r.variant,
                    "metrics": r.metrics.to_dict(),
                    "best": sorted(r.best),
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ComparisonTable":
        return cls(
            rows=tuple(
                TableRow(
                    form=LawForm.parse(r["form"]),
                    variant=r["variant"],
                    metrics=MetricsReport.from_dict(r["metrics"]),
                    best=frozenset(r.get("best", ())),
                )
                for r in data["rows"]
            ),
            mode=data.get("mode", "transfer"),
            domain=data.get("domain", "target"),
            train_stages=tuple(data.get("train_stages", ())),
            eval_stages=tuple(data.get("eval_stages", ())),
            anchors=data.get("anchors", "none"),
        )

    def to_text(self) -> str:
        """Aligned table; variants side by side, best cells starred."""
        variants = self.variants
        name_w = max(len("Formulation"), *(len(f.label) for f in self.forms))
        cell_w = 11
        lines = []
        if len(variants) > 1:
            group = " " * name_w
            for v in variants:
                group += " | " + v.center(len(METRIC_KEYS) * (cell_w + 1) - 1)
            lines.append(group)
        head = "Formulation".ljust(name_w)
        for _ in variants:
            head += " | " + " ".join(_HEADERS[k].rjust(cell_w) for k in METRIC_KEYS)
        lines.append(head)
        lines.append("-" * len(head))
        for form in self.forms:
            line = form.label.ljust(name_w)
            for v in variants:
                row = self.row(form, v)
                cells = []
                for k in METRIC_KEYS:
                    value = getattr(row.metrics, k)
                    txt = f"{value:.3f}" if k in ("intercept", "slope") else sci(value)
                    cells.append((txt + ("*" if k in row.best else " ")).rjust(cell_w))
                line += " | " + " ".join(cells)
            lines.append(line)
        title = f"{self.domain} @ ptpp={','.join(f'{s:g}' for s in self.eval_stages)} [{self.mode}]"
        if self.mode == "transfer":
            title += f" trained on ptpp={{{','.join(f'{s:g}' for s in self.train_stages)}}}"
        elif self.mode == "oracle":
            title += " (upper-bound reference, not a forecast)"
        return title + "\n" + "\n".join(lines) + "\n"


def _flag_best(rows: Sequence[TableRow]) -> tuple[TableRow, ...]:
    out = []
    by_variant: dict[str, list[TableRow]] = {}
    for r in rows:
        by_variant.setdefault(r.variant, []).append(r)
    winners: dict[tuple[str, str], int] = {}
    for variant, group in by_variant.items():
        for k in METRIC_KEYS:
            if k == "intercept":
                scores = [abs(r.metrics.intercept) for r in group]
            elif k == "slope":
                scores = [abs(r.metrics.slope - 1.0) for r in group]
            else:
                scores = [getattr(r.metrics, k) for r in group]
            winners[(variant, k)] = id(group[int(np.argmin(scores))])
    for r in rows:
        best = frozenset(k for k in METRIC_KEYS if winners[(r.variant, k)] == id(r))
        out.append(TableRow(r.form, r.variant, r.metrics, best))
    return tuple(out)


def select_anchors(ds: Dataset, stage: float, policy: AnchorPolicy, domain: str | None = None) -> Dataset:
    """Pick anchor measurements at an evaluation stage.

    ``from-flags`` returns rows marked ``is_anchor``. ``auto`` works at the
    smallest model size (or ``policy.model_size``): replay ratios are visited
    round-robin in ascending order, and within a ratio the chosen D values sit
    at evenly spaced rank positions.
    """
    stage = float(stage)
    if stage not in ds.stages:
        raise DataError(f"stage ptpp={stage:g} not present in dataset")
    pool = ds.select(domain=domain, stages=[stage])
    if policy.kind == "none":
        raise ValueError("anchor policy 'none' selects nothing")
    if policy.kind == "from-flags":
        flagged = [m for m in pool if m.is_anchor]
        if not flagged:
            raise DataError(f"no measurements flagged as anchors at ptpp={stage:g}")
        return Dataset(tuple(flagged), source=ds.source)

    size = min(m.N for m in pool) if policy.model_size is None else float(policy.model_size)
    candidates = [m for m in pool if m.N == size]
    if len(candidates) < policy.n_anchors:
        raise DataError(
            f"auto anchors: {policy.n_anchors} requested but only {len(candidates)} candidates at N={size:g}"
        )
    ratios = sorted({m.r for m in candidates})
    by_ratio = {r: sorted((m for m in candidates if m.r == r), key=lambda m: m.D) for r in ratios}
    quota = {r: 0 for r in ratios}
    remaining = policy.n_anchors
    while remaining:
        progressed = False
        for r in ratios:
            if remaining and quota[r] < len(by_ratio[r]):
                quota[r] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    chosen = []
    for r in ratios:
        pts, k = by_ratio[r], quota[r]
        idx = [int((i + 0.5) * len(pts) / k) for i in range(k)]
        chosen.extend(pts[i] for i in idx)
    return Dataset(tuple(chosen), source=ds.source)


@dataclass
class ExperimentResult:
    table: ComparisonTable
    fits: dict[tuple[str, str], FitResult]
    predictions: dict[tuple[str, str], np.ndarray]
    eval_set: Dataset
    anchors: Dataset | None
    audit: dict

    def fits_to_dict(self) -> dict:
        return {f"{form}/{variant}": fr.to_dict() for (form, variant), fr in self.fits.items()}


def _predict(fr: FitResult, ds: Dataset) -> np.ndarray:
    return fr.predict(ds.column("N"), ds.column("D"), ds.column("r"), ds.column("ptpp"))


def run_experiment(ds: Dataset, spec: ExperimentSpec) -> ExperimentResult:
    """Fit each form on the training stages and score it on the held-out stages."""
    scoped = ds.select(domain=spec.domain)
    for stage in spec.train_stages + spec.eval_stages:
        if stage not in scoped.stages:
            raise DataError(f"stage ptpp={stage:g} has no {spec.domain} measurements")
    train = scoped.select(stages=spec.train_stages)
    held = scoped.select(stages=spec.eval_stages)

    anchors = None
    variants = ["no-anchors"]
    if spec.anchor_policy.kind != "none":
        picked = [select_anchors(scoped, s, spec.anchor_policy) for s in spec.eval_stages]
        anchors = Dataset(tuple(m for a in picked for m in a), source=ds.source)
        held = held.exclude(anchors)
        variants.append("anchors")
    if len(held) == 0:
        raise DataError("evaluation slice is empty")

    eval_keys = {m.key for m in held}
    anchor_keys = set() if anchors is None else {m.key for m in anchors}
    leaked = [m.key for m in train if m.key in eval_keys]
    if leaked:
        raise AssertionError(f"evaluation points leaked into training: {leaked[:3]}")

    rows, fits, preds = [], {}, {}
    for variant in variants:
        for form in spec.forms:
            if variant == "anchors":
                fr = fit_with_anchors(train, anchors, form, spec.fit_config)
            else:
                fr = fit(train, form, spec.fit_config)
            p = _predict(fr, held)
            fits[(form.value, variant)] = fr
            preds[(form.value, variant)] = p
            rows.append(TableRow(form, variant, metrics_report(p, held.loss, spec.huber_delta)))

    audit = {
        "train_points": len(train),
        "anchor_points": len(anchor_keys),
        "eval_points": len(held),
        "eval_points_in_fit": len(leaked) + len(anchor_keys & eval_keys),
    }
    table = ComparisonTable(
        rows=_flag_best(rows),
        mode="transfer",
        domain=spec.domain,
        train_stages=spec.train_stages,
        eval_stages=spec.eval_stages,
        anchors=spec.anchor_policy.describe(),
    )
    return ExperimentResult(table, fits, preds, held, anchors, audit)


@dataclass
class OracleResult:
    fit: FitResult
    metrics: MetricsReport
    stage: float
    domain: str
    mode: str = "oracle"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "note": "fit and evaluated on the same stage; upper-bound reference only",
            "stage": self.stage,
            "domain": self.domain,
            "fit": self.fit.to_dict(),
            "metrics": self.metrics.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def run_oracle(
    ds: Dataset,
    stage: float,
    form=LawForm.DCPT_BASELINE,
    fit_config: FitConfig | None = None,
    domain: str = "target",
    huber_delta: float = 0.02,
) -> OracleResult:
    """Fit directly on one stage and score in-sample on that same stage."""
    stage = float(stage)
    if stage not in ds.stages:
        raise DataError(f"stage ptpp={stage:g} not present in dataset")
    slice_ = ds.select(domain=domain, stages=[stage])
    fr = fit(slice_, form, fit_config)
    report = metrics_report(_predict(fr, slice_), slice_.loss, huber_delta)
    return OracleResult(fr, report, stage, domain)


def oracle_table(
    ds: Dataset, stage: float, forms: Iterable = (LawForm.DCPT_BASELINE,), fit_config: FitConfig | None = None,
    domain: str = "target",
) -> tuple[ComparisonTable, dict[str, OracleResult]]:
    results = {LawForm.parse(f).value: run_oracle(ds, stage, f, fit_config, domain) for f in forms}
    rows = [TableRow(LawForm.parse(k), "oracle", r.metrics) for k, r in results.items()]
    table = ComparisonTable(
        rows=_flag_best(rows), mode="oracle", domain=domain, eval_stages=(float(stage),), anchors="none"
    )
    return table, results


@dataclass(frozen=True)
class GridPrediction:
    N: np.ndarray
    D: np.ndarray
    r: np.ndarray
    ptpp: np.ndarray
    loss: np.ndarray

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_params", "adapt_tokens", "atpp", "replay_ratio", "ptpp", "predicted_loss"])
        for row in zip(self.N, self.D, self.D / self.N, self.r, self.ptpp, self.loss):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def predict_grid(fr: FitResult, grid: GridSpec, stage: float, atpp_points: Sequence[float] | None = None) -> GridPrediction:
    """Dense predictions over (N, r, D) at one stage.

    Rows vary D fastest, then r, then N. With ``atpp_points`` the token axis is
    ``atpp * N`` per model size instead of ``grid.token_points``.
    """
    rows = []
    for N in grid.model_sizes:
        tokens = [a * N for a in atpp_points] if atpp_points is not None else grid.token_points
        for r in grid.replay_ratios:
            rows.extend((N, D, r) for D in tokens)
    if not rows:
        raise ValueError("empty grid")
    arr = np.array(rows, dtype=float)
    stage_arr = np.full(len(arr), float(stage))
    loss = fr.predict(arr[:, 0], arr[:, 1], arr[:, 2], stage_arr)
    return GridPrediction(arr[:, 0], arr[:, 1], arr[:, 2], stage_arr, loss)
