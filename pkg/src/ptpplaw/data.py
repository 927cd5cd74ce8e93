"""Measurements, datasets and their CSV/JSON ingestion."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .forms import R_CLIP, Features

COLUMNS = ("model_params", "adapt_tokens", "replay_ratio", "ptpp", "domain", "loss", "is_anchor")
REQUIRED = COLUMNS[:-1]
DOMAINS = ("target", "source")


class DataError(ValueError):
    """Raised for malformed or invariant-violating input data."""


def clip_ratio(r: float) -> float:
    return min(max(float(r), R_CLIP), 1.0 - R_CLIP)


@dataclass(frozen=True)
class Measurement:
    N: float
    D: float
    r: float
    ptpp: float
    domain: str
    loss: float
    is_anchor: bool = False

    def __post_init__(self):
        for name in ("N", "D", "r", "ptpp", "loss"):
            if not math.isfinite(getattr(self, name)):
                raise DataError(f"{name} must be finite")
        if self.N <= 0:
            raise DataError(f"model_params must be positive, got {self.N}")
        if self.D < 0:
            raise DataError(f"adapt_tokens must be non-negative, got {self.D}")
        if self.ptpp <= 0:
            raise DataError(f"ptpp must be positive, got {self.ptpp}")
        if not 0.0 <= self.r <= 1.0:
            raise DataError(f"replay_ratio must lie in [0, 1], got {self.r}")
        if self.loss <= 0:
            raise DataError(f"loss must be positive, got {self.loss}")
        if self.domain not in DOMAINS:
            raise DataError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        object.__setattr__(self, "r", clip_ratio(self.r))

    @property
    def key(self) -> tuple:
        return (self.N, self.D, self.r, self.ptpp, self.domain)

    @property
    def atpp(self) -> float:
        return self.D / self.N


@dataclass(frozen=True)
class GridSpec:
    model_sizes: tuple[float, ...]
    replay_ratios: tuple[float, ...]
    ptpp_stages: tuple[float, ...]
    token_points: tuple[float, ...]

    def __post_init__(self):
        for name in ("model_sizes", "replay_ratios", "ptpp_stages", "token_points"):
            values = tuple(float(v) for v in getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be non-empty")
            if any(v <= 0 for v in values):
                raise ValueError(f"{name} must be strictly positive")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, values)


@dataclass(frozen=True)
class Dataset:
    """Immutable, validated collection of measurements in file order."""

    measurements: tuple[Measurement, ...]
    source: str = ""
    _hash: str = field(default="", repr=False, compare=False)

    def __post_init__(self):
        ms = tuple(self.measurements)
        if not ms:
            raise DataError("dataset is empty")
        seen: dict[tuple, int] = {}
        for i, m in enumerate(ms):
            if m.key in seen:
                raise DataError(f"row {i}: duplicate of row {seen[m.key]} for key {m.key}")
            seen[m.key] = i
        object.__setattr__(self, "measurements", ms)
        object.__setattr__(self, "_hash", hashlib.sha256(self.to_csv().encode()).hexdigest())

    def __len__(self) -> int:
        return len(self.measurements)

    def __iter__(self) -> Iterator[Measurement]:
        return iter(self.measurements)

    @property
    def content_hash(self) -> str:
        """SHA-256 of the canonical CSV rendering."""
        return self._hash

    @property
    def provenance(self) -> dict:
        return {"source": self.source, "sha256": self.content_hash}

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.measurements], dtype=float)

    @property
    def loss(self) -> np.ndarray:
        return self.column("loss")

    def features(self) -> Features:
        return Features(self.column("N"), self.column("D"), self.column("r"), self.column("ptpp"))

    @property
    def domains(self) -> set[str]:
        return {m.domain for m in self.measurements}

    @property
    def stages(self) -> set[float]:
        return {m.ptpp for m in self.measurements}

    def select(
        self,
        domain: str | None = None,
        stages: Iterable[float] | None = None,
        anchor: bool | None = None,
        predicate=None,
    ) -> "Dataset":
        stage_set = None if stages is None else {float(s) for s in stages}
        kept = [
            m
            for m in self.measurements
            if (domain is None or m.domain == domain)
            and (stage_set is None or m.ptpp in stage_set)
            and (anchor is None or m.is_anchor == anchor)
            and (predicate is None or predicate(m))
        ]
        if not kept:
            raise DataError(f"no measurements match domain={domain!r} stages={stages} anchor={anchor}")
        return Dataset(tuple(kept), source=self.source)

    def exclude(self, other: "Dataset") -> "Dataset":
        drop = {m.key for m in other}
        return Dataset(tuple(m for m in self.measurements if m.key not in drop), source=self.source)

    def to_rows(self) -> list[dict]:
        return [
            {
                "model_params": m.N,
                "adapt_tokens": m.D,
                "replay_ratio": m.r,
                "ptpp": m.ptpp,
                "domain": m.domain,
                "loss": m.loss,
                "is_anchor": int(m.is_anchor),
            }
            for m in self.measurements
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.to_rows():
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.to_rows(), indent=1)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        text = self.to_json() if path.suffix.lower() == ".json" else self.to_csv()
        path.write_text(text, encoding="utf-8")


class Split(NamedTuple):
    train: Dataset
    eval: Dataset
    dropped: int


def _parse_rows(rows: Sequence[Mapping], columns: Mapping[str, str], source: str) -> Dataset:
    out = []
    for i, row in enumerate(rows):
        def cell(name: str, default=None):
            key = columns.get(name, name)
            value = row.get(key, default)
            if value is None or (isinstance(value, str) and value.strip() == ""):
                if default is not None:
                    return default
                raise DataError(f"row {i}: empty value in column {key!r}")
            return value

        def number(name: str) -> float:
            value = cell(name)
            try:
                out_value = float(value)
            except (TypeError, ValueError):
                raise DataError(f"row {i}: non-numeric value {value!r} in column {columns.get(name, name)!r}") from None
            if isinstance(value, bool):
                raise DataError(f"row {i}: non-numeric value {value!r} in column {columns.get(name, name)!r}")
            return out_value

        anchor_raw = cell("is_anchor", default="0")
        if str(anchor_raw).strip().lower() in ("1", "1.0", "true"):
            anchor = True
        elif str(anchor_raw).strip().lower() in ("0", "0.0", "false"):
            anchor = False
        else:
            raise DataError(f"row {i}: is_anchor must be 0 or 1, got {anchor_raw!r}")
        try:
            out.append(
                Measurement(
                    N=number("model_params"),
                    D=number("adapt_tokens"),
                    r=number("replay_ratio"),
                    ptpp=number("ptpp"),
                    domain=str(cell("domain")).strip().lower(),
                    loss=number("loss"),
                    is_anchor=anchor,
                )
            )
        except DataError as exc:
            if str(exc).startswith("row "):
                raise
            raise DataError(f"row {i}: {exc}") from None
    return Dataset(tuple(out), source=source)


def load_dataset(path: str | Path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a measurement table from CSV, or from JSON when the suffix is ``.json``.

    ``schema`` maps canonical column names to the names used in the file.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    columns = dict(schema or {})
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(rows, list) or not all(isinstance(r, dict) for r in rows):
            raise DataError(f"{path}: expected a JSON array of objects")
        present = set().union(*(r.keys() for r in rows)) if rows else set()
    else:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None:
            raise DataError(f"{path}: missing header row")
        present = {f.strip() for f in reader.fieldnames}
        rows = [{(k or "").strip(): v for k, v in row.items()} for row in reader]
    missing = [c for c in REQUIRED if columns.get(c, c) not in present]
    if missing:
        raise DataError(f"{path}: missing required columns {missing}")
    return _parse_rows(rows, columns, source=str(path))


def split_by_ptpp(ds: Dataset, train_stages: Iterable[float], eval_stages: Iterable[float]) -> Split:
    train_set = {float(s) for s in train_stages}
    eval_set = {float(s) for s in eval_stages}
    if not train_set or not eval_set:
        raise DataError("stage sets must be non-empty")
    overlap = train_set & eval_set
    if overlap:
        raise DataError(f"train and eval stages overlap: {sorted(overlap)}")
    present = ds.stages
    for stage in sorted(train_set | eval_set):
        if stage not in present:
            raise DataError(f"stage ptpp={stage:g} not present in dataset")
    train = ds.select(stages=train_set)
    held = ds.select(stages=eval_set)
    return Split(train, held, len(ds) - len(train) - len(held))


def extract_grid(ds: Dataset) -> GridSpec:
    return GridSpec(
        model_sizes=tuple(sorted({m.N for m in ds})),
        replay_ratios=tuple(sorted({m.r for m in ds})),
        ptpp_stages=tuple(sorted({m.ptpp for m in ds})),
        token_points=tuple(sorted({m.D for m in ds if m.D > 0})),
    )
