"""Memory-constrained (batch, resolution) selection for pre-training.

Memory is modelled as ``c0 + c1 * batch * resolution**2`` and fitted to
profiled records; accuracy is never predicted, only looked up from records.
"""
import csv
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import PlannerError

DEFAULT_BATCHES = (2, 4, 8, 16)
DEFAULT_RESOLUTIONS = (224, 320, 448, 640)


@dataclass(frozen=True)
class MeasurementRecord:
    batch: int
    resolution: int
    memory: float
    time_per_iter: float = float("nan")
    ap: Optional[float] = None

    def __post_init__(self):
        if self.batch <= 0 or self.resolution <= 0:
            raise PlannerError(f"record batch/resolution must be positive: {self}")
        if not self.memory > 0:
            raise PlannerError(f"record memory must be positive: {self}")
        if not (math.isnan(self.time_per_iter) or self.time_per_iter > 0):
            raise PlannerError(f"record time must be positive: {self}")

    @property
    def load(self):
        return self.batch * self.resolution ** 2


@dataclass
class PlannerQuery:
    target_memory: float
    candidate_batches: Sequence[int] = DEFAULT_BATCHES
    candidate_resolutions: Sequence[int] = DEFAULT_RESOLUTIONS
    records: List[MeasurementRecord] = field(default_factory=list)
    base_shape: Tuple[int, int, int, int] = (2, 800, 1333, 3)

    def __post_init__(self):
        if not self.candidate_batches or not self.candidate_resolutions:
            raise PlannerError("candidate grids must be non-empty")
        if any(b <= 0 for b in self.candidate_batches) or any(r <= 0 for r in self.candidate_resolutions):
            raise PlannerError("candidate batches and resolutions must be positive")
        if not self.target_memory > 0:
            raise PlannerError(f"target_memory must be positive, got {self.target_memory}")

    def grid(self):
        return [(int(b), int(r)) for b in self.candidate_batches for r in self.candidate_resolutions]


@dataclass(frozen=True)
class MemoryModel:
    c0: float
    c1: float
    residuals: Tuple[float, ...] = ()

    def predict(self, batch, resolution):
        return self.c0 + self.c1 * batch * resolution ** 2


def fit_memory_model(records) -> MemoryModel:
    """Least-squares fit of ``memory ~ c0 + c1 * b * r^2`` with ``c1 >= 0``."""
    records = list(records)
    loads = np.array([r.load for r in records], dtype=np.float64)
    if len(records) < 2 or len(np.unique(loads)) < 2:
        raise PlannerError("need at least two records with distinct batch*resolution^2 to fit memory")
    mem = np.array([r.memory for r in records], dtype=np.float64)
    # centre the regressor so the two columns are well conditioned
    mu = loads.mean()
    x = loads - mu
    c1 = float(np.dot(x, mem - mem.mean()) / np.dot(x, x))
    if c1 < 0:
        c1 = 0.0
    c0 = float(mem.mean() - c1 * mu)
    resid = mem - (c0 + c1 * loads)
    return MemoryModel(c0, c1, tuple(float(v) for v in resid))


def feasible_configs(query: PlannerQuery, model: MemoryModel):
    """Grid points whose predicted memory fits the budget, cheapest first."""
    out = [(b, r) for b, r in query.grid() if model.predict(b, r) <= query.target_memory]
    out.sort(key=lambda br: (model.predict(*br), br[0], br[1]))
    return out


@dataclass
class RankedConfig:
    batch: int
    resolution: int
    predicted_memory: float
    ap: Optional[float]
    measured: bool
    pareto: bool = False

    def as_dict(self):
        return asdict(self)


def _lookup_ap(records):
    """Mean AP per (batch, resolution) across records that carry one."""
    acc = {}
    for r in records:
        if r.ap is not None and not math.isnan(r.ap):
            acc.setdefault((r.batch, r.resolution), []).append(r.ap)
    return {k: math.fsum(v) / len(v) for k, v in acc.items()}


def rank_configs(feasible, records, model: Optional[MemoryModel] = None):
    """Order feasible configs: measured ones by AP (desc), then the rest by
    ``b * r^2`` (desc). Measured configs on the memory/AP Pareto front are
    flagged."""
    if model is None:
        model = MemoryModel(0.0, 1.0)
    aps = _lookup_ap(records)
    rows = [
        RankedConfig(b, r, model.predict(b, r), aps.get((b, r)), (b, r) in aps)
        for b, r in sorted(set(map(tuple, feasible)))
    ]
    measured = sorted((x for x in rows if x.measured),
                      key=lambda x: (-x.ap, x.predicted_memory, x.batch, x.resolution))
    rest = sorted((x for x in rows if not x.measured),
                  key=lambda x: (-x.batch * x.resolution ** 2, x.batch, x.resolution))
    for x in measured:
        x.pareto = not any(
            y is not x and y.predicted_memory <= x.predicted_memory and y.ap >= x.ap
            and (y.predicted_memory < x.predicted_memory or y.ap > x.ap)
            for y in measured
        )
    return measured + rest


@dataclass
class PlanResult:
    chosen: Optional[Tuple[int, int]]
    model: MemoryModel
    ranked: List[RankedConfig]
    feasible: bool
    target_memory: float

    def as_dict(self):
        return {
            "chosen": list(self.chosen) if self.chosen else None,
            "feasible": self.feasible,
            "target_memory": self.target_memory,
            "memory_model": {"c0": self.model.c0, "c1": self.model.c1, "residuals": list(self.model.residuals)},
            "ranked": [x.as_dict() for x in self.ranked],
        }

    def table(self):
        lines = [f"{'rank':>4} {'batch':>5} {'res':>5} {'pred_mem_GiB':>12} {'ap':>6} {'pareto':>6}"]
        for i, x in enumerate(self.ranked, 1):
            ap = "-" if x.ap is None else f"{x.ap:.1f}"
            lines.append(f"{i:>4} {x.batch:>5} {x.resolution:>5} {x.predicted_memory / 2**30:>12.2f} "
                         f"{ap:>6} {'*' if x.pareto else '':>6}")
        if not self.feasible:
            lines.append("no configuration fits the memory budget")
        return "\n".join(lines)


def grid_search_plan(query: PlannerQuery) -> PlanResult:
    model = fit_memory_model(query.records)
    feasible = feasible_configs(query, model)
    if not feasible:
        return PlanResult(None, model, [], False, query.target_memory)
    ranked = rank_configs(feasible, query.records, model)
    top = ranked[0]
    return PlanResult((top.batch, top.resolution), model, ranked, True, query.target_memory)


_UNITS = {"": 1, "B": 1, "K": 2**10, "M": 2**20, "G": 2**30, "T": 2**40}


def parse_memory(text):
    """``"11G"`` -> bytes (binary units); plain numbers are bytes."""
    s = str(text).strip().upper().removesuffix("IB").removesuffix("B")
    unit = s[-1] if s and s[-1] in _UNITS else ""
    value = float(s[: len(s) - len(unit)] if unit else s)
    if value <= 0:
        raise PlannerError(f"memory must be positive: {text!r}")
    return value * _UNITS[unit]


def read_records(path):
    """Records from a CSV with columns ``batch,resolution,memory,time,ap``."""
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"batch", "resolution", "memory"} - set(reader.fieldnames or ())
        if missing:
            raise PlannerError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ap = row.get("ap", "")
            t = row.get("time", "")
            out.append(MeasurementRecord(
                batch=int(row["batch"]),
                resolution=int(row["resolution"]),
                memory=parse_memory(row["memory"]),
                time_per_iter=float(t) if t not in ("", None) else float("nan"),
                ap=float(ap) if ap not in ("", None) else None,
            ))
    return out
