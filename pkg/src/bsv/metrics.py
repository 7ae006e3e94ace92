"""Volume error metrics, per-condition aggregation and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .scan import ErrorCondition
from .segments import SegmentLabel

SCHEMA = "bsv.volume_report/1"
WHOLE_BODY = "Full-body"
BODY_DENSITY = 1000.0


def rve(v_est: float, v_gt: float) -> float:
    """Relative volume error in percent."""
    if not v_gt > 0:
        raise ValueError("ground-truth volume must be positive, got %r" % v_gt)
    return abs(v_est - v_gt) / v_gt * 100.0


def accuracy(rve_percent: float) -> float:
    if rve_percent < 0:
        raise ValueError("RVE must be >= 0")
    return 100.0 - rve_percent


def rme(v_est: float, real_mass: float, density: float = BODY_DENSITY) -> float:
    """Relative mass error in percent, estimating mass as volume times density."""
    if not real_mass > 0:
        raise ValueError("mass must be positive, got %r" % real_mass)
    return abs(v_est * density - real_mass) / real_mass * 100.0


def segment_name(seg) -> str:
    if isinstance(seg, str):
        return seg
    return SegmentLabel(int(seg)).pretty


def segment_order(name: str) -> int:
    if name == WHOLE_BODY:
        return -1
    for s in SegmentLabel:
        if s.pretty == name:
            return int(s)
    return 1000


@dataclass
class SegmentEntry:
    name: str
    volume: Optional[float]
    gt_volume: Optional[float] = None
    rve: Optional[float] = None
    error: Optional[str] = None

    def __post_init__(self):
        if self.rve is None and self.volume is not None and self.gt_volume is not None:
            self.rve = rve(self.volume, self.gt_volume)
        if self.rve is not None and self.gt_volume is None:
            raise ValueError("RVE requires a ground-truth volume")


@dataclass
class VolumeReport:
    condition: ErrorCondition
    whole_body: SegmentEntry
    segments: List[SegmentEntry] = field(default_factory=list)
    subject: str = ""
    seed: Optional[int] = None
    mass: Optional[float] = None

    @property
    def rme(self) -> Optional[float]:
        if self.mass is None or self.whole_body.volume is None:
            return None
        return rme(self.whole_body.volume, self.mass)

    def entries(self) -> List[SegmentEntry]:
        return [self.whole_body] + list(self.segments)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "subject": self.subject,
            "condition": self.condition.display,
            "seed": self.seed,
            "mass_kg": self.mass,
            "rme_percent": self.rme,
            "entries": [{"segment": e.name, "volume_m3": e.volume, "gt_volume_m3": e.gt_volume,
                         "rve_percent": e.rve, "error": e.error} for e in self.entries()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeReport":
        if d.get("schema") != SCHEMA:
            raise ValueError("unsupported report schema %r" % d.get("schema"))
        ents = [SegmentEntry(e["segment"], e["volume_m3"], e["gt_volume_m3"], e["rve_percent"], e.get("error"))
                for e in d["entries"]]
        cond = ErrorCondition.parse(d["condition"])
        return cls(cond, ents[0], ents[1:], d.get("subject", ""), d.get("seed"), d.get("mass_kg"))


def write_report_json(path, report: VolumeReport):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)


def read_report_json(path) -> VolumeReport:
    with open(path) as fh:
        return VolumeReport.from_dict(json.load(fh))


def write_report_csv(path, report: VolumeReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "volume_m3", "gt_volume_m3", "rve_percent", "error"])
        for e in report.entries():
            w.writerow([e.name, _fmt(e.volume), _fmt(e.gt_volume), _fmt(e.rve), e.error or ""])


def _fmt(x):
    return "" if x is None else repr(float(x))


@dataclass(frozen=True)
class AggregateRow:
    segment: str
    condition: ErrorCondition
    n: int
    mean: float
    std: float


_COND_ORDER = {c: i for i, c in enumerate(ErrorCondition)}


def aggregate(reports: Sequence[VolumeReport]) -> List[AggregateRow]:
    """Mean and sample standard deviation of RVE per (segment, condition).

    Rows are ordered by segment (whole body first, then label order) and then
    by condition. Groups of one report get std 0.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    groups: Dict[tuple, list] = {}
    for r in reports:
        for e in r.entries():
            if e.rve is None:
                continue
            groups.setdefault((e.name, r.condition), []).append(e.rve)
    rows = []
    for (name, cond), vals in groups.items():
        a = np.asarray(vals, dtype=np.float64)
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        rows.append(AggregateRow(name, cond, len(a), float(a.mean()), std))
    rows.sort(key=lambda r: (segment_order(r.segment), r.segment, _COND_ORDER[r.condition]))
    return rows


def write_aggregate_csv(path, rows: Iterable[AggregateRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "condition", "n", "mean_rve_percent", "std_rve_percent"])
        for r in rows:
            w.writerow([r.segment, r.condition.display, r.n, "%.6f" % r.mean, "%.6f" % r.std])
