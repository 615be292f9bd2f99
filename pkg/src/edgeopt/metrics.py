"""Evaluation metrics: accuracy, loyalty, exit rate, latency split, speed-up.

Raw values keep full precision; :func:`round2` (half-up) is for display.
Empty latency buckets are ``None`` in memory and the token ``"n/a"`` on disk.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import List, Optional, Sequence

import numpy as np

from .errors import EmptyRecords, InvalidDistribution, LengthMismatch, ZeroSize

NA = "n/a"
DIST_TOL = 1e-5


def round2(x: float) -> float:
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalRecord:
    label: int
    probs: np.ndarray
    exit_index: int = 0
    final_index: int = 0
    latency: float = 0.0
    macs: int = 0

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def early(self) -> bool:
        return self.exit_index != self.final_index


def _nonempty(records):
    if len(records) == 0:
        raise EmptyRecords("no evaluation records")


def _paired(a, b):
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} records")
    _nonempty(a)


def accuracy(records: Sequence[EvalRecord]) -> float:
    _nonempty(records)
    return 100.0 * sum(r.predicted == r.label for r in records) / len(records)


def label_loyalty(opt: Sequence[EvalRecord], base: Sequence[EvalRecord]) -> float:
    _paired(opt, base)
    return 100.0 * sum(a.predicted == b.predicted for a, b in zip(opt, base)) / len(opt)


def check_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) \
            or abs(p.sum() - 1.0) > DIST_TOL:
        raise InvalidDistribution(f"not a probability vector: {p}")
    return p


def _kl_bits(p, m):
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def jsd_bits(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs, in [0, 1]."""
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise InvalidDistribution(f"shape mismatch {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return min(max(0.5 * _kl_bits(p, m) + 0.5 * _kl_bits(q, m), 0.0), 1.0)


def sample_probability_loyalty(p, q) -> float:
    return 1.0 - math.sqrt(jsd_bits(p, q))


def probability_loyalty(opt: Sequence[EvalRecord], base: Sequence[EvalRecord]) -> float:
    _paired(opt, base)
    return 100.0 * float(np.mean([sample_probability_loyalty(b.probs, a.probs) for a, b in zip(opt, base)]))


def compression_rate(base_bytes: float, opt_bytes: float) -> float:
    if base_bytes <= 0 or opt_bytes <= 0:
        raise ZeroSize("model sizes must be positive")
    return base_bytes / opt_bytes


def early_exit_rate(records: Sequence[EvalRecord]) -> float:
    _nonempty(records)
    return 100.0 * sum(r.early for r in records) / len(records)


def latency_stats(records: Sequence[EvalRecord]) -> dict:
    """Total seconds, mean milliseconds, and the early/final bucket means (None if empty)."""
    _nonempty(records)
    total = sum(r.latency for r in records)
    early = [r.latency for r in records if r.early]
    final = [r.latency for r in records if not r.early]
    return {
        "total_s": total,
        "avg_ms": 1000.0 * total / len(records),
        "early_avg_ms": 1000.0 * sum(early) / len(early) if early else None,
        "final_avg_ms": 1000.0 * sum(final) / len(final) if final else None,
    }


def speed_up(baseline, variant) -> float:
    """Baseline total time over variant total time.  Accepts summaries or seconds."""
    b = baseline.total_time_s if isinstance(baseline, MetricsSummary) else float(baseline)
    v = variant.total_time_s if isinstance(variant, MetricsSummary) else float(variant)
    if b <= 0 or v <= 0:
        raise ZeroSize("total times must be positive")
    return b / v


COLUMNS = (
    "model", "size_bytes", "compression", "accuracy", "label_loyalty", "prob_loyalty",
    "early_exit_rate", "threshold", "expected_macs", "total_time_s", "avg_time_ms",
    "early_avg_ms", "final_avg_ms", "speed_up", "peak_rss_kb",
)
TIMING_FIELDS = frozenset({
    "total_time_s", "avg_time_ms", "early_avg_ms", "final_avg_ms", "speed_up", "peak_rss_kb",
    "mean_latency_ms", "segment_latencies",
})


@dataclass
class MetricsSummary:
    model: str
    accuracy: float
    size_bytes: int = 0
    compression: float = 1.0
    label_loyalty: Optional[float] = None
    prob_loyalty: Optional[float] = None
    early_exit_rate: Optional[float] = None
    threshold: Optional[float] = None
    expected_macs: float = 0.0
    total_time_s: float = 0.0
    avg_time_ms: float = 0.0
    early_avg_ms: Optional[float] = None
    final_avg_ms: Optional[float] = None
    speed_up: float = 1.0
    peak_rss_kb: Optional[int] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (NA if d[k] is None else d[k]) for k in COLUMNS}

    def display_row(self) -> dict:
        row = self.to_dict()
        for k, v in row.items():
            if isinstance(v, float) and k not in ("threshold",):
                row[k] = round2(v)
        return row


def summarize(model: str, records: Sequence[EvalRecord], base_records: Optional[Sequence[EvalRecord]] = None,
              base_bytes: Optional[int] = None, size_bytes: Optional[int] = None,
              baseline_total_s: Optional[float] = None, cascade: bool = False,
              threshold: Optional[float] = None, peak_rss_kb: Optional[int] = None) -> MetricsSummary:
    lat = latency_stats(records)
    s = MetricsSummary(
        model=model,
        accuracy=accuracy(records),
        size_bytes=int(size_bytes or 0),
        compression=compression_rate(base_bytes, size_bytes) if base_bytes and size_bytes else 1.0,
        early_exit_rate=early_exit_rate(records) if cascade else None,
        threshold=threshold,
        expected_macs=float(np.mean([r.macs for r in records])),
        total_time_s=lat["total_s"],
        avg_time_ms=lat["avg_ms"],
        early_avg_ms=lat["early_avg_ms"],
        final_avg_ms=lat["final_avg_ms"],
        peak_rss_kb=peak_rss_kb,
    )
    if base_records is not None:
        s.label_loyalty = label_loyalty(records, base_records)
        s.prob_loyalty = probability_loyalty(records, base_records)
    if baseline_total_s:
        s.speed_up = speed_up(baseline_total_s, lat["total_s"]) if lat["total_s"] > 0 else 1.0
    return s


def summaries_to_json(rows: List[MetricsSummary]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2)


def summaries_to_csv(rows: List[MetricsSummary], display=False) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(COLUMNS), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.display_row() if display else r.to_dict())
    return buf.getvalue()


def strip_timing(obj):
    """Drop wall-clock fields recursively so reports can be compared byte-wise."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj
