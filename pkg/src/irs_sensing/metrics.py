"""Detection metrics at the 0.5 decision threshold and their aggregation.

Undefined rates (no busy entries for Pd, no idle entries for Pfa) are NaN in
memory and an empty field in CSV output, never 0.
"""

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

CSV_COLUMNS = ["scheme", "snr_db", "round", "seed_count", "accuracy", "pd", "pfa", "mean_loss",
               "bytes_exchanged"]


def _pair(decisions, labels):
    d = np.asarray(decisions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if d.shape != y.shape:
        raise ValueError(f"decision shape {d.shape} != label shape {y.shape}")
    return d, y


def accuracy(decisions, labels):
    """Fraction of (sample, band) entries where the decision matches the label."""
    d, y = _pair(decisions, labels)
    if d.size == 0:
        raise ValueError("accuracy of an empty evaluation set")
    return float(np.mean(d == y))


def pd(decisions, labels):
    """P(decide busy | busy); NaN when nothing is busy."""
    d, y = _pair(decisions, labels)
    pos = y.sum()
    return float((d & y).sum() / pos) if pos else math.nan


def pfa(decisions, labels):
    """P(decide busy | idle); NaN when nothing is idle."""
    d, y = _pair(decisions, labels)
    neg = (~y).sum()
    return float((d & ~y).sum() / neg) if neg else math.nan


def check_consistency(decisions, labels, tol=1e-12):
    """Verify ``accuracy == pd * P1 + (1 - pfa) * P0`` on one evaluation set.

    Undefined rates drop out because their prior is then zero.
    """
    d, y = _pair(decisions, labels)
    p1 = float(y.mean())
    acc = accuracy(d, y)
    rate_pd, rate_pfa = pd(d, y), pfa(d, y)
    rhs = (rate_pd * p1 if p1 > 0 else 0.0) + ((1 - rate_pfa) * (1 - p1) if p1 < 1 else 0.0)
    if abs(acc - rhs) > tol:
        raise ArithmeticError(f"accuracy {acc} disagrees with pd/pfa decomposition {rhs}")
    return acc


@dataclass
class MetricsRecord:
    scheme: str
    snr_db: float
    round: int
    seed_count: int
    accuracy: float
    pd: float
    pfa: float
    mean_loss: float
    bytes_exchanged: int = 0


def aggregate(rows, keys=("scheme", "snr_db", "round")):
    """Average per-seed rows into one :class:`MetricsRecord` per group.

    ``rows`` are mappings with the group keys plus the metric fields. NaN
    rates are skipped when averaging; a group with no defined value stays NaN.
    Output is sorted by scheme, SNR, then round.
    """
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(r)
    out = []
    for _, rs in groups.items():
        def mean(field):
            vals = [r[field] for r in rs if not _isnan(r[field])]
            return float(np.mean(vals)) if vals else math.nan
        out.append(MetricsRecord(
            scheme=rs[0]["scheme"], snr_db=rs[0]["snr_db"], round=rs[0]["round"],
            seed_count=len(rs), accuracy=mean("accuracy"), pd=mean("pd"), pfa=mean("pfa"),
            mean_loss=mean("mean_loss"),
            bytes_exchanged=int(round(np.mean([r.get("bytes_exchanged", 0) for r in rs])))))
    out.sort(key=lambda m: (m.scheme, m.snr_db, m.round))
    return out


def _isnan(v):
    return isinstance(v, float) and math.isnan(v)


def fmt(v):
    """CSV cell text: fixed precision floats, empty for NaN."""
    if v is None or _isnan(v):
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def write_records(records, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            d = asdict(rec)
            w.writerow([fmt(d[c]) for c in CSV_COLUMNS])


def read_records(path):
    recs = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            def num(s):
                return float(s) if s != "" else math.nan
            recs.append(MetricsRecord(row["scheme"], float(row["snr_db"]), int(row["round"]),
                                      int(row["seed_count"]), num(row["accuracy"]), num(row["pd"]),
                                      num(row["pfa"]), num(row["mean_loss"]),
                                      int(row["bytes_exchanged"])))
    return recs
