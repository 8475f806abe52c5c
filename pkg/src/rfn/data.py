"""Irregular multivariate time series: instances, datasets, CSV I/O and splits.

On disk a dataset is a CSV with header ``instance_id,time,x_1..x_D,m_1..m_D``
(one row per instance and event time) plus a JSON manifest next to it holding
D, T, the standardization constants and the split assignment.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

DATA_SCHEMA = "rfn.dataset/v1"
SPLITS = ("train", "valid", "test")


class DataFormatError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


@dataclass(frozen=True, eq=False)
class Instance:
    """One sample path: ``times`` (K,), ``values`` (D, K), ``mask`` (D, K)."""

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    instance_id: str = "0"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        mask = np.atleast_2d(np.asarray(self.mask, dtype=np.float64))
        if values.shape != mask.shape or values.shape[1] != times.size:
            raise ValueError(
                f"shape mismatch: times {times.shape}, values {values.shape}, mask {mask.shape}")
        if times.size == 0:
            raise ValueError("instance has no events")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if times[0] < 0:
            raise ValueError("times must be non-negative")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if np.any(mask.sum(axis=0) == 0):
            raise ValueError("every event needs at least one observed variable")
        values = np.where(mask == 1, values, 0.0)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "instance_id", str(self.instance_id))

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def n_events(self) -> int:
        return self.times.size

    def equals(self, other: "Instance") -> bool:
        return (np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.mask, other.mask))


def classify(instance: Instance) -> str:
    """'syn' when every variable is observed at every event, else 'asyn'."""
    return "syn" if np.all(instance.mask == 1) else "asyn"


@dataclass
class Standardization:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    instances: list[Instance]
    dim: int
    horizon: float = 1.0
    splits: dict[str, str] | None = None  # instance_id -> split label
    standardization: Standardization | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for inst in self.instances:
            if inst.dim != self.dim:
                raise ValueError(f"instance {inst.instance_id} has D={inst.dim}, expected {self.dim}")
            if inst.times[-1] > self.horizon + 1e-12:
                raise ValueError(f"instance {inst.instance_id} exceeds horizon {self.horizon}")

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def classify(self) -> str:
        return "syn" if all(classify(i) == "syn" for i in self.instances) else "asyn"

    def subset(self, label: str) -> "Dataset":
        if self.splits is None:
            raise ValueError("dataset has no split assignment")
        keep = [i for i in self.instances if self.splits.get(i.instance_id) == label]
        return replace(self, instances=keep,
                       splits={i.instance_id: label for i in keep})


# standardization ---------------------------------------------------------------

def fit_standardization(dataset: Dataset, label: str | None = "train") -> Standardization:
    """Per-variable mean/std over observed entries (of the given split)."""
    insts = dataset.instances if label is None or dataset.splits is None else dataset.subset(label).instances
    vals = np.concatenate([i.values for i in insts], axis=1)
    mask = np.concatenate([i.mask for i in insts], axis=1)
    n = mask.sum(axis=1)
    mean = (vals * mask).sum(axis=1) / np.maximum(n, 1)
    var = (((vals - mean[:, None]) ** 2) * mask).sum(axis=1) / np.maximum(n, 1)
    std = np.sqrt(var)
    std = np.where(std > 0, std, 1.0)
    return Standardization(mean, std)


def standardize(dataset: Dataset, stats: Standardization) -> Dataset:
    out = []
    for inst in dataset.instances:
        v = (inst.values - stats.mean[:, None]) / stats.std[:, None]
        out.append(Instance(inst.times, v, inst.mask, inst.instance_id))
    return replace(dataset, instances=out, standardization=stats)


# CSV + manifest ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def manifest_path(csv_path: Path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".manifest.json")


def save(dataset: Dataset, path) -> Path:
    """Write ``path`` (CSV) and its sidecar manifest; returns the CSV path."""
    path = Path(path)
    if path.suffix != ".csv":
        path = path / "dataset.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    d = dataset.dim
    header = ["instance_id", "time"] + [f"x_{j + 1}" for j in range(d)] + [f"m_{j + 1}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for inst in dataset.instances:
            for k in range(inst.n_events):
                w.writerow([inst.instance_id, _fmt(inst.times[k])]
                           + [_fmt(v) for v in inst.values[:, k]]
                           + [str(int(m)) for m in inst.mask[:, k]])
    manifest = {
        "schema": DATA_SCHEMA,
        "dim": d,
        "horizon": dataset.horizon,
        "n_instances": len(dataset),
        "standardization": dataset.standardization.to_json() if dataset.standardization else None,
        "splits": dataset.splits,
        "extra": dataset.extra,
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def load(path, merge_duplicates: bool = False) -> Dataset:
    """Parse a dataset CSV (and its manifest when present).

    Errors carry the 1-based data row number (header excluded). Duplicate
    (instance, time) rows are rejected unless ``merge_duplicates`` is set, in
    which case masks are OR-ed and the later row's observed values win.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.csv"
    manifest = {}
    if manifest_path(path).exists():
        manifest = json.loads(manifest_path(path).read_text())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["instance_id", "time"] or (len(header) - 2) % 2:
            raise DataFormatError(f"bad header {header}", 0)
        d = (len(header) - 2) // 2
        expected = [f"x_{j + 1}" for j in range(d)] + [f"m_{j + 1}" for j in range(d)]
        if header[2:] != expected:
            raise DataFormatError(f"bad header {header}", 0)
        rows: dict[str, list] = {}
        order: list[str] = []
        zeroed = 0
        merged = 0
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", rownum)
            iid = row[0]
            try:
                t = float(row[1])
                mask = [int(v) for v in row[2 + d:]]
            except ValueError as exc:
                raise DataFormatError(str(exc), rownum) from None
            if any(m not in (0, 1) for m in mask):
                raise DataFormatError("mask entries must be 0 or 1", rownum)
            vals = []
            for j, raw in enumerate(row[2:2 + d]):
                raw = raw.strip()
                missing = raw == "" or raw.lower() == "nan"
                if mask[j] == 1 and missing:
                    raise DataFormatError(f"x_{j + 1} is masked observed but missing", rownum)
                v = 0.0 if missing else float(raw)
                if mask[j] == 0 and v != 0.0:
                    zeroed += 1
                    v = 0.0
                vals.append(v)
            if not math.isfinite(t) or not all(math.isfinite(v) for v in vals):
                raise DataFormatError("non-finite entry", rownum)
            if sum(mask) == 0:
                raise DataFormatError("row has no observed variable", rownum)
            if iid not in rows:
                rows[iid] = []
                order.append(iid)
            seq = rows[iid]
            if seq and t < seq[-1][0]:
                raise DataFormatError(f"time {t} precedes {seq[-1][0]} (times must increase)", rownum)
            if seq and t == seq[-1][0]:
                if not merge_duplicates:
                    raise DataFormatError(f"duplicate time {t} for instance {iid}", rownum)
                _, pv, pm = seq[-1]
                nm = [max(a, b) for a, b in zip(pm, mask)]
                nv = [vals[j] if mask[j] else pv[j] for j in range(d)]
                seq[-1] = (t, nv, nm)
                merged += 1
                continue
            seq.append((t, vals, mask))
    if zeroed:
        logger.warning("zeroed %d values whose mask is 0", zeroed)
    if merged:
        logger.warning("merged %d duplicate timestamps", merged)
    instances = []
    for iid in order:
        seq = rows[iid]
        times = np.array([r[0] for r in seq])
        values = np.array([r[1] for r in seq]).T.reshape(d, -1)
        mask = np.array([r[2] for r in seq], dtype=np.float64).T.reshape(d, -1)
        instances.append(Instance(times, values, mask, iid))
    horizon = manifest.get("horizon")
    if horizon is None:
        horizon = max((float(i.times[-1]) for i in instances), default=1.0)
    std = manifest.get("standardization")
    ds = Dataset(instances, d, float(horizon), manifest.get("splits"),
                 Standardization.from_json(std) if std else None,
                 manifest.get("extra") or {})
    ds.extra["zeroed_values"] = zeroed
    return ds


# splitting ----------------------------------------------------------------------

def split(dataset: Dataset, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> Dataset:
    """Assign every instance to train/valid/test by a seeded shuffle."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = min(int(round(fractions[1] * n)), n - n_train)
    labels = {}
    for rank, idx in enumerate(perm):
        label = "train" if rank < n_train else "valid" if rank < n_train + n_valid else "test"
        labels[dataset.instances[idx].instance_id] = label
    return replace(dataset, splits=labels)
