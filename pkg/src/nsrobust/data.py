"""Heartbeat CSV ingestion, splitting, class re-balancing and batching.

The CSV layout is the public pre-segmented MIT-BIH heartbeat set: no
header, 187 signal values in [0, 1] followed by an integer-valued class
label (0..4 for N, S, V, F, Q).
"""

import hashlib
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from nsrobust.errors import ArgumentError, IngestionError
from nsrobust.tensor import RandStream

SIGNAL_LENGTH = 187
CLASS_NAMES = ("N", "S", "V", "F", "Q")
CLAMP_TOL = 1e-6


@dataclass
class HeartbeatSet:
    signals: np.ndarray
    labels: np.ndarray
    provenance: str = ""
    rejected_rows: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.signals.ndim != 2 or len(self.signals) != len(self.labels):
            raise ArgumentError(f"signals {self.signals.shape} and labels {self.labels.shape} disagree")
        if not self.provenance:
            self.provenance = self.content_digest()

    def __len__(self):
        return len(self.labels)

    def content_digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.signals, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def class_counts(self, class_count=len(CLASS_NAMES)):
        return np.bincount(self.labels, minlength=class_count)

    def subset(self, idx):
        sub = HeartbeatSet(self.signals[idx], self.labels[idx])
        return sub

    def first_per_class(self, k, class_count=len(CLASS_NAMES)):
        """The first ``k`` rows of every class, in file order."""
        idx = np.concatenate([np.flatnonzero(self.labels == c)[:k] for c in range(class_count)])
        return self.subset(np.sort(idx))


def _scan_rows(text, columns):
    """Slow path: find rows with the wrong column count or unparsable values."""
    bad = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != columns:
            bad.append(number)
            continue
        try:
            [float(p) for p in parts]
        except ValueError:
            bad.append(number)
    return bad


def load_heartbeat_csv(path, strict=True, length=SIGNAL_LENGTH, class_count=len(CLASS_NAMES)):
    """Read and validate a heartbeat CSV.

    Rows with out-of-range values (beyond a 1e-6 clamp tolerance),
    non-finite values or labels outside ``0..class_count-1`` are rejected.
    With ``strict`` any rejection raises :class:`IngestionError` (the valid
    rows are attached as ``exc.accepted``); otherwise the valid rows are
    returned with ``rejected_rows`` filled in.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    text = raw.decode("utf-8")
    columns = length + 1
    try:
        arr = np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError:
        arr = None
    if arr is None or (arr.size and arr.shape[1] != columns):
        bad = _scan_rows(text, columns) or [1]
        raise IngestionError(
            f"{path}: rows with malformed columns (expected {columns} numeric values): {bad[:10]}",
            rows=bad[:10])
    if arr.size == 0:
        arr = np.zeros((0, columns))
    signals, labels = arr[:, :length], arr[:, length]
    finite = np.isfinite(arr).all(axis=1)
    label_ok = finite & (labels == np.round(labels)) & (labels >= 0) & (labels < class_count)
    range_ok = finite & (signals >= -CLAMP_TOL).all(axis=1) & (signals <= 1 + CLAMP_TOL).all(axis=1)
    ok = label_ok & range_ok
    rejected = tuple(int(i) + 1 for i in np.flatnonzero(~ok))
    accepted = HeartbeatSet(np.clip(signals[ok], 0.0, 1.0), labels[ok].astype(np.int64),
                            provenance=digest, rejected_rows=rejected)
    if rejected and strict:
        exc = IngestionError(
            f"{path}: {len(rejected)} row(s) rejected (bad label or value outside [0, 1]); "
            f"first rows: {list(rejected[:10])}", rows=rejected[:10])
        exc.accepted = accepted
        raise exc
    return accepted


def save_heartbeat_csv(hset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row, label in zip(hset.signals, hset.labels):
            fh.write(",".join(f"{v:.9g}" for v in row))
            fh.write(f",{int(label)}\n")


def split_train_val(hset, fraction=0.8, seed=0):
    """Seeded shuffled split; the training part gets ``round(fraction * N)`` rows."""
    if not 0 < fraction < 1:
        raise ArgumentError(f"fraction must be in (0, 1), got {fraction}")
    n = len(hset)
    if n == 0:
        raise ArgumentError("cannot split an empty set")
    perm = RandStream(seed, 11).permutation(n)
    n_train = int(round(fraction * n))
    return hset.subset(np.sort(perm[:n_train])), hset.subset(np.sort(perm[n_train:]))


def upsample_balance(hset, seed=0, class_count=len(CLASS_NAMES)):
    """Resample every class with replacement up to the largest class size.

    All original rows are kept; only the shortfall is drawn.  The result is
    shuffled.
    """
    counts = hset.class_counts(class_count)
    for c, k in enumerate(counts):
        if k == 0:
            name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
            raise ArgumentError(f"class {c} ({name}) is absent; cannot up-sample")
    stream = RandStream(seed, 12)
    target = counts.max()
    parts = []
    for c in range(class_count):
        idx = np.flatnonzero(hset.labels == c)
        extra = idx[stream.integers(len(idx), target - len(idx))] if target > len(idx) else idx[:0]
        parts += [idx, extra]
    idx = np.concatenate(parts)
    return hset.subset(idx[stream.permutation(len(idx))])


def batch_iter(hset, batch_size=128, seed=0, epoch=0):
    """Yield ``(signals, labels)`` batches in an order fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ArgumentError(f"batch_size must be >= 1, got {batch_size}")
    order = RandStream(seed, 1_000 + epoch).permutation(len(hset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield hset.signals[idx], hset.labels[idx]


def _counts(hset):
    return {name: int(k) for name, k in zip(CLASS_NAMES, hset.class_counts())}


def prepare(train_csv, test_csv, out_dir, seed=0, fraction=0.8):
    """Split, balance and write ``train.csv``/``val.csv``/``test.csv`` plus ``manifest.json``.

    The validation part is cut before balancing and stays at its natural
    class mix; the pure-train and test parts are up-sampled.
    """
    full_train = load_heartbeat_csv(train_csv)
    test = load_heartbeat_csv(test_csv)
    pure, val = split_train_val(full_train, fraction, seed)
    train = upsample_balance(pure, seed)
    test_bal = upsample_balance(test, seed + 1)
    os.makedirs(out_dir, exist_ok=True)
    splits = {"train": train, "val": val, "test": test_bal}
    for name, part in splits.items():
        save_heartbeat_csv(part, os.path.join(out_dir, f"{name}.csv"))
    manifest = {
        "seed": seed,
        "fraction": fraction,
        "sources": {"train": {"path": str(train_csv), "sha256": full_train.provenance},
                    "test": {"path": str(test_csv), "sha256": test.provenance}},
        "counts": {"pure_train": _counts(pure), **{k: _counts(v) for k, v in splits.items()}},
        "digests": {k: v.content_digest() for k, v in splits.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest
