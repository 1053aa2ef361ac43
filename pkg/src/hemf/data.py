"""Dataset ingestion, split/stream protocols, RMSE, and run metrics.

Declared rating-file grammars
-----------------------------
- ``csv``: ``user,item,rating[,timestamp]`` per line
- ``double_colon``: ``user::item::rating::timestamp`` per line
- ``per_item_files``: a file (or directory of files) of blocks starting
  with ``item_id:`` followed by ``user,rating,date`` lines

External ids are remapped to dense 0-based indices in first-appearance
order; the mapping is retained on the returned snapshot.  Duplicate
(user, item) pairs keep the last occurrence, in timestamp order when every
entry carries a timestamp and in file order otherwise.

All randomized protocols use the package-wide counter-based generator
(Philox) so seeds reproduce across platforms.
"""

import io
import json
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DegenerateSplitError, HemfError
from .model import SparseRatings, make_rng
from .online import RatingChunk

logger = logging.getLogger(__name__)

FORMATS = ("csv", "double_colon", "per_item_files")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _parse_number(token, what, line_no):
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(f"line {line_no}: bad {what} {token!r}",
                              line_number=line_no) from None


def _iter_csv(lines):
    for line_no, raw in lines:
        parts = raw.split(",")
        if len(parts) not in (3, 4):
            raise DataFormatError(
                f"line {line_no}: expected 'user,item,rating[,timestamp]', "
                f"got {raw!r}", line_number=line_no)
        ts = _parse_number(parts[3], "timestamp", line_no) if len(parts) == 4 else None
        yield parts[0].strip(), parts[1].strip(), \
            _parse_number(parts[2], "rating", line_no), ts


def _iter_double_colon(lines):
    for line_no, raw in lines:
        parts = raw.split("::")
        if len(parts) != 4:
            raise DataFormatError(
                f"line {line_no}: expected 'user::item::rating::timestamp', "
                f"got {raw!r}", line_number=line_no)
        yield parts[0].strip(), parts[1].strip(), \
            _parse_number(parts[2], "rating", line_no), \
            _parse_number(parts[3], "timestamp", line_no)


def _iter_per_item(lines):
    current_item = None
    for line_no, raw in lines:
        if raw.endswith(":"):
            current_item = raw[:-1].strip()
            if not current_item:
                raise DataFormatError(f"line {line_no}: empty item header",
                                      line_number=line_no)
            continue
        if current_item is None:
            raise DataFormatError(
                f"line {line_no}: rating before any 'item_id:' header",
                line_number=line_no)
        parts = raw.split(",")
        if len(parts) != 3:
            raise DataFormatError(
                f"line {line_no}: expected 'user,rating,date', got {raw!r}",
                line_number=line_no)
        yield parts[0].strip(), current_item, \
            _parse_number(parts[1], "rating", line_no), None


def _nonblank_lines(text):
    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped:
            yield line_no, stripped


def parse_ratings(path, format):
    """Parse a rating file (or directory, for ``per_item_files``).

    Returns a :class:`SparseRatings` with dense 0-based indices and the
    original ids retained as labels.

    Raises
    ------
    DataFormatError
        On a malformed line (with its line number) or an empty input.
    """
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    if os.path.isdir(path):
        if format != "per_item_files":
            raise DataFormatError(f"{path} is a directory; only the "
                                  "'per_item_files' format accepts one")
        texts = []
        for name in sorted(os.listdir(path)):
            with open(os.path.join(path, name), "r", encoding="utf-8") as fh:
                texts.append(fh.read())
        text = "\n".join(texts)
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    iterator = {"csv": _iter_csv, "double_colon": _iter_double_colon,
                "per_item_files": _iter_per_item}[format]
    entries = list(iterator(_nonblank_lines(text)))
    if not entries:
        raise DataFormatError("no rating entries found")

    users, items = {}, {}
    rows = []
    for user_key, item_key, value, ts in entries:
        u = users.setdefault(user_key, len(users))
        i = items.setdefault(item_key, len(items))
        rows.append((u, i, value, ts))
    # Last occurrence wins; order duplicates by timestamp when every entry
    # has one, otherwise keep file order.
    if all(r[3] is not None for r in rows):
        rows.sort(key=lambda r: r[3])
    deduped = {}
    for u, i, value, _ in rows:
        deduped[(u, i)] = value
    uu, ii = zip(*deduped.keys())
    return SparseRatings(len(users), len(items), uu, ii, list(deduped.values()),
                         user_labels=list(users), item_labels=list(items))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    """Protocol for carving a snapshot into train and test.

    ``holdout`` keeps ``fraction`` of the entries for training;
    ``weak_generalization`` withholds one seeded-random rating per user with
    at least two ratings; ``kfold`` selects fold ``fold`` of ``n_folds``.
    """

    mode: str = "holdout"
    fraction: float = 0.9
    n_folds: int = 5
    fold: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("holdout", "weak_generalization", "kfold"):
            raise ValueError(f"unknown split mode: {self.mode}")
        if self.mode == "holdout" and not 0.0 < self.fraction < 1.0:
            raise ValueError("holdout fraction must lie in (0, 1)")
        if self.mode == "kfold":
            if self.n_folds < 2:
                raise ValueError("kfold needs n_folds >= 2")
            if not 0 <= self.fold < self.n_folds:
                raise ValueError("fold index out of range")


def split_dataset(ratings, spec):
    """Seeded train/test split; train and test partition the input.

    Raises
    ------
    DegenerateSplitError
        If the test side comes out empty.
    """
    n = len(ratings)
    rng = make_rng(spec.seed)
    test_mask = np.zeros(n, dtype=bool)
    if spec.mode == "holdout":
        n_train = int(np.floor(spec.fraction * n))
        order = rng.permutation(n)
        test_mask[order[n_train:]] = True
    elif spec.mode == "weak_generalization":
        counts = ratings.counts_per_user()
        skipped = int(np.sum(counts == 1))
        if skipped:
            logger.info("weak generalization: %d single-rating users stay "
                        "train-only", skipped)
        order = np.argsort(ratings.users, kind="stable")
        ptr = np.concatenate([[0], np.cumsum(counts)])
        for user in range(ratings.n_users):
            entries = order[ptr[user]:ptr[user + 1]]
            if len(entries) < 2:
                continue
            test_mask[entries[rng.integers(len(entries))]] = True
    else:
        order = rng.permutation(n)
        folds = np.array_split(order, spec.n_folds)
        test_mask[folds[spec.fold]] = True
    if not np.any(test_mask):
        raise DegenerateSplitError("test set is empty under this split")
    return ratings.subset(~test_mask), ratings.subset(test_mask)


def chunk_stream(train, chunk_size, seed):
    """Seeded permutation of a snapshot partitioned into consecutive chunks
    (the last may be short); every entry arrives as a new observation."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    rng = make_rng(seed)
    order = rng.permutation(len(train))
    chunks = []
    for start in range(0, len(train), int(chunk_size)):
        sel = order[start:start + int(chunk_size)]
        chunks.append(RatingChunk(train.users[sel], train.items[sel],
                                  train.values[sel]))
    return chunks


def rmse(predictions, test):
    """Root mean squared error over a test snapshot."""
    if len(test) == 0:
        raise HemfError("rmse needs a non-empty test set")
    predictions = np.asarray(predictions, dtype=float).reshape(-1)
    if len(predictions) != len(test):
        raise ValueError("one prediction per test entry required")
    return float(np.sqrt(np.mean((predictions - test.values) ** 2)))


# ---------------------------------------------------------------------------
# Chunk wire format
# ---------------------------------------------------------------------------

def parse_chunk_stream(text):
    """Parse newline-delimited ``user,item,rating[,prev_rating]`` records;
    a blank line terminates a chunk."""
    chunks = []
    current = []

    def flush():
        if current:
            chunks.append(RatingChunk.from_entries(list(current)))
            current.clear()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped:
            flush()
            continue
        parts = stripped.split(",")
        if len(parts) not in (3, 4):
            raise DataFormatError(
                f"line {line_no}: expected 'user,item,rating[,prev_rating]', "
                f"got {raw!r}", line_number=line_no)
        try:
            entry = (int(parts[0]), int(parts[1]), float(parts[2]))
            if len(parts) == 4:
                entry = entry + (float(parts[3]),)
        except ValueError:
            raise DataFormatError(f"line {line_no}: bad numeric field in {raw!r}",
                                  line_number=line_no) from None
        current.append(entry)
    flush()
    return chunks


def format_chunk_stream(chunks):
    """Inverse of :func:`parse_chunk_stream`."""
    out = io.StringIO()
    for chunk in chunks:
        rev = chunk.is_revision
        for k in range(len(chunk)):
            row = f"{chunk.users[k]},{chunk.items[k]},{chunk.values[k]:.17g}"
            if rev[k]:
                row += f",{chunk.prev_values[k]:.17g}"
            out.write(row + "\n")
        out.write("\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

METRICS_HEADER = "phase,step,elbo,train_rmse,test_rmse,D,K,wall_ms"


class RunLogger:
    """Collects one CSV row per sweep/chunk plus a JSON run summary.

    With ``timing=False`` the wall-clock column is written as 0 so that
    identically seeded runs produce byte-identical files.
    """

    def __init__(self, timing=True):
        self.timing = timing
        self.rows = []
        self._t0 = time.perf_counter()

    def mark(self):
        self._t0 = time.perf_counter()

    def log(self, phase, step, elbo=None, train_rmse=None, test_rmse=None,
            D=None, K=None):
        wall_ms = (time.perf_counter() - self._t0) * 1e3 if self.timing else 0.0
        self.rows.append({
            "phase": phase, "step": int(step),
            "elbo": elbo, "train_rmse": train_rmse, "test_rmse": test_rmse,
            "D": D, "K": K, "wall_ms": wall_ms,
        })
        self._t0 = time.perf_counter()

    @staticmethod
    def _fmt(value):
        if value is None:
            return ""
        if isinstance(value, float):
            return format(value, ".12g")
        return str(value)

    def csv_text(self):
        lines = [METRICS_HEADER]
        for row in self.rows:
            lines.append(",".join(self._fmt(row[k]) for k in
                                  ("phase", "step", "elbo", "train_rmse",
                                   "test_rmse", "D", "K", "wall_ms")))
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def summary(self, **extra):
        out = {"n_steps": len(self.rows)}
        if self.rows:
            last = self.rows[-1]
            out.update({k: last[k] for k in ("phase", "step", "elbo",
                                             "train_rmse", "test_rmse", "D", "K")})
        out.update(extra)
        return out

    def write_summary(self, path, **extra):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(**extra), fh, indent=2, sort_keys=True)
            fh.write("\n")
