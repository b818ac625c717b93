"""Dataset ingestion: LETOR files, synthetic generation, impression-log IO."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .core import (
    MAX_GRADE,
    Dataset,
    ImpressionLog,
    Item,
    LetorParseError,
    LogEntry,
    LogSchemaError,
    Request,
    derive_seed,
)


class EmptyDatasetError(ValueError):
    """A source that should contain ranking data contained none."""


# ---------------------------------------------------------------------------
# LETOR / SVMLight text format: "<grade> qid:<id> <idx>:<val> ... # comment"
# ---------------------------------------------------------------------------


def parse_letor(path, feature_dim: Optional[int] = None) -> Dataset:
    """Parse a LETOR file into a Dataset.

    Items are grouped by qid in order of first appearance; feature indices
    are 1-based and missing indices are filled with 0.0. Grades are clamped
    to [0, 4]. If feature_dim is None the width is inferred from the file.
    """
    path = Path(path)
    rows: list[tuple[str, int, dict[int, float]]] = []
    max_index = 0
    with path.open("r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) < 2:
                raise LetorParseError(line_number, f"expected grade and qid: {raw!r}")
            try:
                grade_value = float(tokens[0])
            except ValueError:
                raise LetorParseError(
                    line_number, f"grade {tokens[0]!r} is not a number"
                ) from None
            if grade_value != int(grade_value):
                raise LetorParseError(line_number, f"grade {tokens[0]!r} is not integral")
            grade = min(max(int(grade_value), 0), MAX_GRADE)
            if not tokens[1].startswith("qid:"):
                raise LetorParseError(line_number, f"missing qid token in {raw!r}")
            qid = tokens[1][len("qid:") :]
            if not qid:
                raise LetorParseError(line_number, "empty qid")
            values: dict[int, float] = {}
            for token in tokens[2:]:
                index_str, sep, value_str = token.partition(":")
                if not sep:
                    raise LetorParseError(line_number, f"bad feature token {token!r}")
                try:
                    index = int(index_str)
                    value = float(value_str)
                except ValueError:
                    raise LetorParseError(
                        line_number, f"bad feature token {token!r}"
                    ) from None
                if index < 1:
                    raise LetorParseError(line_number, f"feature index {index} < 1")
                values[index] = value
            max_index = max(max_index, max(values, default=0))
            rows.append((qid, grade, values))
    if not rows:
        raise EmptyDatasetError(f"no data lines in {path}")
    dim = feature_dim if feature_dim is not None else max_index
    if dim < max_index:
        raise ValueError(f"feature_dim {dim} < max index {max_index} in {path}")

    grouped: dict[str, list[tuple[int, dict[int, float]]]] = {}
    for qid, grade, values in rows:
        grouped.setdefault(qid, []).append((grade, values))
    requests = []
    for qid, entries in grouped.items():
        items = []
        for position, (grade, values) in enumerate(entries):
            features = np.zeros(dim)
            for index, value in values.items():
                features[index - 1] = value
            items.append(
                Item(
                    item_id=f"{qid}:{position}",
                    features=features,
                    true_relevance=grade,
                )
            )
        requests.append(Request(request_id=qid, items=tuple(items)))
    return Dataset(requests=tuple(requests))


def serialize_letor(dataset: Dataset, path) -> None:
    """Write a dataset with dense features back out in LETOR format."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for request in dataset:
            for item in request.items:
                if item.true_relevance is None:
                    raise ValueError(f"item {item.item_id!r} lacks a grade")
                feats = " ".join(
                    f"{k + 1}:{float(value)!r}" for k, value in enumerate(item.features)
                )
                fh.write(f"{item.true_relevance} qid:{request.request_id} {feats}\n")


# ---------------------------------------------------------------------------
# Synthetic datasets with a known linear ground truth
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings: a hidden linear scorer turns uniform features
    into 5-level grades via four strictly increasing cut points."""

    num_requests: int
    items_per_request: int
    feature_dim: int
    ground_truth_weights: np.ndarray
    grade_quantiles: np.ndarray
    rng_seed: int

    def __post_init__(self):
        weights = np.array(self.ground_truth_weights, dtype=np.float64)
        cuts = np.array(self.grade_quantiles, dtype=np.float64)
        if weights.shape != (self.feature_dim,):
            raise ValueError(
                f"need {self.feature_dim} weights, got shape {weights.shape}"
            )
        if cuts.shape != (MAX_GRADE,):
            raise ValueError(f"need {MAX_GRADE} cut points, got shape {cuts.shape}")
        if not np.all(np.diff(cuts) > 0):
            raise ValueError("grade cut points must be strictly increasing")
        object.__setattr__(self, "ground_truth_weights", weights)
        object.__setattr__(self, "grade_quantiles", cuts)


def make_synthetic_config(
    num_requests: int,
    items_per_request: int,
    feature_dim: int,
    rng_seed: int,
) -> SyntheticConfig:
    """Draw hidden weights and set cut points at the 20/40/60/80th score
    percentiles so the grade histogram comes out roughly uniform."""
    rng = np.random.default_rng(derive_seed(rng_seed, "synthetic-config"))
    weights = rng.uniform(-1.0, 1.0, size=feature_dim)
    pilot = rng.uniform(0.0, 1.0, size=(100_000, feature_dim)) @ weights
    cuts = np.quantile(pilot, [0.2, 0.4, 0.6, 0.8])
    return SyntheticConfig(
        num_requests=num_requests,
        items_per_request=items_per_request,
        feature_dim=feature_dim,
        ground_truth_weights=weights,
        grade_quantiles=cuts,
        rng_seed=rng_seed,
    )


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Deterministically generate a dataset from the config's seed.

    Features are i.i.d. uniform [0, 1]; the grade of an item is the number
    of cut points strictly below its hidden linear score.
    """
    if config.num_requests < 1 or config.items_per_request < 1:
        raise ValueError("num_requests and items_per_request must be >= 1")
    rng = np.random.default_rng(config.rng_seed)
    width = len(str(config.num_requests - 1))
    requests = []
    for r in range(config.num_requests):
        features = rng.uniform(0.0, 1.0, size=(config.items_per_request, config.feature_dim))
        scores = features @ config.ground_truth_weights
        grades = (scores[:, None] > config.grade_quantiles[None, :]).sum(axis=1)
        request_id = f"q{r:0{width}d}"
        items = tuple(
            Item(
                item_id=f"{request_id}-d{k:03d}",
                features=features[k],
                true_relevance=int(grades[k]),
            )
            for k in range(config.items_per_request)
        )
        requests.append(Request(request_id=request_id, items=items))
    return Dataset(requests=tuple(requests))


# ---------------------------------------------------------------------------
# Optional min-max feature normalization (fit on the training split)
# ---------------------------------------------------------------------------


def fit_minmax(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mats = np.concatenate([r.feature_matrix() for r in dataset])
    return mats.min(axis=0), mats.max(axis=0)


def apply_minmax(dataset: Dataset, lo: np.ndarray, hi: np.ndarray) -> Dataset:
    span = np.where(hi > lo, hi - lo, 1.0)
    requests = []
    for request in dataset:
        items = tuple(
            Item(
                item_id=item.item_id,
                features=(item.features - lo) / span,
                true_relevance=item.true_relevance,
            )
            for item in request.items
        )
        requests.append(Request(request_id=request.request_id, items=items))
    return Dataset(requests=tuple(requests))


def split_by_request_hash(dataset: Dataset) -> tuple[Dataset, Dataset, Dataset]:
    """50/25/25 train/valid/test split keyed on a stable request-id hash."""
    buckets: tuple[list, list, list] = ([], [], [])
    for request in dataset:
        h = derive_seed("split", request.request_id) % 4
        buckets[0 if h < 2 else 1 if h == 2 else 2].append(request)
    for name, bucket in zip(("train", "valid", "test"), buckets):
        if not bucket:
            raise ValueError(f"hash split left the {name} set empty; dataset too small")
    return tuple(Dataset(requests=tuple(b)) for b in buckets)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Impression-log persistence: UTF-8 lines, one entry per line, fixed fields
# ---------------------------------------------------------------------------

LOG_FIELDS = ("request_id", "item_id", "position", "click", "dwell_time", "label_c")


def write_logs(logs: Iterable[ImpressionLog], path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for log in logs:
            for entry in log.entries:
                record = {
                    "request_id": log.request_id,
                    "item_id": entry.item_id,
                    "position": entry.position,
                    "click": entry.click,
                    "dwell_time": float(entry.dwell_time),
                    "label_c": float(entry.label_c),
                }
                fh.write(json.dumps(record) + "\n")


def _entry_from_record(record: dict, line_number: int) -> tuple[str, LogEntry]:
    for field_name in LOG_FIELDS:
        if field_name not in record:
            raise LogSchemaError(field_name, f"missing on line {line_number}")
    try:
        entry = LogEntry(
            item_id=str(record["item_id"]),
            position=int(record["position"]),
            click=int(record["click"]),
            dwell_time=float(record["dwell_time"]),
            label_c=float(record["label_c"]),
        )
    except (TypeError, ValueError) as exc:
        raise LogSchemaError("entry", f"line {line_number}: {exc}") from exc
    return str(record["request_id"]), entry


def read_logs(path) -> list[ImpressionLog]:
    """Read logs written by write_logs.

    A new impression starts whenever the request id changes or the position
    resets (does not increase), so repeated sessions of one request are
    recovered correctly.
    """
    path = Path(path)
    logs: list[ImpressionLog] = []
    current_id: Optional[str] = None
    current_entries: list[LogEntry] = []
    last_position = 0

    def flush():
        if current_entries:
            logs.append(
                ImpressionLog(request_id=current_id, entries=tuple(current_entries))
            )

    with path.open("r", encoding="utf-8") as fh:
        for line_number, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogSchemaError("record", f"line {line_number}: {exc}") from exc
            if not isinstance(record, dict):
                raise LogSchemaError("record", f"line {line_number}: not an object")
            request_id, entry = _entry_from_record(record, line_number)
            if request_id != current_id or entry.position <= last_position:
                flush()
                current_id = request_id
                current_entries = []
            current_entries.append(entry)
            last_position = entry.position
    flush()
    return logs
