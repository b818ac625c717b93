"""Shared domain types and deterministic ranking utilities.

All types here are immutable value objects after construction and are safe
to share across threads read-only. Positions are 1-based throughout the
package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

MAX_GRADE = 4

# Probability parameters are kept inside these bounds before entering any
# ratio; denominators are additionally floored at DENOM_FLOOR.
PROB_CLAMP_LO = 1e-4
PROB_CLAMP_HI = 1.0 - 1e-4
DENOM_FLOOR = 1e-9


class LetorParseError(ValueError):
    """Malformed line in a LETOR/SVMLight file."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class LogSchemaError(ValueError):
    """Impression-log record missing or mistyping a required field."""

    def __init__(self, field_name: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"bad log field '{field_name}'{detail}")
        self.field_name = field_name


class DegenerateSampleError(ValueError):
    """Training sample carries no usable signal (e.g. a single grade)."""


class NumericDomainError(ValueError):
    """A probability or denominator left its valid domain."""


class TrainingFailureError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message: str, epoch: Optional[int] = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


def clamp_prob(p):
    """Clamp a probability (scalar or array) into the open unit interval."""
    return np.clip(p, PROB_CLAMP_LO, PROB_CLAMP_HI)


def derive_seed(*parts) -> int:
    """Fold strings/ints into a stable 64-bit seed.

    Unlike hash(), this is identical across processes and platforms, which
    keeps parallel lanes (seeded per request id, method, repeat, ...)
    reproducible.
    """
    digest = hashlib.blake2b(digest_size=8)
    for part in parts:
        digest.update(str(part).encode("utf-8"))
        digest.update(b"\x1f")
    return int.from_bytes(digest.digest(), "big")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@dataclass(frozen=True)
class Item:
    """A candidate item: id, feature vector, optional relevance grade 0..4."""

    item_id: str
    features: np.ndarray
    true_relevance: Optional[int] = None

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.ndim != 1:
            raise ValueError(f"features must be 1-d, got shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"non-finite feature for item {self.item_id!r}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.true_relevance is not None:
            grade = int(self.true_relevance)
            if not 0 <= grade <= MAX_GRADE:
                raise ValueError(
                    f"grade {grade} out of [0, {MAX_GRADE}] for item {self.item_id!r}"
                )
            object.__setattr__(self, "true_relevance", grade)


@dataclass(frozen=True)
class Request:
    """One ranking request: an ordered list of candidate items."""

    request_id: str
    items: tuple[Item, ...]

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise ValueError(f"request {self.request_id!r} has no items")
        dims = {item.features.shape[0] for item in items}
        if len(dims) != 1:
            raise ValueError(
                f"request {self.request_id!r} mixes feature dims {sorted(dims)}"
            )
        object.__setattr__(self, "items", items)

    @property
    def feature_dim(self) -> int:
        return self.items[0].features.shape[0]

    def grades(self) -> np.ndarray:
        if any(item.true_relevance is None for item in self.items):
            raise ValueError(f"request {self.request_id!r} lacks true relevance")
        return np.array([item.true_relevance for item in self.items], dtype=np.int64)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([item.features for item in self.items])


@dataclass(frozen=True)
class Dataset:
    """A collection of requests sharing one feature dimensionality."""

    requests: tuple[Request, ...]

    def __post_init__(self):
        requests = tuple(self.requests)
        if not requests:
            raise ValueError("dataset has no requests")
        dims = {r.feature_dim for r in requests}
        if len(dims) != 1:
            raise ValueError(f"dataset mixes feature dims {sorted(dims)}")
        object.__setattr__(self, "requests", requests)

    @property
    def feature_dim(self) -> int:
        return self.requests[0].feature_dim

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    def by_id(self) -> dict[str, Request]:
        return {r.request_id: r for r in self.requests}


@dataclass(frozen=True)
class LogEntry:
    """Feedback for one displayed item: click, dwell seconds, combined label."""

    item_id: str
    position: int
    click: int
    dwell_time: float
    label_c: float

    def __post_init__(self):
        if self.click not in (0, 1):
            raise ValueError(f"click must be 0 or 1, got {self.click!r}")
        if self.position < 1:
            raise ValueError(f"position must be >= 1, got {self.position}")
        if self.dwell_time < 0:
            raise ValueError(f"dwell_time must be >= 0, got {self.dwell_time}")
        if self.dwell_time > 0 and self.click == 0:
            raise ValueError("positive dwell_time on an unclicked item")
        if (self.label_c == 0) != (self.click == 0):
            raise ValueError("label_c must be zero exactly when click is zero")
        if self.label_c < 0 or not np.isfinite(self.label_c):
            raise ValueError(f"label_c must be finite and >= 0, got {self.label_c}")


@dataclass(frozen=True)
class ImpressionLog:
    """One presentation of a ranked list with per-position feedback.

    Entries are stored in position order; positions must be exactly 1..N.
    """

    request_id: str
    entries: tuple[LogEntry, ...]

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.position))
        positions = [e.position for e in entries]
        if positions != list(range(1, len(entries) + 1)):
            raise ValueError(
                f"positions must be 1..{len(entries)} without gaps, got {positions}"
            )
        object.__setattr__(self, "entries", entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label_c for e in self.entries], dtype=np.float64)

    def clicks(self) -> np.ndarray:
        return np.array([e.click for e in self.entries], dtype=np.int64)


@dataclass(frozen=True)
class PropensityParams:
    """Examination and pairwise label-flip probabilities per position.

    theta[i-1]      P(item at position i is examined)
    theta_neg[i-1]  posterior examination probability given a zero label
    eps_pos[i-1, j-1]  P(label order positive | both examined, true order positive)
    eps_neg[i-1, j-1]  P(label order positive | both examined, true order not positive)

    Every (i, j) cell must satisfy 0 < eps_neg < eps_pos < 1.
    """

    theta: np.ndarray
    theta_neg: np.ndarray
    eps_pos: np.ndarray
    eps_neg: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        theta_neg = np.array(self.theta_neg, dtype=np.float64)
        eps_pos = np.array(self.eps_pos, dtype=np.float64)
        eps_neg = np.array(self.eps_neg, dtype=np.float64)
        n = theta.shape[0]
        if theta.ndim != 1 or theta_neg.shape != (n,):
            raise ValueError("theta and theta_neg must be length-N vectors")
        if eps_pos.shape != (n, n) or eps_neg.shape != (n, n):
            raise ValueError("eps_pos and eps_neg must be N x N matrices")
        for name, arr in (("theta", theta), ("theta_neg", theta_neg)):
            if not np.all((arr > 0) & (arr <= 1)):
                raise ValueError(f"{name} entries must lie in (0, 1]")
        if not np.all((eps_neg > 0) & (eps_neg < eps_pos) & (eps_pos < 1)):
            raise ValueError("need 0 < eps_neg < eps_pos < 1 elementwise")
        for name, arr in (
            ("theta", theta),
            ("theta_neg", theta_neg),
            ("eps_pos", eps_pos),
            ("eps_neg", eps_neg),
        ):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_positions(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def initial(
        cls,
        num_positions: int,
        eps_pos: float = 0.9,
        eps_neg: float = 0.1,
    ) -> "PropensityParams":
        """Default starting point: harmonic examination curve, flat trust bias."""
        theta = 1.0 / np.arange(1, num_positions + 1, dtype=np.float64)
        return cls(
            theta=theta,
            theta_neg=theta.copy(),
            eps_pos=np.full((num_positions, num_positions), eps_pos),
            eps_neg=np.full((num_positions, num_positions), eps_neg),
        )


def rank_by_scores(
    scores: Sequence[float], item_ids: Sequence[str]
) -> list[tuple[str, int]]:
    """Order items by descending score; ties broken by ascending item_id.

    Returns (item_id, position) with positions exactly 1..n. Deterministic:
    the same inputs always produce the same ordering.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(item_ids):
        raise ValueError(
            f"got {scores.shape[0]} scores for {len(item_ids)} item ids"
        )
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = sorted(range(len(item_ids)), key=lambda k: (-scores[k], item_ids[k]))
    return [(item_ids[k], pos) for pos, k in enumerate(order, start=1)]
