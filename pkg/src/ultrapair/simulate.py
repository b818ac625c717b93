"""Biased feedback simulation: position-dependent examination, graded click
probabilities with noise, log-normal dwell times, and a combined label.

The browsing model: the user examines position i with probability
bias_curve[i]**eta, and clicks an examined item with a probability that
grows with its relevance grade. A click draws a dwell time whose log is
normal with grade-specific mean and spread. The per-item label is
click + dwell / e**delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    MAX_GRADE,
    Dataset,
    DegenerateSampleError,
    ImpressionLog,
    LogEntry,
    Request,
    derive_rng,
    rank_by_scores,
)

DEFAULT_GMM_MU = (2.0, 2.5, 3.0, 3.5, 4.0)
DEFAULT_GMM_SIGMA = (1.0, 1.0, 1.0, 1.0, 1.0)


def harmonic_bias_curve(num_positions: int) -> np.ndarray:
    """Base examination propensity 1/i, the standard stand-in curve."""
    return 1.0 / np.arange(1, num_positions + 1, dtype=np.float64)


@dataclass(frozen=True)
class SimConfig:
    """Knobs of the feedback generator.

    eta scales position-bias severity (0 disables it), click_noise is the
    floor click probability for grade-0 items, delta sets the dwell-time
    weight in the combined label, and gmm_mu/gmm_sigma give the per-grade
    log-dwell distribution.
    """

    num_positions: int = 10
    eta: float = 1.0
    click_noise: float = 0.1
    delta: float = 3.0
    bias_curve: Optional[np.ndarray] = None
    gmm_mu: Sequence[float] = DEFAULT_GMM_MU
    gmm_sigma: Sequence[float] = DEFAULT_GMM_SIGMA
    rng_seed: int = 0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be non-negative")
        if not 0 <= self.click_noise < 1:
            raise ValueError("click_noise must lie in [0, 1)")
        curve = (
            harmonic_bias_curve(self.num_positions)
            if self.bias_curve is None
            else np.array(self.bias_curve, dtype=np.float64)
        )
        if curve.shape != (self.num_positions,):
            raise ValueError(
                f"bias_curve must have {self.num_positions} entries, got {curve.shape}"
            )
        if not np.all((curve > 0) & (curve <= 1)):
            raise ValueError("bias_curve entries must lie in (0, 1]")
        mu = np.array(self.gmm_mu, dtype=np.float64)
        sigma = np.array(self.gmm_sigma, dtype=np.float64)
        if mu.shape != (MAX_GRADE + 1,) or sigma.shape != (MAX_GRADE + 1,):
            raise ValueError(f"gmm_mu and gmm_sigma need {MAX_GRADE + 1} entries each")
        if not np.all(sigma > 0):
            raise ValueError("gmm_sigma entries must be positive")
        object.__setattr__(self, "bias_curve", curve)
        object.__setattr__(self, "gmm_mu", mu)
        object.__setattr__(self, "gmm_sigma", sigma)

    @property
    def theta(self) -> np.ndarray:
        """Effective examination probability per position."""
        return self.bias_curve**self.eta


def examination_prob(position: int, config: SimConfig) -> float:
    """P(position examined) = bias_curve[position]**eta, positions 1-based."""
    if not 1 <= position <= config.num_positions:
        raise ValueError(
            f"position {position} out of range 1..{config.num_positions}"
        )
    return float(config.bias_curve[position - 1] ** config.eta)


def perceived_relevance(grade: int, click_noise: float) -> float:
    """Click probability of an examined item with the given grade.

    Grade 4 maps to 1.0; grade 0 maps to the noise floor.
    """
    if not 0 <= grade <= MAX_GRADE:
        raise ValueError(f"grade {grade} out of [0, {MAX_GRADE}]")
    return click_noise + (1.0 - click_noise) * (2.0**grade - 1.0) / (
        2.0**MAX_GRADE - 1.0
    )


def weighted_sum_label(click: np.ndarray, dwell: np.ndarray, delta: float) -> np.ndarray:
    """Default combination of user actions into one continuous label."""
    return click + dwell / np.exp(delta)


@dataclass(frozen=True)
class LinearScorer:
    """Least-squares linear scorer used to fix the displayed order."""

    weights: np.ndarray
    bias: float

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias


def train_initial_ranker(
    dataset: Dataset, fraction: float, rng: np.random.Generator
) -> LinearScorer:
    """Fit a weak linear regressor on grades from a small sample.

    The scorer only fixes the presentation order for simulation; it is not
    the ranker under study. Raises DegenerateSampleError when the sample
    holds fewer than two distinct grades.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    features = []
    grades = []
    for request in dataset:
        for item in request.items:
            if item.true_relevance is None:
                raise ValueError(f"item {item.item_id!r} lacks true relevance")
            features.append(item.features)
            grades.append(item.true_relevance)
    features = np.stack(features)
    grades = np.array(grades, dtype=np.float64)
    n = len(grades)
    take = max(int(np.ceil(fraction * n)), 1)
    idx = rng.choice(n, size=take, replace=False) if take < n else np.arange(n)
    sample_x, sample_y = features[idx], grades[idx]
    if np.unique(sample_y).size < 2:
        raise DegenerateSampleError(
            f"sample of {take} items has fewer than two distinct grades"
        )
    design = np.concatenate([sample_x, np.ones((take, 1))], axis=1)
    coeffs, *_ = np.linalg.lstsq(design, sample_y, rcond=None)
    return LinearScorer(weights=coeffs[:-1], bias=float(coeffs[-1]))


def displayed_ranking(
    scorer: LinearScorer, request: Request, num_positions: int
) -> list[str]:
    """Item ids in display order, truncated to the position budget."""
    scores = scorer.score(request.feature_matrix())
    ranked = rank_by_scores(scores, [item.item_id for item in request.items])
    return [item_id for item_id, _ in ranked[:num_positions]]


def simulate_session(
    request: Request,
    displayed: Sequence[str],
    config: SimConfig,
    rng: np.random.Generator,
    combine: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None = None,
) -> ImpressionLog:
    """Simulate one browse of the displayed list.

    Per position: click ~ Bernoulli(exam_prob * perceived_relevance); a
    click draws dwell = e^w with w ~ Normal(mu_grade, sigma_grade); the
    label combines click and dwell (weighted sum by default). Unclicked
    items have zero dwell and zero label.
    """
    item_ids = list(displayed)[: config.num_positions]
    by_id = {item.item_id: item for item in request.items}
    grades = []
    for item_id in item_ids:
        item = by_id.get(item_id)
        if item is None:
            raise ValueError(f"item {item_id!r} not in request {request.request_id!r}")
        if item.true_relevance is None:
            raise ValueError(f"item {item_id!r} lacks a true relevance grade")
        grades.append(item.true_relevance)
    grades = np.array(grades, dtype=np.int64)
    n = len(item_ids)

    exam = config.theta[:n]
    relevance = np.array(
        [perceived_relevance(g, config.click_noise) for g in grades]
    )
    clicks = (rng.random(n) < exam * relevance).astype(np.int64)
    log_dwell = rng.normal(config.gmm_mu[grades], config.gmm_sigma[grades])
    dwell = np.where(clicks == 1, np.exp(log_dwell), 0.0)
    combine_fn = combine or weighted_sum_label
    labels = combine_fn(clicks.astype(np.float64), dwell, config.delta)

    entries = tuple(
        LogEntry(
            item_id=item_ids[k],
            position=k + 1,
            click=int(clicks[k]),
            dwell_time=float(dwell[k]),
            label_c=float(labels[k]),
        )
        for k in range(n)
    )
    return ImpressionLog(request_id=request.request_id, entries=entries)


def simulate_dataset(
    dataset: Dataset,
    scorer: LinearScorer,
    config: SimConfig,
    sessions_per_request: int,
    seed: int,
) -> list[ImpressionLog]:
    """Simulate sessions for every request.

    Each request owns an independent RNG stream derived from
    (seed, request_id), so results do not depend on iteration order and
    requests can be simulated in parallel.
    """
    logs = []
    for request in dataset:
        rng = derive_rng(seed, "session", request.request_id)
        shown = displayed_ranking(scorer, request, config.num_positions)
        for _ in range(sessions_per_request):
            logs.append(simulate_session(request, shown, config, rng))
    return logs


def expected_session_label(grade: int, position: int, config: SimConfig) -> float:
    """Closed-form expectation of the combined label at a position.

    E[label] = p_click * (1 + E[dwell | click] / e^delta) with the dwell
    expectation exp(mu + sigma^2 / 2) of the log-normal.
    """
    p_click = examination_prob(position, config) * perceived_relevance(
        grade, config.click_noise
    )
    mean_dwell = float(
        np.exp(config.gmm_mu[grade] + 0.5 * config.gmm_sigma[grade] ** 2)
    )
    return p_click * (1.0 + mean_dwell / float(np.exp(config.delta)))
