"""Ranking metrics (NDCG@k, ARP, Reward@k) and experiment report handling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, rank_by_scores
from .network import RankerModel
from .simulate import SimConfig, perceived_relevance


def graded_gain(grades) -> np.ndarray:
    """Exponential gain 2^y - 1 for 5-level grades."""
    return 2.0 ** np.asarray(grades, dtype=np.float64) - 1.0


def dcg_at_k(ranking: Sequence[int], grades, k: int) -> float:
    """Discounted cumulative gain of the first k ranked items.

    ranking[r] is the index (into grades) of the item at rank r+1.
    """
    grades = np.asarray(grades)
    ranked = np.asarray(ranking)[: min(k, len(ranking))]
    gains = graded_gain(grades[ranked])
    discounts = 1.0 / np.log2(1.0 + np.arange(1, len(ranked) + 1))
    return float(np.sum(gains * discounts))


def ndcg_at_k(ranking: Sequence[int], grades, k: int) -> float:
    """Normalized DCG@k; defined as 0 when every grade is zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    grades = np.asarray(grades)
    ideal_order = np.argsort(-grades, kind="stable")
    ideal = dcg_at_k(ideal_order, grades, k)
    if ideal == 0:
        return 0.0
    return dcg_at_k(ranking, grades, k) / ideal


def arp(ranking: Sequence[int], grades) -> float:
    """Gain-weighted average position of relevant items.

    Returns NaN when no item carries gain (the undefined marker).
    """
    grades = np.asarray(grades)
    if len(ranking) == 0:
        raise ValueError("empty ranking")
    gains = graded_gain(grades[np.asarray(ranking)])
    total = gains.sum()
    if total == 0:
        return float("nan")
    positions = np.arange(1, len(ranking) + 1, dtype=np.float64)
    return float(np.sum(positions * gains) / total)


def model_ranking(model: RankerModel, request) -> list[int]:
    """Indices of a request's items in the model's score order, with the
    package-wide deterministic tie-break by item id."""
    scores = np.atleast_1d(model.forward(request.feature_matrix()))
    ids = [item.item_id for item in request.items]
    by_id = {item_id: idx for idx, item_id in enumerate(ids)}
    return [by_id[item_id] for item_id, _ in rank_by_scores(scores, ids)]


def reward_at_ks(
    model: RankerModel,
    dataset: Dataset,
    sim_config: SimConfig,
    ks: Sequence[int],
    num_trials: int = 100,
    rng: Optional[np.random.Generator] = None,
    expected: bool = False,
) -> dict[int, float]:
    """Mean combined feedback over the top-k positions of the model ranking.

    Feedback is resampled at the positions the evaluated model assigns
    (clicks, then dwell for clicked items), averaged over num_trials per
    request and then over requests. All ks share one set of trials, so the
    result is monotone non-decreasing in k. With expected=True the
    closed-form expectation replaces sampling (deterministic, no rng).
    """
    ks = sorted(set(int(k) for k in ks))
    if any(k < 1 for k in ks):
        raise ValueError("every k must be >= 1")
    if max(ks) > sim_config.num_positions:
        raise ValueError(
            f"k {max(ks)} exceeds the {sim_config.num_positions}-position budget"
        )
    if not expected and rng is None:
        raise ValueError("sampled reward needs an rng")
    totals = {k: 0.0 for k in ks}
    exp_delta = float(np.exp(sim_config.delta))
    for request in dataset:
        ranked = model_ranking(model, request)[: sim_config.num_positions]
        grades = request.grades()[ranked]
        n = len(ranked)
        exam = sim_config.theta[:n]
        relevance = np.array(
            [perceived_relevance(g, sim_config.click_noise) for g in grades]
        )
        p_click = exam * relevance
        if expected:
            mean_dwell = np.exp(
                sim_config.gmm_mu[grades] + 0.5 * sim_config.gmm_sigma[grades] ** 2
            )
            per_position = p_click * (1.0 + mean_dwell / exp_delta)
            cumulative = np.cumsum(per_position)
        else:
            clicks = rng.random((num_trials, n)) < p_click
            omega = rng.normal(
                sim_config.gmm_mu[grades],
                sim_config.gmm_sigma[grades],
                size=(num_trials, n),
            )
            labels = np.where(clicks, 1.0 + np.exp(omega) / exp_delta, 0.0)
            cumulative = np.cumsum(labels, axis=1).mean(axis=0)
        for k in ks:
            totals[k] += float(cumulative[min(k, n) - 1])
    return {k: totals[k] / len(dataset) for k in ks}


def reward_at_k(
    model: RankerModel,
    dataset: Dataset,
    sim_config: SimConfig,
    k: int,
    num_trials: int = 100,
    rng: Optional[np.random.Generator] = None,
    expected: bool = False,
) -> float:
    return reward_at_ks(model, dataset, sim_config, [k], num_trials, rng, expected)[k]


@dataclass(frozen=True)
class MetricSummary:
    mean: float
    std: float
    runs: int


def aggregate_runs(values: Sequence[float]) -> MetricSummary:
    """Sample mean and (n-1)-denominator standard deviation; std is 0 for a
    single run."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 1:
        raise ValueError("need at least one run")
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return MetricSummary(mean=float(values.mean()), std=std, runs=int(values.size))


@dataclass(frozen=True)
class ReportRow:
    method: str
    metric: str
    k: int
    mean: float
    std: float
    runs: int


@dataclass
class EvalReport:
    rows: list[ReportRow]

    def row(self, method: str, metric: str, k: int) -> ReportRow:
        for row in self.rows:
            if row.method == method and row.metric == metric and row.k == k:
                return row
        raise KeyError(f"no row for {method}/{metric}@{k}")


REPORT_FIELDS = ("method", "metric", "k", "mean", "std", "runs")


def write_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in report.rows:
            writer.writerow(
                [row.method, row.metric, row.k, repr(row.mean), repr(row.std), row.runs]
            )


def read_report_csv(path) -> EvalReport:
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for record in reader:
            rows.append(
                ReportRow(
                    method=record["method"],
                    metric=record["metric"],
                    k=int(record["k"]),
                    mean=float(record["mean"]),
                    std=float(record["std"]),
                    runs=int(record["runs"]),
                )
            )
    return EvalReport(rows=rows)


def format_report_table(report: EvalReport) -> str:
    """Aligned mean +- std table, one line per method/metric/k."""
    headers = ("method", "metric", "k", "mean±std", "runs")
    lines = []
    for row in report.rows:
        lines.append(
            (
                row.method,
                row.metric,
                str(row.k),
                f"{row.mean:.4f}±{row.std:.4f}",
                str(row.runs),
            )
        )
    widths = [max(len(h), *(len(line[c]) for line in lines)) if lines else len(h)
              for c, h in enumerate(headers)]
    out = ["  ".join(h.ljust(widths[c]) for c, h in enumerate(headers))]
    out.append("  ".join("-" * widths[c] for c in range(len(headers))))
    for line in lines:
        out.append("  ".join(line[c].ljust(widths[c]) for c in range(len(headers))))
    return "\n".join(out)
