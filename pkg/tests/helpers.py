"""Shared test fixtures: independent generative-model samplers.

These samplers draw latent examination/relevance states directly and are
the oracles the estimation code is checked against; they share no code
with the implementation under test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ultrapair.core import Dataset, ImpressionLog, Item, LogEntry, Request


def sample_pair_events(
    th_i: float,
    th_j: float,
    eps_pos: float,
    eps_neg: float,
    gamma: float,
    beta_i: float,
    n: int,
    rng: np.random.Generator,
):
    """Draw n independent pair events from the examination/trust model.

    Returns a dict of boolean arrays: e_i, e_j (examinations), rel (true
    order holds), rel_i (first item relevant), order_pos (observed label
    order positive). The label order is positive with probability eps_pos
    or eps_neg when both items are examined depending on the true order,
    equals the first item's relevance when only the first is examined, and
    is never positive when the first item is unexamined.
    """
    e_i = rng.random(n) < th_i
    e_j = rng.random(n) < th_j
    rel = rng.random(n) < gamma
    rel_i = rng.random(n) < beta_i
    u = rng.random(n)
    both = e_i & e_j
    flip_prob = np.where(rel, eps_pos, eps_neg)
    order_pos = np.where(
        both,
        u < flip_prob,
        np.where(e_i & ~e_j, rel_i, False),
    )
    return {
        "e_i": e_i,
        "e_j": e_j,
        "rel": rel,
        "rel_i": rel_i,
        "order_pos": order_pos.astype(bool),
    }


def sample_point_events(theta: float, beta: float, n: int, rng: np.random.Generator):
    """Draw n point events: examined ~ Bern(theta), relevant ~ Bern(beta),
    positive label iff examined and relevant."""
    examined = rng.random(n) < theta
    relevant = rng.random(n) < beta
    return {
        "examined": examined,
        "relevant": relevant,
        "positive": examined & relevant,
    }


@dataclass
class TrustBiasWorld:
    """A synthetic world whose sessions have known examination and flip
    parameters.

    Every item is relevant with a distinct hidden score (a linear function
    of the features), so zero labels arise only from non-examination and
    every examined pair's label order preserves the true order with
    probability exactly `keep_prob` (the whole examined list is either kept
    in true order or reversed).
    """

    dataset: Dataset
    theta: np.ndarray
    keep_prob: float
    weights: np.ndarray

    def true_order_positive(self, request: Request, a: int, b: int) -> bool:
        score = lambda idx: float(request.items[idx].features @ self.weights)
        return score(a) > score(b)


def make_trust_bias_world(
    num_requests: int,
    num_positions: int,
    feature_dim: int,
    theta: np.ndarray,
    keep_prob: float,
    seed: int,
) -> TrustBiasWorld:
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-1.0, 1.0, size=feature_dim)
    requests = []
    width = len(str(num_requests - 1))
    for r in range(num_requests):
        # resample until hidden scores are pairwise distinct (ties break the
        # exact flip-marginal construction)
        while True:
            feats = rng.uniform(0.0, 1.0, size=(num_positions, feature_dim))
            scores = feats @ weights
            if len(np.unique(scores)) == num_positions:
                break
        request_id = f"w{r:0{width}d}"
        items = tuple(
            Item(item_id=f"{request_id}-i{k:02d}", features=feats[k])
            for k in range(num_positions)
        )
        requests.append(Request(request_id=request_id, items=items))
    return TrustBiasWorld(
        dataset=Dataset(requests=tuple(requests)),
        theta=np.asarray(theta, dtype=np.float64),
        keep_prob=keep_prob,
        weights=weights,
    )


def simulate_trust_bias_sessions(
    world: TrustBiasWorld, sessions_per_request: int, rng: np.random.Generator
) -> list[ImpressionLog]:
    """Sessions whose pairwise label-order statistics match the model
    exactly: P(order preserved | both examined) = keep_prob for every pair.

    Items are displayed in dataset order; examined items receive positive
    label values encoding either the true relevance order or its reverse,
    unexamined items receive zeros.
    """
    logs = []
    for request in world.dataset:
        n = len(request.items)
        scores = request.feature_matrix() @ world.weights
        for _ in range(sessions_per_request):
            examined = rng.random(n) < world.theta[:n]
            keep = rng.random() < world.keep_prob
            idx = np.where(examined)[0]
            labels = np.zeros(n)
            if len(idx) > 0:
                order = idx[np.argsort(-scores[idx])]
                if not keep:
                    order = order[::-1]
                labels[order] = np.arange(len(idx), 0, -1, dtype=np.float64)
            entries = tuple(
                LogEntry(
                    item_id=request.items[k].item_id,
                    position=k + 1,
                    click=int(labels[k] > 0),
                    dwell_time=0.0,
                    label_c=float(labels[k]),
                )
                for k in range(n)
            )
            logs.append(ImpressionLog(request_id=request.request_id, entries=entries))
    return logs
