"""Debiased pairwise losses, pair weighting, and the ranker training loop.

Training minimizes a weighted sum of logistic pairwise losses over the
positive-label pairs of the impression logs. The weight of a pair depends
on the selected variant: inverse examination propensities alone, with the
posterior probability that the label order reflects the true order, and
optionally with a metric-impact factor recomputed from the model's own
ranking each epoch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    DENOM_FLOOR,
    Dataset,
    ImpressionLog,
    NumericDomainError,
    PropensityParams,
    TrainingFailureError,
    clamp_prob,
)
from .em import PairObservation, Regressors, pair_features
from .evaluation import ndcg_at_k, reward_at_ks
from .network import Adagrad, RankerModel, sigmoid, softplus
from .simulate import SimConfig


class LossVariant(enum.Enum):
    IPW = "IPW"
    BAYES_IPW = "BayesIPW"
    OPT = "Opt"
    NAIVE_PAIRWISE = "NaivePairwise"
    NAIVE_POINTWISE = "NaivePointwise"
    ORACLE_PAIRWISE = "OraclePairwise"

    @classmethod
    def parse(cls, name: str) -> "LossVariant":
        for variant in cls:
            if variant.value == name:
                return variant
        raise ValueError(f"unknown loss variant {name!r}")


DEBIASED_VARIANTS = (LossVariant.IPW, LossVariant.BAYES_IPW, LossVariant.OPT)


@dataclass(frozen=True)
class TrainConfig:
    """Ranker training settings. The learning rate is worth tuning in
    [5e-3, 5e-2]; hidden layer sizes default to the full-scale network but
    desk-scale runs use something like (64, 32)."""

    learning_rate: float = 0.02
    epochs: int = 30
    batch_size: int = 256
    hidden: tuple[int, ...] = (512, 256, 128)
    gain_mode: str = "linear"  # gain for the metric-impact factor
    val_metric: str = "reward"  # "reward" or "ndcg", used for model selection
    val_k: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.gain_mode not in ("linear", "exponential"):
            raise ValueError(f"unknown gain_mode {self.gain_mode!r}")
        if self.val_metric not in ("reward", "ndcg"):
            raise ValueError(f"unknown val_metric {self.val_metric!r}")


def pairwise_base_loss(score_i, score_j):
    """Logistic loss on the score difference, with gradients.

    L = log(1 + exp(-(s_i - s_j))). Returns (loss, (dL/ds_i, dL/ds_j));
    overflow-safe for any finite difference. Accepts scalars or arrays.
    """
    diff = np.asarray(score_i, dtype=np.float64) - np.asarray(score_j, dtype=np.float64)
    loss = softplus(-diff)
    slope = sigmoid(-np.atleast_1d(diff))
    if np.ndim(score_i) == 0:
        return float(loss), (float(-slope[0]), float(slope[0]))
    return loss, (-slope, slope)


def _m_from_eps(eps_pos, eps_neg, gamma):
    """Posterior that the true order holds given a positive label order and
    joint examination."""
    ep = clamp_prob(np.asarray(eps_pos, dtype=np.float64))
    en = clamp_prob(np.asarray(eps_neg, dtype=np.float64))
    g = clamp_prob(np.asarray(gamma, dtype=np.float64))
    den = ep * g + en * (1.0 - g)
    if np.any(den < DENOM_FLOOR):
        raise NumericDomainError("label-order probability vanished")
    return ep * g / den


def compute_m_ij(params: PropensityParams, gamma: float, i: int, j: int) -> float:
    """Trust-bias correction for the pair at positions (i, j)."""
    return float(_m_from_eps(params.eps_pos[i - 1, j - 1], params.eps_neg[i - 1, j - 1], gamma))


def _h_from_params(theta_i, theta_neg_j, eps_pos, eps_neg, gamma, beta_i):
    """Posterior examination probability of the second item when its label
    is zero."""
    th_i = clamp_prob(np.asarray(theta_i, dtype=np.float64))
    th_j = clamp_prob(np.asarray(theta_neg_j, dtype=np.float64))
    ep = clamp_prob(np.asarray(eps_pos, dtype=np.float64))
    en = clamp_prob(np.asarray(eps_neg, dtype=np.float64))
    g = clamp_prob(np.asarray(gamma, dtype=np.float64))
    b = clamp_prob(np.asarray(beta_i, dtype=np.float64))
    mix = ep * g + en * (1.0 - g)
    num = th_i * th_j * mix
    den = num + th_i * (1.0 - th_j) * b
    den = np.maximum(den, DENOM_FLOOR)
    return num / den


def compute_h_ij(
    params: PropensityParams, gamma: float, beta_i: float, i: int, j: int
) -> float:
    """Zero-label examination posterior for the pair at positions (i, j)."""
    return float(
        _h_from_params(
            params.theta[i - 1],
            params.theta_neg[j - 1],
            params.eps_pos[i - 1, j - 1],
            params.eps_neg[i - 1, j - 1],
            gamma,
            beta_i,
        )
    )


def _gain(labels, gain_mode: str):
    labels = np.asarray(labels, dtype=np.float64)
    if gain_mode == "linear":
        return labels
    if gain_mode == "exponential":
        return 2.0**labels - 1.0
    raise ValueError(f"unknown gain_mode {gain_mode!r}")


def delta_z(rank_i, rank_j, label_i, label_j, gain_mode: str = "linear"):
    """|DCG change| if the items at the two ranks swapped places, computed
    on the (biased) labels. Accepts scalars or arrays."""
    gains = np.abs(_gain(label_i, gain_mode) - _gain(label_j, gain_mode))
    disc_i = 1.0 / np.log2(1.0 + np.asarray(rank_i, dtype=np.float64))
    disc_j = 1.0 / np.log2(1.0 + np.asarray(rank_j, dtype=np.float64))
    out = gains * np.abs(disc_i - disc_j)
    return float(out) if np.ndim(out) == 0 else out


def pair_weight(
    variant: LossVariant,
    obs: PairObservation,
    params: Optional[PropensityParams],
    g_model: Optional[RankerModel],
    h_model: Optional[RankerModel],
) -> float:
    """Static weight of one training pair under the given variant.

    Debiased variants divide by both examination propensities, apply the
    trust-bias posterior where selected, and multiply by the zero-label
    examination posterior when the lower item was not interacted with. The
    metric-impact factor of the Opt variant is applied per epoch by the
    trainer, not here, because it depends on the model's current ranking.
    """
    if variant in (LossVariant.NAIVE_PAIRWISE, LossVariant.ORACLE_PAIRWISE):
        return 1.0
    if variant == LossVariant.NAIVE_POINTWISE:
        raise ValueError("pointwise variant has no pair weight")
    if params is None:
        raise ValueError(f"{variant.value} requires propensity parameters")
    ii, jj = obs.i - 1, obs.j - 1
    theta_i = float(clamp_prob(params.theta[ii]))
    theta_j = float(clamp_prob(params.theta[jj]))
    weight = 1.0 / (theta_i * theta_j)
    gamma = beta_i = None
    if variant in (LossVariant.BAYES_IPW, LossVariant.OPT):
        if g_model is None:
            raise ValueError(f"{variant.value} requires the preference regressor")
        gamma = float(
            clamp_prob(g_model.predict_prob(pair_features(obs.features_i, obs.features_j)))[0]
        )
        weight *= compute_m_ij(params, gamma, obs.i, obs.j)
    if obs.c_j_zero:
        if h_model is None:
            raise ValueError(f"{variant.value} requires the relevance regressor")
        if gamma is None:
            gamma = float(
                clamp_prob(
                    g_model.predict_prob(pair_features(obs.features_i, obs.features_j))
                )[0]
            ) if g_model is not None else 0.5
        beta_i = float(clamp_prob(h_model.predict_prob(obs.features_i[None, :]))[0])
        weight *= compute_h_ij(params, gamma, beta_i, obs.i, obs.j)
    return weight


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------


@dataclass
class PairTrainingData:
    """Flattened pair arrays plus per-query context for the metric factor.

    query_feats holds one feature matrix per distinct displayed list;
    query_index/local_i/local_j address items within it, so the model's
    current per-query ranks are recomputed once per list, not per session.
    """

    feats_i: np.ndarray  # (Q, d)
    feats_j: np.ndarray  # (Q, d)
    weights: np.ndarray  # (Q,) static part
    query_index: np.ndarray  # (Q,) index into query_feats
    local_i: np.ndarray  # (Q,) item index within the query
    local_j: np.ndarray
    label_i: np.ndarray  # biased labels, for the metric factor
    label_j: np.ndarray
    query_feats: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.weights)


def build_training_pairs(
    logs: Sequence[ImpressionLog],
    dataset: Dataset,
    params: Optional[PropensityParams],
    regressors: Optional[Regressors],
    variant: LossVariant,
    max_pairs_per_request: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> PairTrainingData:
    """Enumerate positive-label training pairs with their static weights.

    For the oracle variant, pairs come from true relevance grades over the
    full candidate lists instead of the logs. Sessions showing the same
    item list are grouped so per-pair quantities (propensities, preference
    and relevance estimates) are computed once per distinct pair.
    """
    if variant == LossVariant.NAIVE_POINTWISE:
        raise ValueError("pointwise variant trains on points, not pairs")
    if variant in DEBIASED_VARIANTS and params is None:
        raise ValueError(f"{variant.value} requires propensity parameters")
    if variant in DEBIASED_VARIANTS and regressors is None:
        raise ValueError(f"{variant.value} requires the fitted regressors")

    feats_i, feats_j, weights = [], [], []
    query_index, local_i, local_j, label_i, label_j = [], [], [], [], []
    query_feats: list[np.ndarray] = []

    def pair_weight_table(feats: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Static weight of every ordered (first, second) pair of one
        displayed list: (weights without the zero-label factor, the
        zero-label factor). Index [a, b] with 0-based display positions."""
        if variant == LossVariant.NAIVE_PAIRWISE or variant == LossVariant.ORACLE_PAIRWISE:
            return np.ones((n, n)), np.ones((n, n))
        a, b = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        theta_i = clamp_prob(params.theta[a])
        theta_j = clamp_prob(params.theta[b])
        w = 1.0 / (theta_i * theta_j)
        gamma = clamp_prob(
            regressors.g.predict_prob(
                pair_features(feats[a.ravel()], feats[b.ravel()])
            ).reshape(n, n)
        )
        if variant in (LossVariant.BAYES_IPW, LossVariant.OPT):
            w = w * _m_from_eps(params.eps_pos[a, b], params.eps_neg[a, b], gamma)
        beta = clamp_prob(regressors.h.predict_prob(feats))
        h = _h_from_params(
            params.theta[a],
            params.theta_neg[b],
            params.eps_pos[a, b],
            params.eps_neg[a, b],
            gamma,
            beta[a],
        )
        return w, h

    def add_group(feats: np.ndarray, label_rows: np.ndarray):
        """All strict pairs of a group of sessions sharing one item list."""
        n = feats.shape[0]
        qi = len(query_feats)
        query_feats.append(feats)
        base_w, zero_h = pair_weight_table(feats, n)
        for labels in label_rows:
            first, second = np.nonzero(labels[:, None] > labels[None, :])
            if max_pairs_per_request is not None and len(first) > max_pairs_per_request:
                if rng is None:
                    raise ValueError("max_pairs_per_request needs an rng")
                take = rng.choice(len(first), size=max_pairs_per_request, replace=False)
                take.sort()
                first, second = first[take], second[take]
            if len(first) == 0:
                continue
            w = base_w[first, second]
            zero = labels[second] == 0
            if np.any(zero):
                w = np.where(zero, w * zero_h[first, second], w)
            feats_i.append(feats[first])
            feats_j.append(feats[second])
            weights.append(w)
            query_index.append(np.full(len(first), qi))
            local_i.append(first)
            local_j.append(second)
            label_i.append(labels[first])
            label_j.append(labels[second])

    if variant == LossVariant.ORACLE_PAIRWISE:
        for request in dataset:
            grades = request.grades().astype(np.float64)
            add_group(request.feature_matrix(), grades[None, :])
    else:
        items_by_request = {
            request.request_id: {item.item_id: item for item in request.items}
            for request in dataset
        }
        groups: dict[tuple, tuple[np.ndarray, list[np.ndarray]]] = {}
        for log in logs:
            lookup = items_by_request.get(log.request_id)
            if lookup is None:
                raise ValueError(f"log references unknown request {log.request_id!r}")
            key = (log.request_id, tuple(e.item_id for e in log.entries))
            if key not in groups:
                try:
                    feats = np.stack([lookup[e.item_id].features for e in log.entries])
                except KeyError as exc:
                    raise ValueError(
                        f"log references unknown item {exc.args[0]!r} "
                        f"in request {log.request_id!r}"
                    ) from None
                groups[key] = (feats, [])
            groups[key][1].append(log.labels())
        for feats, label_rows in groups.values():
            add_group(feats, np.stack(label_rows))

    if not weights:
        # no strict label inequality anywhere: legitimate (all-tied labels),
        # training is then a no-op
        dim = dataset.feature_dim
        empty = np.zeros(0)
        return PairTrainingData(
            feats_i=np.zeros((0, dim)),
            feats_j=np.zeros((0, dim)),
            weights=empty,
            query_index=np.zeros(0, dtype=np.int64),
            local_i=np.zeros(0, dtype=np.int64),
            local_j=np.zeros(0, dtype=np.int64),
            label_i=empty,
            label_j=empty,
            query_feats=query_feats,
        )
    return PairTrainingData(
        feats_i=np.concatenate(feats_i),
        feats_j=np.concatenate(feats_j),
        weights=np.concatenate(weights).astype(np.float64),
        query_index=np.concatenate(query_index),
        local_i=np.concatenate(local_i),
        local_j=np.concatenate(local_j),
        label_i=np.concatenate(label_i),
        label_j=np.concatenate(label_j),
        query_feats=query_feats,
    )


def build_pointwise_data(
    logs: Sequence[ImpressionLog], dataset: Dataset
) -> tuple[np.ndarray, np.ndarray]:
    """Per-impression (features, combined label) pairs for the pointwise
    baseline."""
    items_by_request = {
        request.request_id: {item.item_id: item for item in request.items}
        for request in dataset
    }
    feats, labels = [], []
    for log in logs:
        lookup = items_by_request[log.request_id]
        for entry in log.entries:
            feats.append(lookup[entry.item_id].features)
            labels.append(entry.label_c)
    return np.stack(feats), np.array(labels, dtype=np.float64)


def _current_metric_factors(
    model: RankerModel, data: PairTrainingData, gain_mode: str
) -> np.ndarray:
    """Metric-impact factor per pair from the model's current per-query
    ranking (ties resolved by item index for determinism)."""
    ranks_per_query = []
    for feats in data.query_feats:
        scores = np.atleast_1d(model.forward(feats))
        order = np.lexsort((np.arange(len(scores)), -scores))
        ranks = np.empty(len(scores), dtype=np.int64)
        ranks[order] = np.arange(1, len(scores) + 1)
        ranks_per_query.append(ranks)
    rank_i = np.array(
        [ranks_per_query[q][a] for q, a in zip(data.query_index, data.local_i)]
    )
    rank_j = np.array(
        [ranks_per_query[q][b] for q, b in zip(data.query_index, data.local_j)]
    )
    return delta_z(rank_i, rank_j, data.label_i, data.label_j, gain_mode)


def _validation_score(
    model: RankerModel,
    valid_dataset: Dataset,
    sim_config: Optional[SimConfig],
    config: TrainConfig,
) -> float:
    if config.val_metric == "reward":
        if sim_config is None:
            raise ValueError("reward validation needs a simulation config")
        return reward_at_ks(
            model, valid_dataset, sim_config, [config.val_k], expected=True
        )[config.val_k]
    total = 0.0
    for request in valid_dataset:
        scores = np.atleast_1d(model.forward(request.feature_matrix()))
        order = np.lexsort((np.arange(len(scores)), -scores))
        total += ndcg_at_k(order, request.grades(), config.val_k)
    return total / len(valid_dataset)


def train_ranker(
    logs: Sequence[ImpressionLog],
    dataset: Dataset,
    params: Optional[PropensityParams],
    regressors: Optional[Regressors],
    variant: LossVariant,
    config: TrainConfig,
    valid_dataset: Optional[Dataset] = None,
    sim_config: Optional[SimConfig] = None,
) -> RankerModel:
    """Train a scoring network under the selected loss variant.

    Deterministic for a fixed config seed. When a validation dataset is
    given, the weights from the best validation epoch are returned;
    otherwise the final weights.
    """
    rng = np.random.default_rng(config.rng_seed)
    model = RankerModel.for_input(dataset.feature_dim, config.hidden, rng)
    optimizer = Adagrad(model, config.learning_rate)

    if variant == LossVariant.NAIVE_POINTWISE:
        feats, labels = build_pointwise_data(logs, dataset)
        return _train_pointwise_ranker(
            model, optimizer, feats, labels, config, rng, valid_dataset, sim_config
        )

    data = build_training_pairs(logs, dataset, params, regressors, variant)
    num_pairs = len(data)
    best_score, best_weights = -np.inf, None
    for epoch in range(config.epochs):
        if variant == LossVariant.OPT:
            epoch_weights = data.weights * _current_metric_factors(
                model, data, config.gain_mode
            )
        else:
            epoch_weights = data.weights
        order = rng.permutation(num_pairs)
        for lo in range(0, num_pairs, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            w = epoch_weights[idx]
            cache_i: list = []
            cache_j: list = []
            scores_i = np.atleast_1d(model.forward(data.feats_i[idx], cache=cache_i))
            scores_j = np.atleast_1d(model.forward(data.feats_j[idx], cache=cache_j))
            losses, (grad_i, grad_j) = pairwise_base_loss(scores_i, scores_j)
            loss = float(np.mean(w * losses))
            if not np.isfinite(loss):
                raise TrainingFailureError(
                    f"{variant.value} loss diverged", epoch=epoch
                )
            scale = w / len(idx)
            gw_i, gb_i = model.backward(cache_i, scale * grad_i)
            gw_j, gb_j = model.backward(cache_j, scale * grad_j)
            grad_w = [a + b for a, b in zip(gw_i, gw_j)]
            grad_b = [a + b for a, b in zip(gb_i, gb_j)]
            optimizer.step(model, grad_w, grad_b)
        if valid_dataset is not None:
            score = _validation_score(model, valid_dataset, sim_config, config)
            if score > best_score:
                best_score = score
                best_weights = model.copy()
    return best_weights if best_weights is not None else model


def _train_pointwise_ranker(
    model: RankerModel,
    optimizer: Adagrad,
    feats: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
    valid_dataset: Optional[Dataset],
    sim_config: Optional[SimConfig],
) -> RankerModel:
    """Squared-error regression on the combined label."""
    n = len(labels)
    best_score, best_weights = -np.inf, None
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            cache: list = []
            scores = np.atleast_1d(model.forward(feats[idx], cache=cache))
            diff = scores - labels[idx]
            loss = float(np.mean(diff**2))
            if not np.isfinite(loss):
                raise TrainingFailureError("pointwise loss diverged", epoch=epoch)
            grad_w, grad_b = model.backward(cache, 2.0 * diff / len(idx))
            optimizer.step(model, grad_w, grad_b)
        if valid_dataset is not None:
            score = _validation_score(model, valid_dataset, sim_config, config)
            if score > best_score:
                best_score = score
                best_weights = model.copy()
    return best_weights if best_weights is not None else model
