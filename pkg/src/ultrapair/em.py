"""Regression-EM estimation of examination and label-flip parameters.

The expectation step turns each observed label pair or zero-label point
into posterior probabilities over the latent examination/relevance states;
the maximization step re-estimates the per-position examination vector, its
zero-label posterior variant, and the per-position-pair flip matrices as
expected-count ratios, then blends them into the running parameters. The
relevance quantities (pairwise preference and pointwise relevance) are not
free parameters: two small networks regress them from features, trained on
Bernoulli-sampled posterior labels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DENOM_FLOOR,
    Dataset,
    ImpressionLog,
    NumericDomainError,
    PropensityParams,
    clamp_prob,
)
from .network import Adagrad, PointwiseFit, RankerModel, fit_pointwise


@dataclass(frozen=True)
class PairObservation:
    """An ordered pair of displayed items whose labels satisfy c_i > c_j."""

    request_id: str
    i: int
    j: int
    features_i: np.ndarray
    features_j: np.ndarray
    c_i: float
    c_j: float

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("pair positions must differ")
        if not self.c_i > self.c_j:
            raise ValueError(f"need c_i > c_j, got {self.c_i} <= {self.c_j}")

    @property
    def c_j_zero(self) -> bool:
        return self.c_j == 0


@dataclass(frozen=True)
class PairPosterior:
    """Posterior latent-state probabilities for one ordered position pair.

    The first triple conditions on an observed positive label order
    (c_i > c_j) and partitions that event, so it sums to 1:
      p_ee_rgt   both examined and the true order holds
      p_ee_rle   both examined and the true order does not hold
      p_e_note   first examined and relevant, second unexamined
    The mirrored triple conditions on c_i <= c_j; its third member is
    identically zero (an examined relevant first item with an unexamined
    second item always produces a positive label order).
    """

    p_ee_rgt: float
    p_ee_rle: float
    p_e_note: float
    p_ee_rgt_cle: float
    p_ee_rle_cle: float
    p_e_note_cle: float = 0.0


@dataclass(frozen=True)
class EMConfig:
    """Settings for the mini-batch EM loop.

    alpha blends batch estimates into the running parameters (1.0 replaces
    them); alpha_decay rescales it once per epoch. batch_size counts
    impressions per mini-batch. bernoulli_sampling switches the regressor
    targets between sampled binary labels and soft posterior targets.
    pair_target_mode picks the preference-regressor target: "marginal"
    fills the unexamined-pair mass with the current preference estimate,
    "both_examined" conditions on joint examination instead.
    """

    alpha: float = 0.5
    alpha_decay: float = 1.0
    batch_size: int = 2000
    max_epochs: int = 20
    tolerance: float = 1e-3
    regressor_hidden: tuple[int, ...] = (16,)
    regressor_lr: float = 0.1
    regressor_steps: int = 80
    bernoulli_sampling: bool = True
    pair_target_mode: str = "marginal"
    max_pairs_per_request: Optional[int] = None
    init_params: Optional[PropensityParams] = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.pair_target_mode not in ("marginal", "both_examined"):
            raise ValueError(f"unknown pair_target_mode {self.pair_target_mode!r}")


# ---------------------------------------------------------------------------
# Expectation step
# ---------------------------------------------------------------------------


def _pair_posterior_arrays(th_i, th_j, ep, en, gamma, beta_i):
    """Vectorized posterior pieces for ordered pairs.

    Returns (num_rgt, num_rle, num_note, d) where d is the total
    probability of a positive label order for the pair.
    """
    th_i = clamp_prob(np.asarray(th_i, dtype=np.float64))
    th_j = clamp_prob(np.asarray(th_j, dtype=np.float64))
    ep = clamp_prob(np.asarray(ep, dtype=np.float64))
    en = clamp_prob(np.asarray(en, dtype=np.float64))
    gamma = clamp_prob(np.asarray(gamma, dtype=np.float64))
    beta_i = clamp_prob(np.asarray(beta_i, dtype=np.float64))
    num_rgt = th_i * th_j * ep * gamma
    num_rle = th_i * th_j * en * (1.0 - gamma)
    num_note = th_i * (1.0 - th_j) * beta_i
    d = num_rgt + num_rle + num_note
    return num_rgt, num_rle, num_note, d


def estep_pair_posteriors(
    obs: PairObservation,
    params: PropensityParams,
    gamma: float,
    beta_i: float,
) -> PairPosterior:
    """Posteriors of the latent states for one ordered pair.

    gamma is the current preference estimate for (features_i, features_j);
    beta_i the current relevance estimate for the first item. Both triples
    are computed: the observed-relation triple for c_i > c_j and the
    mirrored one for c_i <= c_j (used when the same position pair shows a
    non-positive label order).
    """
    ii, jj = obs.i - 1, obs.j - 1
    num_rgt, num_rle, num_note, d = _pair_posterior_arrays(
        params.theta[ii],
        params.theta[jj],
        params.eps_pos[ii, jj],
        params.eps_neg[ii, jj],
        gamma,
        beta_i,
    )
    if not np.isfinite(d) or not 0.0 < d < 1.0:
        raise NumericDomainError(f"pair-order probability {d} outside (0, 1)")
    th_i = clamp_prob(params.theta[ii])
    th_j = clamp_prob(params.theta[jj])
    ep = clamp_prob(params.eps_pos[ii, jj])
    en = clamp_prob(params.eps_neg[ii, jj])
    g = clamp_prob(gamma)
    comp = 1.0 - d
    return PairPosterior(
        p_ee_rgt=float(num_rgt / d),
        p_ee_rle=float(num_rle / d),
        p_e_note=float(num_note / d),
        p_ee_rgt_cle=float(th_i * th_j * (1.0 - ep) * g / comp),
        p_ee_rle_cle=float(th_i * th_j * (1.0 - en) * (1.0 - g) / comp),
    )


def estep_point_posteriors(
    position: int, params: PropensityParams, beta_i: float
) -> tuple[float, float]:
    """Zero-label posteriors at a position: (unexamined-but-relevant,
    examined-but-irrelevant). The remaining mass is unexamined-irrelevant."""
    th = clamp_prob(params.theta[position - 1])
    b = clamp_prob(beta_i)
    denom = 1.0 - th * b
    if denom < DENOM_FLOOR:
        raise NumericDomainError(f"theta*beta = {th * b} leaves no zero-label mass")
    return float((1.0 - th) * b / denom), float(th * (1.0 - b) / denom)


# ---------------------------------------------------------------------------
# Maximization step
# ---------------------------------------------------------------------------


@dataclass
class BatchStats:
    """Sufficient statistics accumulated over one mini-batch."""

    imp_count: np.ndarray
    pos_count: np.ndarray
    zero_count: np.ndarray
    exam_zero_sum: np.ndarray
    # eps numerators/denominator-complements, indexed [i-1, j-1]
    a_pos: np.ndarray
    b_pos: np.ndarray
    a_neg: np.ndarray
    b_neg: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "BatchStats":
        return cls(
            imp_count=np.zeros(n),
            pos_count=np.zeros(n),
            zero_count=np.zeros(n),
            exam_zero_sum=np.zeros(n),
            a_pos=np.zeros((n, n)),
            b_pos=np.zeros((n, n)),
            a_neg=np.zeros((n, n)),
            b_neg=np.zeros((n, n)),
        )


def mstep_batch_estimates(
    stats: BatchStats, params: PropensityParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Raw parameter estimates from batch statistics.

    Positions or position pairs with no data in the batch keep their
    current values. Returns (theta, theta_neg, eps_pos, eps_neg) without
    blending or projection.
    """
    theta = params.theta.copy()
    seen = stats.imp_count > 0
    theta[seen] = (stats.pos_count[seen] + stats.exam_zero_sum[seen]) / stats.imp_count[seen]

    theta_neg = params.theta_neg.copy()
    zeros = stats.zero_count > 0
    theta_neg[zeros] = stats.exam_zero_sum[zeros] / stats.zero_count[zeros]

    eps_pos = params.eps_pos.copy()
    den_pos = stats.a_pos + stats.b_pos
    cell = den_pos > 0
    eps_pos[cell] = stats.a_pos[cell] / den_pos[cell]

    eps_neg = params.eps_neg.copy()
    den_neg = stats.a_neg + stats.b_neg
    cell = den_neg > 0
    eps_neg[cell] = stats.a_neg[cell] / den_neg[cell]
    return theta, theta_neg, eps_pos, eps_neg


def blend(
    params: PropensityParams,
    estimates: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    alpha: float,
) -> PropensityParams:
    """Convex step old*(1-alpha) + estimate*alpha, then project to bounds.

    Probabilities are clamped into [1e-4, 1-1e-4]; any flip-matrix cell
    whose ordering is violated is pulled to its midpoint +- 1e-4.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    est_theta, est_theta_neg, est_eps_pos, est_eps_neg = estimates
    theta = clamp_prob((1.0 - alpha) * params.theta + alpha * est_theta)
    theta_neg = clamp_prob((1.0 - alpha) * params.theta_neg + alpha * est_theta_neg)
    eps_pos = clamp_prob((1.0 - alpha) * params.eps_pos + alpha * est_eps_pos)
    eps_neg = clamp_prob((1.0 - alpha) * params.eps_neg + alpha * est_eps_neg)
    bad = eps_pos <= eps_neg
    if np.any(bad):
        mid = np.clip((eps_pos + eps_neg) / 2.0, 2e-4, 1.0 - 2e-4)
        eps_pos = np.where(bad, mid + 1e-4, eps_pos)
        eps_neg = np.where(bad, mid - 1e-4, eps_neg)
    return PropensityParams(
        theta=theta, theta_neg=theta_neg, eps_pos=eps_pos, eps_neg=eps_neg
    )


# ---------------------------------------------------------------------------
# Regression targets and regressors
# ---------------------------------------------------------------------------


def pair_features(features_i: np.ndarray, features_j: np.ndarray) -> np.ndarray:
    """Pair encoding [x_i, x_j, x_i - x_j]; accepts (d,) or (B, d)."""
    features_i = np.atleast_2d(np.asarray(features_i, dtype=np.float64))
    features_j = np.atleast_2d(np.asarray(features_j, dtype=np.float64))
    return np.concatenate(
        [features_i, features_j, features_i - features_j], axis=1
    )


def pair_relevance_targets(
    p_ee_rgt: np.ndarray,
    p_ee_rle: np.ndarray,
    p_e_note: np.ndarray,
    gamma_current: np.ndarray,
    mode: str = "marginal",
) -> np.ndarray:
    """P(true order holds | observed c_i > c_j) used as the g target.

    marginal: unexamined-pair mass is filled with the current preference
    estimate. both_examined: renormalize over the jointly-examined states.
    """
    if mode == "marginal":
        return p_ee_rgt + p_e_note * gamma_current
    if mode == "both_examined":
        den = np.maximum(p_ee_rgt + p_ee_rle, DENOM_FLOOR)
        return p_ee_rgt / den
    raise ValueError(f"unknown pair_target_mode {mode!r}")


def sample_regression_targets(
    pair_probs: np.ndarray,
    point_probs: np.ndarray,
    rng: np.random.Generator,
    bernoulli: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Turn posterior probabilities into regression targets.

    With bernoulli=True each probability is replaced by a 0/1 draw, which
    converts the regression into a classification problem; otherwise the
    probabilities are used directly as soft targets.
    """
    if not bernoulli:
        return np.asarray(pair_probs, float), np.asarray(point_probs, float)
    pair_t = (rng.random(len(pair_probs)) < pair_probs).astype(np.float64)
    point_t = (rng.random(len(point_probs)) < point_probs).astype(np.float64)
    return pair_t, point_t


@dataclass
class Regressors:
    """The preference network g (pair features) and relevance network h."""

    g: RankerModel
    h: RankerModel
    g_opt: Optional[Adagrad] = None
    h_opt: Optional[Adagrad] = None

    def gamma(self, pair_feats: np.ndarray) -> np.ndarray:
        return clamp_prob(self.g.predict_prob(pair_feats))

    def beta(self, feats: np.ndarray) -> np.ndarray:
        return clamp_prob(self.h.predict_prob(feats))


def fit_regressors(
    pair_feats: np.ndarray,
    pair_targets: np.ndarray,
    point_feats: np.ndarray,
    point_targets: np.ndarray,
    config: EMConfig,
    rng: np.random.Generator,
    regressors: Optional[Regressors] = None,
) -> Regressors:
    """Fit (or keep training) g on pair targets and h on point targets.

    Both use the scoring network with a sigmoid read-out and binary
    cross-entropy. Passing existing regressors warm-starts them.
    """
    if len(pair_targets) == 0 or len(point_targets) == 0:
        raise ValueError("empty regression training set")
    if regressors is None:
        regressors = Regressors(
            g=RankerModel.for_input(pair_feats.shape[1], config.regressor_hidden, rng),
            h=RankerModel.for_input(point_feats.shape[1], config.regressor_hidden, rng),
        )
    fit = PointwiseFit(
        learning_rate=config.regressor_lr,
        steps=config.regressor_steps,
        batch_size=256,
        loss="bce",
    )
    regressors.g_opt = fit_pointwise(
        regressors.g, pair_feats, pair_targets, fit, rng, optimizer=regressors.g_opt
    )
    regressors.h_opt = fit_pointwise(
        regressors.h, point_feats, point_targets, fit, rng, optimizer=regressors.h_opt
    )
    return regressors


# ---------------------------------------------------------------------------
# Data preparation for the EM loop
# ---------------------------------------------------------------------------


@dataclass
class _EMData:
    """Flattened observation arrays shared by all epochs."""

    point_feats: np.ndarray  # (P, d)
    point_pos: np.ndarray  # (P,) 1-based positions
    point_positive: np.ndarray  # (P,) bool, label > 0
    pair_first: np.ndarray  # (Q,) index into points
    pair_second: np.ndarray  # (Q,) index into points
    pair_positive: np.ndarray  # (Q,) bool, c_first > c_second
    session_points: list[np.ndarray]
    session_pairs: list[np.ndarray]
    num_positions: int

    @property
    def num_sessions(self) -> int:
        return len(self.session_points)


def _prepare_em_data(
    logs: Sequence[ImpressionLog],
    dataset: Dataset,
    max_pairs_per_request: Optional[int],
    rng: np.random.Generator,
) -> _EMData:
    if not logs:
        raise ValueError("no impression logs supplied")
    items_by_request = {
        request.request_id: {item.item_id: item for item in request.items}
        for request in dataset
    }
    point_feats, point_pos, point_positive = [], [], []
    pair_first, pair_second, pair_positive = [], [], []
    session_points, session_pairs = [], []
    num_positions = 0
    offset = 0
    pair_offset = 0
    for log in logs:
        lookup = items_by_request.get(log.request_id)
        if lookup is None:
            raise ValueError(f"log references unknown request {log.request_id!r}")
        n = len(log.entries)
        num_positions = max(num_positions, n)
        labels = log.labels()
        for entry in log.entries:
            item = lookup.get(entry.item_id)
            if item is None:
                raise ValueError(
                    f"log references unknown item {entry.item_id!r} "
                    f"in request {log.request_id!r}"
                )
            point_feats.append(item.features)
            point_pos.append(entry.position)
            point_positive.append(entry.label_c > 0)
        first, second = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        keep = first != second
        first, second = first[keep], second[keep]
        if max_pairs_per_request is not None and len(first) > max_pairs_per_request:
            take = rng.choice(len(first), size=max_pairs_per_request, replace=False)
            take.sort()
            first, second = first[take], second[take]
        pair_first.append(first + offset)
        pair_second.append(second + offset)
        pair_positive.append(labels[first] > labels[second])
        session_points.append(np.arange(offset, offset + n))
        session_pairs.append(np.arange(pair_offset, pair_offset + len(first)))
        pair_offset += len(first)
        offset += n
    return _EMData(
        point_feats=np.stack(point_feats),
        point_pos=np.array(point_pos, dtype=np.int64),
        point_positive=np.array(point_positive, dtype=bool),
        pair_first=np.concatenate(pair_first),
        pair_second=np.concatenate(pair_second),
        pair_positive=np.concatenate(pair_positive),
        session_points=session_points,
        session_pairs=session_pairs,
        num_positions=num_positions,
    )


# ---------------------------------------------------------------------------
# The EM loop
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    """One epoch of the convergence trace.

    loglik is the data log-likelihood of the state *entering* the epoch
    (summed over batches as they were visited); for full-batch runs this is
    the classic EM sequence, which must be non-decreasing.
    """

    epoch: int
    max_param_delta: float
    loglik: float
    theta: np.ndarray


@dataclass
class EMResult:
    params: PropensityParams
    regressors: Regressors
    trace: list[TraceRow]
    converged: bool

    @property
    def g(self) -> RankerModel:
        return self.regressors.g

    @property
    def h(self) -> RankerModel:
        return self.regressors.h


def _batch_gamma_beta(
    data: _EMData,
    first: np.ndarray,
    second: np.ndarray,
    regressors: Optional[Regressors],
    gamma0: float,
    beta0: float,
):
    """Preference/relevance estimates for a slice of ordered pairs (or the
    first-pass constants before any regressor exists)."""
    if regressors is None:
        return np.full(len(first), gamma0), np.full(len(first), beta0)
    feats_first = data.point_feats[first]
    gamma = regressors.gamma(pair_features(feats_first, data.point_feats[second]))
    return gamma, regressors.beta(feats_first)


def _accumulate_batch(
    data: _EMData,
    pair_idx: np.ndarray,
    point_idx: np.ndarray,
    params: PropensityParams,
    regressors: Optional[Regressors],
    gamma0: float,
    beta0: float,
    pair_target_mode: str = "marginal",
    chunk: int = 250_000,
) -> tuple[BatchStats, np.ndarray, np.ndarray, np.ndarray, float]:
    """E-step over one batch of impressions, chunked to bound memory.

    Returns (stats, pair target probabilities for the strict pairs of the
    batch, their indices into the global pair arrays, point target
    probabilities for the batch points, batch log-likelihood under the
    current parameters and regressors).
    """
    n = params.num_positions
    stats = BatchStats.zeros(n)

    pos_i = data.point_pos[point_idx] - 1
    positive = data.point_positive[point_idx]
    if regressors is None:
        beta_point = np.full(len(point_idx), beta0)
    else:
        beta_point = regressors.beta(data.point_feats[point_idx])
    stats.imp_count += np.bincount(pos_i, minlength=n)
    stats.pos_count += np.bincount(pos_i[positive], minlength=n)
    zero_pos = pos_i[~positive]
    th = clamp_prob(params.theta[zero_pos])
    b = clamp_prob(beta_point[~positive])
    denom = np.maximum(1.0 - th * b, DENOM_FLOOR)
    p_note_rpos = (1.0 - th) * b / denom
    p_e_rneg = th * (1.0 - b) / denom
    stats.zero_count += np.bincount(zero_pos, minlength=n)
    stats.exam_zero_sum += np.bincount(zero_pos, weights=p_e_rneg, minlength=n)
    point_probs = np.ones(len(point_idx))
    point_probs[~positive] = p_note_rpos

    th_pt = clamp_prob(params.theta[pos_i])
    p_pos = np.clip(th_pt * clamp_prob(beta_point), DENOM_FLOOR, 1.0 - DENOM_FLOOR)
    loglik = float(np.where(positive, np.log(p_pos), np.log1p(-p_pos)).sum())

    pair_prob_chunks = []
    pair_index_chunks = []
    for lo in range(0, len(pair_idx), chunk):
        sl = pair_idx[lo : lo + chunk]
        first = data.pair_first[sl]
        second = data.pair_second[sl]
        gamma, beta_pair = _batch_gamma_beta(
            data, first, second, regressors, gamma0, beta0
        )
        pi = data.point_pos[first] - 1
        pj = data.point_pos[second] - 1
        rel = data.pair_positive[sl]
        num_rgt, num_rle, num_note, d = _pair_posterior_arrays(
            params.theta[pi],
            params.theta[pj],
            params.eps_pos[pi, pj],
            params.eps_neg[pi, pj],
            gamma,
            beta_pair,
        )
        d = np.clip(d, DENOM_FLOOR, 1.0 - DENOM_FLOOR)
        loglik += float(np.where(rel, np.log(d), np.log1p(-d)).sum())
        flat = pi * n + pj
        th_i = clamp_prob(params.theta[pi])
        th_j = clamp_prob(params.theta[pj])
        ep = clamp_prob(params.eps_pos[pi, pj])
        en = clamp_prob(params.eps_neg[pi, pj])
        g = clamp_prob(gamma)

        cells = n * n
        stats.a_pos += np.bincount(
            flat[rel], weights=(num_rgt / d)[rel], minlength=cells
        ).reshape(n, n)
        stats.a_neg += np.bincount(
            flat[rel], weights=(num_rle / d)[rel], minlength=cells
        ).reshape(n, n)
        comp = 1.0 - d
        stats.b_pos += np.bincount(
            flat[~rel],
            weights=(th_i * th_j * (1.0 - ep) * g / comp)[~rel],
            minlength=cells,
        ).reshape(n, n)
        stats.b_neg += np.bincount(
            flat[~rel],
            weights=(th_i * th_j * (1.0 - en) * (1.0 - g) / comp)[~rel],
            minlength=cells,
        ).reshape(n, n)

        # regression targets only exist for strict (label-ordered) pairs
        target = pair_relevance_targets(
            (num_rgt / d)[rel],
            (num_rle / d)[rel],
            (num_note / d)[rel],
            gamma[rel],
            mode=pair_target_mode,
        )
        pair_prob_chunks.append(target)
        pair_index_chunks.append(sl[rel])
    pair_probs = (
        np.concatenate(pair_prob_chunks) if pair_prob_chunks else np.zeros(0)
    )
    pair_indices = (
        np.concatenate(pair_index_chunks)
        if pair_index_chunks
        else np.zeros(0, dtype=np.int64)
    )
    return stats, pair_probs, pair_indices, point_probs, loglik


def run_em(
    logs: Sequence[ImpressionLog],
    dataset: Dataset,
    config: EMConfig,
) -> EMResult:
    """Iterate E-step / blended M-step / regressor refresh until the largest
    parameter change in an epoch drops below the tolerance.

    Returns the best state seen (by data log-likelihood); converged is
    False when the epoch budget ran out first.
    """
    rng = np.random.default_rng(config.rng_seed)
    data = _prepare_em_data(logs, dataset, config.max_pairs_per_request, rng)
    n = data.num_positions
    params = config.init_params or PropensityParams.initial(n)
    if params.num_positions < n:
        raise ValueError(
            f"params cover {params.num_positions} positions, logs use {n}"
        )
    gamma0 = 0.5
    beta0 = float(np.clip(data.point_positive.mean(), 1e-3, 1.0 - 1e-3))
    regressors: Optional[Regressors] = None

    trace: list[TraceRow] = []
    best: Optional[tuple[float, PropensityParams, Regressors]] = None
    converged = False
    alpha = config.alpha
    regression_cap = 100_000  # pairs per refresh; bounds memory and fit time
    for epoch in range(config.max_epochs):
        epoch_start = params
        # snapshot of the state whose likelihood this epoch measures
        entry_state = (
            params,
            Regressors(g=regressors.g.copy(), h=regressors.h.copy())
            if regressors is not None
            else None,
        )
        epoch_loglik = 0.0
        order = rng.permutation(data.num_sessions)
        for lo in range(0, data.num_sessions, config.batch_size):
            batch_sessions = order[lo : lo + config.batch_size]
            point_idx = np.concatenate([data.session_points[s] for s in batch_sessions])
            pair_idx = np.concatenate([data.session_pairs[s] for s in batch_sessions])
            stats, pair_probs, strict_idx, point_probs, batch_ll = _accumulate_batch(
                data,
                pair_idx,
                point_idx,
                params,
                regressors,
                gamma0,
                beta0,
                config.pair_target_mode,
            )
            epoch_loglik += batch_ll
            estimates = mstep_batch_estimates(stats, params)
            params = blend(params, estimates, alpha)

            if len(strict_idx) > regression_cap:
                keep = rng.choice(len(strict_idx), size=regression_cap, replace=False)
                keep.sort()
                pair_probs, strict_idx = pair_probs[keep], strict_idx[keep]
            pair_t, point_t = sample_regression_targets(
                pair_probs, point_probs, rng, config.bernoulli_sampling
            )
            # both orientations of every strict pair, with complementary labels
            feats_first = data.point_feats[data.pair_first[strict_idx]]
            feats_second = data.point_feats[data.pair_second[strict_idx]]
            g_feats = np.concatenate(
                [
                    pair_features(feats_first, feats_second),
                    pair_features(feats_second, feats_first),
                ]
            )
            g_targets = np.concatenate([pair_t, 1.0 - pair_t])
            if len(g_targets) > 0:
                regressors = fit_regressors(
                    g_feats,
                    g_targets,
                    data.point_feats[point_idx],
                    point_t,
                    config,
                    rng,
                    regressors,
                )
        delta = max(
            float(np.max(np.abs(params.theta - epoch_start.theta))),
            float(np.max(np.abs(params.theta_neg - epoch_start.theta_neg))),
            float(np.max(np.abs(params.eps_pos - epoch_start.eps_pos))),
            float(np.max(np.abs(params.eps_neg - epoch_start.eps_neg))),
        )
        trace.append(
            TraceRow(
                epoch=epoch,
                max_param_delta=delta,
                loglik=epoch_loglik,
                theta=params.theta.copy(),
            )
        )
        if entry_state[1] is not None and (best is None or epoch_loglik > best[0]):
            best = (epoch_loglik, entry_state[0], entry_state[1])
        alpha *= config.alpha_decay
        if delta < config.tolerance:
            converged = True
            break
    if regressors is None:
        raise ValueError("EM never produced regression training data")
    if converged or best is None:
        final_state = (params, regressors)
    else:
        # budget ran out: hand back the highest-likelihood state seen
        final_state = (best[1], best[2])
    return EMResult(
        params=final_state[0],
        regressors=final_state[1],
        trace=trace,
        converged=converged,
    )


def write_trace_csv(trace: Sequence[TraceRow], path, num_positions: int) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["epoch", "max_param_delta", "loglik"]
            + [f"theta_{i}" for i in range(1, num_positions + 1)]
        )
        for row in trace:
            writer.writerow(
                [row.epoch, repr(row.max_param_delta), repr(row.loglik)]
                + [repr(float(v)) for v in row.theta]
            )
