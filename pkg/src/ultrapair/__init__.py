"""Unbiased pairwise learning-to-rank from biased continuous feedback.

The package covers the full experiment loop: parse or generate ranking
data (`ingest`), simulate position-biased clicks and dwell times
(`simulate`), estimate examination and label-flip parameters with a
pairwise regression-EM (`em`), train rankers under debiased pairwise
losses (`rank`), and score the results (`evaluation`). The `ultra-pair`
CLI wires those stages together from one JSON config.
"""

from .core import (
    Dataset,
    DegenerateSampleError,
    ImpressionLog,
    Item,
    LetorParseError,
    LogEntry,
    LogSchemaError,
    NumericDomainError,
    PropensityParams,
    Request,
    TrainingFailureError,
    rank_by_scores,
)
from .em import (
    EMConfig,
    EMResult,
    PairObservation,
    PairPosterior,
    Regressors,
    blend,
    estep_pair_posteriors,
    estep_point_posteriors,
    fit_regressors,
    mstep_batch_estimates,
    run_em,
    sample_regression_targets,
)
from .evaluation import (
    EvalReport,
    MetricSummary,
    ReportRow,
    aggregate_runs,
    arp,
    ndcg_at_k,
    reward_at_k,
    reward_at_ks,
)
from .ingest import (
    EmptyDatasetError,
    SyntheticConfig,
    generate_synthetic,
    make_synthetic_config,
    parse_letor,
    read_logs,
    serialize_letor,
    split_by_request_hash,
    write_logs,
)
from .network import RankerModel, load_model, save_model
from .rank import (
    LossVariant,
    TrainConfig,
    compute_h_ij,
    compute_m_ij,
    delta_z,
    pair_weight,
    pairwise_base_loss,
    train_ranker,
)
from .simulate import (
    SimConfig,
    examination_prob,
    perceived_relevance,
    simulate_dataset,
    simulate_session,
    train_initial_ranker,
)

__version__ = "0.1.0"
