"""Staleness-aware incremental learning engine for CTR models."""

from .errors import ConfigError, DataError, NumericError, SizeError, StateError
from .features import (
    FeatureDictionary,
    Sample,
    StalenessTable,
    encode_sample,
    stale_features,
    update_staleness,
    weight_of,
)
from .model import (
    AnchorTable,
    GuardConfig,
    ModelState,
    TrainConfig,
    ce_loss,
    forward,
    grow_embeddings,
    guard_coefficient,
    guard_loss,
    init_model,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from .pipeline import (
    ModelConfig,
    PolicyConfig,
    RunResult,
    SpanMetrics,
    auc,
    drop_ratio_report,
    run_incremental,
    staleness_bucketed_eval,
    sweep,
)
from .sampler import (
    CandidateSet,
    Reservoir,
    SamplePool,
    brute_force_optimal,
    covered_weight,
    random_sample,
    rss_filter,
    sas_greedy_naive,
    sas_greedy_neighbor,
)
from .stream import (
    SpanDataset,
    SyntheticSpec,
    feature_presence_histogram,
    generate_synthetic,
    load_span,
    windowed_schedule,
)

__version__ = "0.1.0"
