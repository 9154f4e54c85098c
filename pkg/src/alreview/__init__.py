"""Pool-based active learning with a noisy oracle and budgeted label review.

The package simulates the acquisition loop of an object-detection project
whose annotators make mistakes: each cycle a surrogate detector predicts on
the pool, informative images are queried and labeled, part of the budget is
spent reviewing suspected label errors, and performance is measured on a
clean test split.
"""
from .datamodel import (
    ClassCatalog,
    DataError,
    DatasetSpec,
    DatasetStore,
    GenerationError,
    ImageRecord,
    LabelRecord,
    PoolState,
    Provenance,
    generate_dataset,
    inject_label_noise,
    load_dataset,
    reveal_labels,
    save_dataset,
    save_noise,
)
from .detector import (
    ActiveStats,
    Prediction,
    SurrogateParams,
    class_skills,
    load_predictions,
    postprocess,
    predict_surrogate,
    skill_from_training,
)
from .evaluation import (
    APResult,
    CycleMetrics,
    average_precision,
    mean_average_precision,
    review_precision,
)
from .geometry import BBox, iou, match_class_agnostic, nms, score_filter
from .harness import (
    ConfigError,
    ExperimentConfig,
    RunState,
    init_run,
    load_state,
    run_cycle,
    run_experiment,
    run_multi,
    save_state,
)
from .query import QueryStrategy, class_weights, entropy, image_query_score, rank_pool
from .review import (
    BudgetLedger,
    ProposalKind,
    ReviewAction,
    ReviewOutcome,
    ReviewPolicy,
    ReviewProposal,
    adjudicate_flip,
    adjudicate_miss,
    flip_proposals,
    miss_proposals,
    run_review,
)

__version__ = "0.1.0"
