"""Experiment orchestration: the query / label / review cycle over a budget.

One cycle runs, in order: predict on every train image with the skill the
current active set supports, rank the pool, label ranked images until the
query budget is met, review the whole active set with what remains of the
cycle budget, then evaluate on the clean test split with the same
predictions' skill.  All randomness flows from the experiment seed through
named substreams, so a (config, seed) pair fully determines every output
file, and a checkpoint resumes bit-identically.
"""
from __future__ import annotations

import dataclasses
import json
import os
import pickle
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import datamodel as dm
from .datamodel import DatasetSpec, DatasetStore, PoolState
from .detector import (
    ActiveStats,
    SurrogateParams,
    class_skills,
    postprocess,
    predict_surrogate,
    skill_from_training,
)
from .evaluation import (
    CycleMetrics,
    mean_average_precision,
    review_precision,
    write_aggregate_csv,
    write_metrics_csv,
)
from .query import QueryStrategy, class_weights, rank_pool
from .review import (
    BudgetLedger,
    ProposalKind,
    ReviewPolicy,
    run_review,
)

STATE_MAGIC = b"ALRV"
STATE_VERSION = 1

# substream tags hung off the experiment seed
_STREAM_DATA = 1
_STREAM_NOISE = 2
_STREAM_ORCH = 3


class ConfigError(Exception):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    seed: int = 0
    num_classes: int = 10
    n_train: int = 2000
    n_test: int = 400
    init_images: int = 150
    budget: int = 200
    cycles: int = 20
    review_fraction: float = 0.2
    miss_share: float = 0.5
    label_noise: float = 0.2
    review_noise: float = 0.05
    score_threshold: float = 0.7
    match_iou: float = 0.3
    nms_iou: float = 0.5
    eval_score_threshold: float = 0.05
    strategy: str = "entropy"
    policy: str = "highest_loss"
    boxes_per_image: tuple[int, int] = (2, 6)
    image_size: tuple[int, int] = (256, 256)
    box_size: tuple[int, int] = (16, 64)
    # class frequency ∝ rank^(-class_skew); 0 means a uniform class mix
    class_skew: float = 1.0
    forfeit_unspent_review: bool = True
    surrogate: SurrogateParams = field(default_factory=SurrogateParams)
    dataset_path: Optional[str] = None
    noise_path: Optional[str] = None
    out_dir: Optional[str] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("review_fraction", "miss_share", "label_noise", "review_noise",
                     "score_threshold", "match_iou", "nms_iou", "eval_score_threshold"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.budget < 1:
            raise ConfigError("budget must be at least 1")
        if self.cycles < 1:
            raise ConfigError("cycles must be at least 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.dataset_path is None and self.init_images > self.n_train:
            raise ConfigError("init_images cannot exceed n_train")
        try:
            QueryStrategy(self.strategy)
        except ValueError:
            raise ConfigError(f"unknown strategy {self.strategy!r}") from None
        try:
            ReviewPolicy(self.policy)
        except ValueError:
            raise ConfigError(f"unknown policy {self.policy!r}") from None
        if self.class_skew < 0:
            raise ConfigError("class_skew must be nonnegative")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["surrogate"] = dataclasses.asdict(self.surrogate)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "surrogate" in data and isinstance(data["surrogate"], dict):
            sk = {f.name for f in dataclasses.fields(SurrogateParams)}
            bad = set(data["surrogate"]) - sk
            if bad:
                raise ConfigError(f"unknown surrogate keys: {sorted(bad)}")
            sur = {k: tuple(v) if isinstance(v, list) else v
                   for k, v in data["surrogate"].items()}
            data["surrogate"] = SurrogateParams(**sur)
        for key in ("boxes_per_image", "image_size", "box_size"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def class_mix(self) -> Optional[list[float]]:
        if self.class_skew == 0:
            return None
        return [1.0 / (c ** self.class_skew) for c in range(1, self.num_classes + 1)]


def load_config_file(path: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if overrides:
        data.update(overrides)
    return ExperimentConfig.from_dict(data)


@dataclass
class RunState:
    config: ExperimentConfig
    store: DatasetStore
    rng: np.random.Generator
    cycle: int = 0
    init_boxes: int = 0
    carried_budget: int = 0
    ledgers: list[BudgetLedger] = field(default_factory=list)
    metrics: list[CycleMetrics] = field(default_factory=list)
    audit: list[dict] = field(default_factory=list)

    def cumulative_spend(self) -> int:
        return self.init_boxes + sum(l.total_spent for l in self.ledgers)


def _active_stats(store: DatasetStore) -> tuple[ActiveStats, int, int]:
    """Training-set statistics over the active images.

    Returns the stats the surrogate consumes (present box count, current
    error fraction, per-observed-class counts) plus the active image and
    box counters for metrics.  The error fraction counts dropped and
    wrongly classed annotations against all annotations of active images.
    """
    active = store.active_train_images()
    k = store.num_classes
    counts = np.zeros(k, dtype=int)
    n_present = 0
    n_total = 0
    n_errors = 0
    for img in active:
        for lab in img.labels:
            n_total += 1
            if not lab.present:
                n_errors += 1
                continue
            n_present += 1
            counts[lab.observed_class - 1] += 1
            if lab.observed_class != lab.true_class:
                n_errors += 1
    rho = (n_errors / n_total) if n_total else 0.0
    stats = ActiveStats(n_boxes=float(n_present), error_fraction=rho, class_counts=counts)
    return stats, len(active), n_present


def init_run(config: ExperimentConfig) -> RunState:
    """Build the starting state: dataset, injected noise, initial labeled set.

    The initial images are revealed free of cycle budgets; their labeling
    cost seeds the cumulative budget axis.  A cycle-0 metrics row records
    the starting test performance.
    """
    if config.dataset_path is not None:
        store = dm.load_dataset(config.dataset_path, config.noise_path)
    else:
        spec = DatasetSpec(
            n_train=config.n_train,
            n_test=config.n_test,
            num_classes=config.num_classes,
            boxes_per_image=config.boxes_per_image,
            image_size=config.image_size,
            box_size=config.box_size,
            class_weights=config.class_mix(),
        )
        store = dm.generate_dataset(spec, np.random.default_rng([config.seed, _STREAM_DATA]))
        dm.inject_label_noise(
            store, config.label_noise, np.random.default_rng([config.seed, _STREAM_NOISE])
        )
    rng = np.random.default_rng([config.seed, _STREAM_ORCH])
    state = RunState(config=config, store=store, rng=rng)

    train_ids = sorted(img.id for img in store.train)
    n_init = min(config.init_images, len(train_ids))
    chosen = sorted(
        train_ids[i] for i in rng.choice(len(train_ids), size=n_init, replace=False)
    )
    for image_id in chosen:
        state.init_boxes += len(dm.reveal_labels(store, image_id))

    state.metrics.append(_initial_metrics(state))
    return state


def _initial_metrics(state: RunState) -> CycleMetrics:
    config = state.config
    stats, n_images, n_boxes = _active_stats(state.store)
    skill = skill_from_training(stats, config.surrogate)
    per_class = class_skills(stats, config.surrogate)
    test_preds = _predict_split(state.store.test, skill, per_class, config, cycle=0)
    ap = mean_average_precision(test_preds, state.store.test, config.num_classes)
    return CycleMetrics(
        cycle=0,
        budget_total=state.init_boxes,
        boxes_labeled=state.init_boxes,
        reviews_miss=0,
        reviews_flip=0,
        mean_ap=ap.mean,
        precision_miss=None,
        precision_flip=None,
        active_images=n_images,
        active_boxes=n_boxes,
        active_error_fraction=stats.error_fraction,
        skill=skill,
    )


def _predict_split(images, skill, per_class, config, cycle, *, for_eval=False):
    threshold = config.eval_score_threshold if for_eval else config.score_threshold
    out = {}
    for img in images:
        raw = predict_surrogate(
            img,
            skill,
            config.num_classes,
            config.surrogate,
            seed=config.seed,
            cycle=cycle,
            per_class_skill=per_class,
        )
        out[img.id] = postprocess(raw, threshold, config.nms_iou)
    return out


def run_cycle(state: RunState) -> CycleMetrics:
    """Advance the experiment by one cycle, mutating state."""
    config = state.config
    if state.cycle >= config.cycles:
        raise RuntimeError(f"run already finished its {config.cycles} cycles")
    cycle = state.cycle + 1
    rng = state.rng

    stats, _, _ = _active_stats(state.store)
    skill = skill_from_training(stats, config.surrogate)
    per_class = class_skills(stats, config.surrogate)
    state.audit.append({"cycle": cycle, "event": "predict", "skill": round(skill, 6)})
    preds = _predict_split(state.store.train, skill, per_class, config, cycle)

    weights = class_weights(stats.class_counts)
    pool = state.store.unlabeled_train_ids()
    ranked = rank_pool(pool, QueryStrategy(config.strategy), preds, weights, rng)
    state.audit.append({"cycle": cycle, "event": "query", "pool": len(pool)})

    budget = config.budget + (0 if config.forfeit_unspent_review else state.carried_budget)
    ledger = BudgetLedger(
        budget=budget,
        review_fraction=config.review_fraction,
        miss_share=config.miss_share,
    )
    labeled_images = 0
    for image_id in ranked:
        if ledger.spent_query >= ledger.query_budget:
            break
        pairs = dm.reveal_labels(state.store, image_id)
        ledger.spent_query += len(pairs)
        labeled_images += 1
    if labeled_images == len(ranked) and ledger.spent_query < ledger.query_budget:
        state.audit.append({"cycle": cycle, "event": "pool_exhausted"})
    state.audit.append(
        {"cycle": cycle, "event": "label", "images": labeled_images, "boxes": ledger.spent_query}
    )

    active_ids = sorted(img.id for img in state.store.active_train_images())
    report = run_review(
        state.store,
        active_ids,
        preds,
        ReviewPolicy(config.policy),
        ledger,
        review_noise=config.review_noise,
        match_iou=config.match_iou,
        rng=rng,
    )
    for outcome in report.outcomes:
        state.audit.append(
            {
                "cycle": cycle,
                "kind": outcome.proposal.kind.value,
                "image": outcome.proposal.image_id,
                "target": outcome.proposal.target,
                "was_true_error": outcome.was_true_error,
                "action": outcome.action.value,
            }
        )
    state.audit.append(
        {
            "cycle": cycle,
            "event": "review",
            "miss": ledger.spent_review_miss,
            "flip": ledger.spent_review_flip,
            "forfeited_miss": report.forfeited_miss,
            "forfeited_flip": report.forfeited_flip,
        }
    )
    state.carried_budget = report.forfeited_miss + report.forfeited_flip

    test_preds = _predict_split(
        state.store.test, skill, per_class, config, cycle, for_eval=True
    )
    ap = mean_average_precision(test_preds, state.store.test, config.num_classes)
    state.audit.append({"cycle": cycle, "event": "eval", "map": round(ap.mean, 6)})

    state.ledgers.append(ledger)
    state.cycle = cycle
    stats_after, n_images, n_boxes = _active_stats(state.store)
    metrics = CycleMetrics(
        cycle=cycle,
        budget_total=state.cumulative_spend(),
        boxes_labeled=ledger.spent_query,
        reviews_miss=ledger.spent_review_miss,
        reviews_flip=ledger.spent_review_flip,
        mean_ap=ap.mean,
        precision_miss=review_precision(report.outcomes, ProposalKind.MISS),
        precision_flip=review_precision(report.outcomes, ProposalKind.FLIP),
        active_images=n_images,
        active_boxes=n_boxes,
        active_error_fraction=stats_after.error_fraction,
        skill=skill,
        base_rate_miss=report.candidate_base_rate_miss,
        base_rate_flip=report.candidate_base_rate_flip,
    )
    state.metrics.append(metrics)
    return metrics


def save_state(state: RunState, path: str) -> None:
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(STATE_VERSION.to_bytes(4, "little"))
        pickle.dump(state, f, protocol=pickle.HIGHEST_PROTOCOL)


def load_state(path: str) -> RunState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != STATE_MAGIC:
            raise dm.DataError(f"{path}: not a run checkpoint")
        version = int.from_bytes(f.read(4), "little")
        if version != STATE_VERSION:
            raise dm.DataError(f"{path}: unsupported checkpoint version {version}")
        return pickle.load(f)


def _write_run_dir(state: RunState, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(state.config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    dm.save_dataset(state.store, os.path.join(out_dir, "dataset.json"))
    dm.save_noise(state.store, os.path.join(out_dir, "noise.json"))


def _flush_outputs(state: RunState, out_dir: str) -> None:
    write_metrics_csv(state.metrics, os.path.join(out_dir, "metrics.csv"))
    with open(os.path.join(out_dir, "audit.log"), "w", encoding="utf-8") as f:
        for record in state.audit:
            f.write(json.dumps(record, sort_keys=True))
            f.write("\n")
    save_state(state, os.path.join(out_dir, "state.bin"))


def run_experiment(
    config: ExperimentConfig,
    out_dir: Optional[str] = None,
    *,
    state: Optional[RunState] = None,
    checkpoint_every: Optional[int] = None,
) -> RunState:
    """Run (or resume) all cycles; write run artifacts when out_dir is given.

    Any error mid-run still leaves a checkpoint behind for inspection.
    """
    out_dir = out_dir if out_dir is not None else config.out_dir
    if state is None:
        state = init_run(config)
    if out_dir:
        _write_run_dir(state, out_dir)
    try:
        while state.cycle < config.cycles:
            run_cycle(state)
            if out_dir and checkpoint_every and state.cycle % checkpoint_every == 0:
                _flush_outputs(state, out_dir)
    except Exception:
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            save_state(state, os.path.join(out_dir, "state.bin"))
        raise
    if out_dir:
        _flush_outputs(state, out_dir)
    return state


def run_multi(
    config: ExperimentConfig,
    seeds: Sequence[int],
    out_dir: Optional[str] = None,
) -> list[RunState]:
    """Run the same configuration under several seeds and aggregate metrics."""
    if not seeds:
        raise ConfigError("run_multi needs at least one seed")
    states = []
    for seed in seeds:
        sub = dataclasses.replace(config, seed=seed)
        sub_dir = os.path.join(out_dir, f"seed_{seed}") if out_dir else None
        states.append(run_experiment(sub, sub_dir))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_aggregate_csv(
            [s.metrics for s in states], os.path.join(out_dir, "aggregate.csv")
        )
    return states
