"""Label-error proposals, the noisy review oracle and budget accounting.

Proposal generation looks only at predictions and observable annotations
(present boxes with their recorded classes).  Adjudication is the one place
besides evaluation that reads hidden truth: it decides whether a proposal
pointed at a real error and lets the noisy reviewer act on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .datamodel import DatasetStore, ImageRecord, LabelRecord, Provenance
from .detector import Prediction
from .geometry import iou, match_class_agnostic


class ReviewPolicy(str, Enum):
    NONE = "none"
    RANDOM = "random"
    HIGHEST_LOSS = "highest_loss"


class ProposalKind(str, Enum):
    MISS = "miss"
    FLIP = "flip"


class ReviewAction(str, Enum):
    RESTORED = "restored"
    CORRECTED = "corrected"
    CORRUPTED = "corrupted"
    REJECTED = "rejected"
    OVERLOOKED = "overlooked"


@dataclass(frozen=True)
class ReviewProposal:
    kind: ProposalKind
    image_id: int
    # prediction index within the image for misses, label id for flips
    target: int
    rank_score: float


@dataclass
class ReviewOutcome:
    proposal: ReviewProposal
    was_true_error: bool
    action: ReviewAction
    cost: int = 1


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class BudgetLedger:
    """Per-cycle annotation budget split between querying and review."""

    budget: int
    review_fraction: float
    miss_share: float
    spent_query: int = 0
    spent_review_miss: int = 0
    spent_review_flip: int = 0
    forfeited_miss: int = 0
    forfeited_flip: int = 0

    def __post_init__(self) -> None:
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        for name in ("review_fraction", "miss_share"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @property
    def query_budget(self) -> int:
        return round_half_up((1.0 - self.review_fraction) * self.budget)

    @property
    def review_budget(self) -> int:
        return self.budget - self.query_budget

    @property
    def effective_review_budget(self) -> int:
        """Review budget after any query overshoot; never negative."""
        return max(self.budget - self.spent_query, 0)

    @property
    def total_spent(self) -> int:
        return self.spent_query + self.spent_review_miss + self.spent_review_flip


def miss_proposals(
    preds_by_image: Mapping[int, Sequence[Prediction]],
    present_labels_by_image: Mapping[int, Sequence[LabelRecord]],
    match_iou: float,
    policy: ReviewPolicy,
    rng: np.random.Generator,
) -> list[ReviewProposal]:
    """Propose dropped annotations from unmatched predictions.

    A prediction that matches no present annotation at ``match_iou`` is a
    false positive against the recorded labels; under highest-loss review
    these are ordered by descending objectness (a confident box where the
    annotations say there is nothing carries a large objectness loss), under
    random review they are shuffled.
    """
    props: list[ReviewProposal] = []
    for image_id in sorted(preds_by_image):
        labels = present_labels_by_image.get(image_id, ())
        for idx, pred in enumerate(preds_by_image[image_id]):
            if match_class_agnostic(pred, labels, match_iou) is None:
                props.append(
                    ReviewProposal(
                        kind=ProposalKind.MISS,
                        image_id=image_id,
                        target=idx,
                        rank_score=pred.score,
                    )
                )
    return _order(props, policy, rng)


def flip_proposals(
    preds_by_image: Mapping[int, Sequence[Prediction]],
    present_labels_by_image: Mapping[int, Sequence[LabelRecord]],
    match_iou: float,
    policy: ReviewPolicy,
    rng: np.random.Generator,
) -> list[ReviewProposal]:
    """Propose wrong class assignments from label/prediction disagreement.

    Each present annotation is assigned its highest-IoU prediction when that
    IoU reaches ``match_iou`` (one prediction may serve several labels); the
    ranking score is the cross-entropy -log(p_hat at the recorded class).
    Annotations without a sufficiently overlapping prediction are not
    reviewable this cycle.
    """
    props: list[ReviewProposal] = []
    for image_id in sorted(present_labels_by_image):
        preds = preds_by_image.get(image_id, ())
        if not preds:
            continue
        for lab in sorted(present_labels_by_image[image_id], key=lambda l: l.id):
            best_iou, best_pred = 0.0, None
            for pred in preds:
                v = iou(pred.box, lab.box)
                if v > best_iou:
                    best_iou, best_pred = v, pred
            if best_pred is None or best_iou < match_iou:
                continue
            p_obs = best_pred.prob_of(lab.observed_class)
            score = math.inf if p_obs <= 0.0 else -math.log(p_obs)
            props.append(
                ReviewProposal(
                    kind=ProposalKind.FLIP,
                    image_id=image_id,
                    target=lab.id,
                    rank_score=score,
                )
            )
    return _order(props, policy, rng)


def _order(
    props: list[ReviewProposal], policy: ReviewPolicy, rng: np.random.Generator
) -> list[ReviewProposal]:
    if policy == ReviewPolicy.HIGHEST_LOSS:
        return sorted(props, key=lambda p: (-p.rank_score, p.image_id, p.target))
    if policy == ReviewPolicy.RANDOM:
        return [props[i] for i in rng.permutation(len(props))]
    raise ValueError(f"no proposal ordering for policy {policy!r}")


def adjudicate_miss(
    store: DatasetStore,
    proposal: ReviewProposal,
    pred: Prediction,
    match_iou: float,
    review_noise: float,
    rng: np.random.Generator,
) -> ReviewOutcome:
    """Let the noisy reviewer act on a miss proposal, mutating the store.

    The proposal is a real error iff the prediction overlaps a currently
    dropped annotation at ``match_iou``.  A real drop is restored exactly
    (true box and class) with probability 1 - review_noise and overlooked
    otherwise; a false alarm is rejected without touching anything, so the
    reviewer never invents boxes.
    """
    img = store.find_image(proposal.image_id)
    best_key, best_lab = None, None
    for lab in img.labels:
        if lab.present:
            continue
        v = iou(pred.box, lab.box)
        if v < match_iou:
            continue
        key = (-v, lab.id)
        if best_key is None or key < best_key:
            best_key, best_lab = key, lab
    if best_lab is None:
        return ReviewOutcome(proposal, was_true_error=False, action=ReviewAction.REJECTED)
    if rng.random() < review_noise:
        return ReviewOutcome(proposal, was_true_error=True, action=ReviewAction.OVERLOOKED)
    best_lab.present = True
    best_lab.observed_class = best_lab.true_class
    best_lab.provenance = Provenance.RESTORED
    return ReviewOutcome(proposal, was_true_error=True, action=ReviewAction.RESTORED)


def adjudicate_flip(
    store: DatasetStore,
    proposal: ReviewProposal,
    review_noise: float,
    rng: np.random.Generator,
) -> ReviewOutcome:
    """Let the noisy reviewer act on a flip proposal, mutating the store.

    With probability 1 - review_noise the recorded class is set to the true
    class; with probability review_noise the reviewer misclassifies and the
    recorded class becomes a uniformly drawn wrong one.  Both branches apply
    whether or not the annotation was actually wrong, so a correct label can
    be corrupted by a careless review.
    """
    img = store.find_image(proposal.image_id)
    lab = next((l for l in img.labels if l.id == proposal.target), None)
    if lab is None or not lab.present:
        raise ValueError(f"flip proposal targets missing label {proposal.target}")
    was_error = lab.observed_class != lab.true_class
    k = store.num_classes
    if rng.random() < review_noise:
        wrong = [c for c in range(1, k + 1) if c != lab.true_class]
        lab.observed_class = wrong[int(rng.integers(0, k - 1))]
        lab.provenance = Provenance.REVIEW_CORRUPTED
        return ReviewOutcome(proposal, was_true_error=was_error, action=ReviewAction.CORRUPTED)
    lab.observed_class = lab.true_class
    if was_error:
        lab.provenance = Provenance.RESTORED
    return ReviewOutcome(proposal, was_true_error=was_error, action=ReviewAction.CORRECTED)


@dataclass
class ReviewReport:
    outcomes: list[ReviewOutcome] = field(default_factory=list)
    forfeited_miss: int = 0
    forfeited_flip: int = 0
    # fraction of generated proposals that point at real errors, per kind;
    # None when no proposals of that kind were generated
    candidate_base_rate_miss: float | None = None
    candidate_base_rate_flip: float | None = None


def run_review(
    store: DatasetStore,
    active_ids: Sequence[int],
    preds_by_image: Mapping[int, Sequence[Prediction]],
    policy: ReviewPolicy,
    ledger: BudgetLedger,
    *,
    review_noise: float,
    match_iou: float,
    rng: np.random.Generator,
) -> ReviewReport:
    """Review the active set under the remaining cycle budget.

    The effective review budget (cycle budget minus query spend) is split
    into a miss lane of floor(miss_share * budget) and a flip lane taking
    the rest.  Each lane consumes its proposals in ranked order at cost one
    apiece, stopping early if proposals run out; unspent lane budget is
    forfeited and reported.  Misses are adjudicated before flips, and every
    adjudication sees the store as mutated by the previous ones.
    """
    report = ReviewReport()
    if policy == ReviewPolicy.NONE:
        return report
    budget = ledger.effective_review_budget
    miss_budget = int(math.floor(ledger.miss_share * budget))
    flip_budget = budget - miss_budget

    present = {
        image_id: store.find_image(image_id).present_labels()
        for image_id in sorted(active_ids)
    }
    active_preds = {i: preds_by_image.get(i, []) for i in sorted(active_ids)}
    misses = miss_proposals(active_preds, present, match_iou, policy, rng)
    flips = flip_proposals(active_preds, present, match_iou, policy, rng)

    report.candidate_base_rate_miss = _base_rate_miss(store, misses, active_preds, match_iou)
    report.candidate_base_rate_flip = _base_rate_flip(store, flips)

    for prop in misses[:miss_budget]:
        pred = active_preds[prop.image_id][prop.target]
        outcome = adjudicate_miss(store, prop, pred, match_iou, review_noise, rng)
        ledger.spent_review_miss += outcome.cost
        report.outcomes.append(outcome)
    report.forfeited_miss = miss_budget - min(miss_budget, len(misses))

    for prop in flips[:flip_budget]:
        outcome = adjudicate_flip(store, prop, review_noise, rng)
        ledger.spent_review_flip += outcome.cost
        report.outcomes.append(outcome)
    report.forfeited_flip = flip_budget - min(flip_budget, len(flips))

    ledger.forfeited_miss = report.forfeited_miss
    ledger.forfeited_flip = report.forfeited_flip
    return report


def _base_rate_miss(
    store: DatasetStore,
    proposals: Sequence[ReviewProposal],
    preds_by_image: Mapping[int, Sequence[Prediction]],
    match_iou: float,
) -> float | None:
    if not proposals:
        return None
    hits = 0
    for prop in proposals:
        pred = preds_by_image[prop.image_id][prop.target]
        img = store.find_image(prop.image_id)
        if any(
            not lab.present and iou(pred.box, lab.box) >= match_iou for lab in img.labels
        ):
            hits += 1
    return hits / len(proposals)


def _base_rate_flip(store: DatasetStore, proposals: Sequence[ReviewProposal]) -> float | None:
    if not proposals:
        return None
    hits = 0
    for prop in proposals:
        img = store.find_image(prop.image_id)
        lab = next(l for l in img.labels if l.id == prop.target)
        if lab.observed_class != lab.true_class:
            hits += 1
    return hits / len(proposals)
