"""Orchestration: ensemble training, weighted soft-labeling, distillation,
and the generational self-training loop.

The flow: finetune several (pattern, verbalizer) members per seed on the
labeled set; weight each pattern by its zero-shot training-set accuracy;
combine the members' raw scores into soft labels over the unlabeled pool
(softmax of the weighted sum); train a plain sequence classifier on the
soft labels.  Members are evaluated strictly one at a time during
soft-labeling, so at most one checkpoint is ever resident.

The generational variant retrains every member on a growing training set
pseudo-labeled by a random subset of its peers, keeping the original
labeled examples and matching their label distribution, before handing the
final generation to the standard soft-label + distill steps.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .data import Dataset
from .mlm import Classifier, ClassifierHead, load_checkpoint, save_checkpoint
from .pvp import PVP, Example, TaskSpec, apply_pattern, classifier_input
from .scoring import (
    DecodingStrategy,
    free_form_matches,
    free_form_surface,
    score_example,
    score_multi_token,
    score_single_token,
)
from .training import Augmentations, TrainConfig, finetune, train_classifier
from .vocab import Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class EnsembleMember:
    """One finetuned model: a PVP at one seed, with the PVP's shared weight."""

    pvp_name: str
    seed_index: int
    weight: float
    checkpoint: Path | None = None
    model: object | None = None
    kind: str = "mlm"  # "mlm" | "free_form"

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError(f"member weight must be >= 0, got {self.weight}")


@dataclass
class SoftLabel:
    example_id: str
    distribution: np.ndarray  # over all task labels

    def __post_init__(self):
        total = float(self.distribution.sum())
        if not math.isclose(total, 1.0, abs_tol=1e-6):
            raise ValueError(f"soft label for {self.example_id} sums to {total}")


@dataclass
class SoftDataset:
    entries: list[SoftLabel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def by_id(self) -> dict[str, np.ndarray]:
        return {e.example_id: e.distribution for e in self.entries}


@dataclass(frozen=True)
class GenerationPlan:
    generations: int = 3
    growth_factor: float = 5.0
    subset_fraction: float = 0.25

    def __post_init__(self):
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if self.growth_factor <= 1:
            raise ValueError("growth_factor must be > 1")
        if not (0 < self.subset_fraction < 1):
            raise ValueError("subset_fraction must be in (0, 1)")

    def set_size(self, labeled: int, generation: int) -> int:
        return int(round(labeled * self.growth_factor ** (generation - 1)))


class ResidencyTracker:
    """Counts concurrently resident member models; verifies sequential use."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def acquire(self):
        self.current += 1
        self.peak = max(self.peak, self.current)

    def release(self):
        self.current -= 1


def checkpoint_loader(vocab: Vocabulary):
    """Default loader: read the member's checkpoint file from disk."""

    def load(member: EnsembleMember):
        if member.model is not None:
            return member.model
        model, _ = load_checkpoint(member.checkpoint, vocab)
        return model

    return load


# ----------------------------------------------------------------------
# weighting and soft labels


def zero_shot_weight(
    pvp: PVP,
    model,
    labeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST,
    max_seq_length: int = 256,
) -> float:
    """Training-set accuracy of the PVP through the not-yet-finetuned model."""
    if len(labeled) == 0:
        raise ValueError("labeled set is empty")
    hits = 0
    for x in labeled:
        table = score_example(pvp, model, x, task, strategy, max_seq_length, vocab)
        hits += int(table.argmax() == x.label)
    return hits / len(labeled)


def _uses_single_token(pvp: PVP, task: TaskSpec) -> bool:
    return all(len(pvp.verbalizer.tokens(y)) == 1 for y in task.label_ids)


def _member_raw_scores(
    member: EnsembleMember,
    model,
    pvp: PVP,
    x: Example,
    task: TaskSpec,
    vocab: Vocabulary,
    strategy: DecodingStrategy,
    max_seq_length: int,
) -> dict[int, float]:
    """What one member contributes to the weighted sum: mask logits for
    single-token verbalizers, log sequence probabilities otherwise, and a
    0/1 match indicator for free-form members."""
    if member.kind == "free_form":
        z = apply_pattern(pvp, x, 1, max_seq_length, vocab)
        produced = free_form_surface(model, z, vocab)
        scores = {}
        for y in x.candidate_ids(task):
            target = task.labels[y]
            scores[y] = 1.0 if free_form_matches(produced, target) else 0.0
        return scores
    if _uses_single_token(pvp, task):
        return score_single_token(pvp, model, x, task, max_seq_length, vocab).raw
    return score_multi_token(pvp, model, x, task, strategy, max_seq_length, vocab).raw


def ensemble_soft_label(
    members: list[EnsembleMember],
    pvps: dict[str, PVP],
    unlabeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST,
    max_seq_length: int = 256,
    loader=None,
    tracker: ResidencyTracker | None = None,
) -> SoftDataset:
    """Soft labels from the weighted raw-score sum of all members.

    Members are loaded, scored over the whole pool, and released one at a
    time; the weighted sums are softmax-normalized over each example's
    candidate set at the end.
    """
    if loader is None:
        loader = checkpoint_loader(vocab)
    accum: list[dict[int, float]] = [
        {y: 0.0 for y in x.candidate_ids(task)} for x in unlabeled
    ]
    for member in members:
        pvp = pvps[member.pvp_name]
        if tracker is not None:
            tracker.acquire()
        model = loader(member)
        try:
            for i, x in enumerate(unlabeled):
                raw = _member_raw_scores(
                    member, model, pvp, x, task, vocab, strategy, max_seq_length
                )
                for y, s in raw.items():
                    accum[i][y] += member.weight * s
        finally:
            model = None
            if tracker is not None:
                tracker.release()
    entries = []
    for x, sums in zip(unlabeled, accum):
        dist = np.zeros(len(task.labels))
        keys = sorted(sums)
        values = np.array([sums[y] for y in keys], dtype=np.float64)
        values -= values.max()
        e = np.exp(values)
        e /= e.sum()
        for y, p in zip(keys, e):
            dist[y] = p
        entries.append(SoftLabel(x.id, dist))
    return SoftDataset(entries)


def ensemble_predict(
    members: list[EnsembleMember],
    pvps: dict[str, PVP],
    dataset: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST,
    max_seq_length: int = 256,
    loader=None,
) -> dict[str, int]:
    """Hard labels from the ensemble's soft distribution (ties: lower id)."""
    soft = ensemble_soft_label(
        members, pvps, dataset, task, vocab, strategy, max_seq_length, loader
    )
    return {e.example_id: int(np.argmax(e.distribution)) for e in soft.entries}


# ----------------------------------------------------------------------
# member training


def train_members(
    pvps: list[PVP],
    labeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    base_model,
    cfg: TrainConfig,
    seeds_per_pvp: int = 3,
    weighting: str = "accuracy",
    strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST,
    augment: Augmentations | None = None,
    run_dir: Path | None = None,
    tag: str = "gen1",
    datasets_by_member: dict[tuple[str, int], Dataset] | None = None,
    weights_by_pvp: dict[str, float] | None = None,
) -> list[EnsembleMember]:
    """Finetune seeds_per_pvp models per PVP; returns members with weights.

    The weight of a PVP is its zero-shot accuracy on `labeled` (or 1 under
    uniform weighting), shared by all its seeds.  Checkpoints land under
    `run_dir` when given, otherwise members stay in memory.
    """
    members = []
    for pvp in pvps:
        if weights_by_pvp is not None and pvp.name in weights_by_pvp:
            weight = weights_by_pvp[pvp.name]
        elif weighting == "uniform":
            weight = 1.0
        else:
            weight = zero_shot_weight(
                pvp, base_model, labeled, task, vocab, strategy, cfg.max_seq_length
            )
        for seed_index in range(1, seeds_per_pvp + 1):
            member_data = labeled
            if datasets_by_member is not None:
                member_data = datasets_by_member[(pvp.name, seed_index)]
            member_cfg = cfg.with_updates(seed=rng.derive(cfg.seed, tag, pvp.name, seed_index))
            log_dir = None
            if run_dir is not None:
                log_dir = run_dir / tag / f"{pvp.name}-s{seed_index}"
            snapshot = finetune(
                base_model, pvp, member_data, task, vocab, member_cfg,
                augment=augment, log_dir=log_dir,
            )
            member = EnsembleMember(pvp.name, seed_index, weight)
            if run_dir is not None:
                path = run_dir / tag / f"{pvp.name}-s{seed_index}.ckpt"
                path.parent.mkdir(parents=True, exist_ok=True)
                save_checkpoint(path, snapshot)
                member.checkpoint = path
            else:
                member.model = snapshot
            members.append(member)
    return members


# ----------------------------------------------------------------------
# distillation


def distill(
    soft: SoftDataset,
    unlabeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    backbone,
    cfg: TrainConfig,
    log_dir: Path | None = None,
) -> Classifier:
    """Train the final plain classifier on the soft-labeled pool.

    Inputs are the bare example fields joined with segment boundaries; the
    loss is softened cross entropy against the teacher distributions.
    """
    if len(soft) == 0:
        raise ValueError("soft dataset is empty")
    by_id = unlabeled.by_id()
    inputs = []
    for entry in soft.entries:
        x = by_id[entry.example_id]
        z = classifier_input(x, task, vocab, cfg.max_seq_length)
        inputs.append((z.ids, entry.distribution))
    student = Classifier(
        backbone.clone(), ClassifierHead.zeros(len(task.labels), backbone.config.model_dim)
    )
    return train_classifier(student, inputs, cfg, log_dir=log_dir)


def classify_dataset(
    classifier: Classifier,
    dataset: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    max_seq_length: int = 256,
) -> dict[str, int]:
    """Candidate-restricted argmax of the classifier head per example."""
    out = {}
    for x in dataset:
        z = classifier_input(x, task, vocab, max_seq_length)
        logits = classifier.label_logits(z)
        candidates = sorted(x.candidate_ids(task))
        out[x.id] = max(candidates, key=lambda y: logits[y])
    return out


# ----------------------------------------------------------------------
# pseudo-label selection for the generational loop


def select_pseudo_labeled(
    soft: SoftDataset,
    unlabeled: Dataset,
    labeled: Dataset,
    needed: int,
    num_labels: int,
) -> tuple[list[Example], dict[int, int]]:
    """Most-confident pseudo-labeled examples matching the labeled set's
    label distribution.

    Examples are ranked by their maximum soft probability (ties: example
    id); per-label quotas follow the labeled set's shares via largest
    remainder.  Returns (picked examples, per-label shortfall).
    """
    label_counts = np.zeros(num_labels)
    for x in labeled:
        label_counts[x.label] += 1
    shares = label_counts / label_counts.sum()
    quotas = np.floor(shares * needed).astype(int)
    remainder = needed - int(quotas.sum())
    fractions = shares * needed - np.floor(shares * needed)
    for label in sorted(range(num_labels), key=lambda y: (-fractions[y], y))[:remainder]:
        quotas[label] += 1

    labeled_ids = {x.id for x in labeled}
    by_id = unlabeled.by_id()
    ranked = sorted(
        soft.entries,
        key=lambda e: (-float(e.distribution.max()), e.example_id),
    )
    picked: list[Example] = []
    filled = np.zeros(num_labels, dtype=int)
    for entry in ranked:
        if entry.example_id in labeled_ids:
            continue
        label = int(np.argmax(entry.distribution))
        if filled[label] >= quotas[label]:
            continue
        picked.append(by_id[entry.example_id].with_label(label))
        filled[label] += 1
        if int(filled.sum()) >= needed:
            break
    shortfall = {
        y: int(quotas[y] - filled[y]) for y in range(num_labels) if filled[y] < quotas[y]
    }
    if shortfall:
        logger.warning("pseudo-label shortfall per label: %s", shortfall)
    return picked, shortfall


# ----------------------------------------------------------------------
# end-to-end runs


@dataclass
class PetSettings:
    seeds_per_pvp: int = 3
    strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST
    weighting: str = "accuracy"  # "accuracy" | "uniform"
    distill: bool = True
    distill_steps: int = 5000
    augment: Augmentations | None = None


@dataclass
class PetResult:
    members: list[EnsembleMember]
    soft: SoftDataset | None
    classifier: Classifier | None
    tracker: ResidencyTracker
    shortfalls: list[dict[int, int]] = field(default_factory=list)
    generations: list[list[EnsembleMember]] = field(default_factory=list)

    def predict(
        self,
        dataset: Dataset,
        pvps: dict[str, PVP],
        task: TaskSpec,
        vocab: Vocabulary,
        strategy: DecodingStrategy = DecodingStrategy.MAX_FIRST,
        max_seq_length: int = 256,
    ) -> dict[str, int]:
        if self.classifier is not None:
            return classify_dataset(self.classifier, dataset, task, vocab, max_seq_length)
        return ensemble_predict(
            self.members, pvps, dataset, task, vocab, strategy, max_seq_length
        )


def run_pet(
    pvps: list[PVP],
    labeled: Dataset,
    unlabeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    base_model,
    cfg: TrainConfig,
    settings: PetSettings | None = None,
    run_dir: str | Path | None = None,
) -> PetResult:
    """Plain pattern-ensemble training: finetune, soft-label, distill.

    With a single PVP the distillation step is skipped and the members act
    as the final classifier directly.
    """
    settings = settings or PetSettings()
    run_dir = Path(run_dir) if run_dir is not None else None
    members = train_members(
        pvps, labeled, task, vocab, base_model, cfg,
        seeds_per_pvp=settings.seeds_per_pvp,
        weighting=settings.weighting,
        strategy=settings.strategy,
        augment=settings.augment,
        run_dir=run_dir,
    )
    tracker = ResidencyTracker()
    pvps_by_name = {p.name: p for p in pvps}
    skip_distill = not settings.distill or len(pvps) == 1
    if skip_distill:
        return PetResult(members, None, None, tracker, generations=[members])
    soft = ensemble_soft_label(
        members, pvps_by_name, unlabeled, task, vocab,
        strategy=settings.strategy, max_seq_length=cfg.max_seq_length, tracker=tracker,
    )
    distill_cfg = cfg.with_updates(
        max_steps=settings.distill_steps, seed=rng.derive(cfg.seed, "distill")
    )
    classifier = distill(
        soft, unlabeled, task, vocab, base_model, distill_cfg,
        log_dir=(run_dir / "distill" if run_dir else None),
    )
    if run_dir is not None:
        save_checkpoint(run_dir / "classifier.ckpt", classifier)
    return PetResult(members, soft, classifier, tracker, generations=[members])


def run_ipet(
    pvps: list[PVP],
    labeled: Dataset,
    unlabeled: Dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    base_model,
    cfg: TrainConfig,
    plan: GenerationPlan | None = None,
    settings: PetSettings | None = None,
    run_dir: str | Path | None = None,
) -> PetResult:
    """Generational self-training, then the standard soft-label + distill.

    Generation g trains every member on the original labeled set plus the
    most confidently pseudo-labeled examples (chosen by a random subset of
    the member's peers) up to |labeled| * growth^(g-1) examples; a
    one-generation plan is exactly plain pattern-ensemble training.
    """
    plan = plan or GenerationPlan()
    settings = settings or PetSettings()
    run_dir = Path(run_dir) if run_dir is not None else None
    pvps_by_name = {p.name: p for p in pvps}

    members = train_members(
        pvps, labeled, task, vocab, base_model, cfg,
        seeds_per_pvp=settings.seeds_per_pvp,
        weighting=settings.weighting,
        strategy=settings.strategy,
        augment=settings.augment,
        run_dir=run_dir,
        tag="gen1",
    )
    weights_by_pvp = {p.name: next(m.weight for m in members if m.pvp_name == p.name) for p in pvps}
    generations = [members]
    shortfalls: list[dict[int, int]] = []
    tracker = ResidencyTracker()

    for generation in range(2, plan.generations + 1):
        size = plan.set_size(len(labeled), generation)
        needed = size - len(labeled)
        subset_size = max(1, math.ceil(plan.subset_fraction * (len(members) - 1)))
        datasets_by_member: dict[tuple[str, int], Dataset] = {}
        for i, member in enumerate(members):
            others = [m for j, m in enumerate(members) if j != i]
            order = rng.shuffled(
                list(range(len(others))), cfg.seed, "ipet-subset", generation, i
            )
            subset = [others[j] for j in order[:subset_size]]
            soft = ensemble_soft_label(
                subset, pvps_by_name, unlabeled, task, vocab,
                strategy=settings.strategy, max_seq_length=cfg.max_seq_length,
                tracker=tracker,
            )
            picked, shortfall = select_pseudo_labeled(
                soft, unlabeled, labeled, needed, len(task.labels)
            )
            if shortfall:
                shortfalls.append(shortfall)
            combined = Dataset(
                labeled.task, f"gen{generation}", list(labeled.examples) + picked
            )
            datasets_by_member[(member.pvp_name, member.seed_index)] = combined
        members = train_members(
            pvps, labeled, task, vocab, base_model, cfg,
            seeds_per_pvp=settings.seeds_per_pvp,
            weighting=settings.weighting,
            strategy=settings.strategy,
            augment=settings.augment,
            run_dir=run_dir,
            tag=f"gen{generation}",
            datasets_by_member=datasets_by_member,
            weights_by_pvp=weights_by_pvp,
        )
        generations.append(members)

    skip_distill = not settings.distill or len(pvps) == 1
    classifier = None
    soft = None
    if not skip_distill:
        soft = ensemble_soft_label(
            members, pvps_by_name, unlabeled, task, vocab,
            strategy=settings.strategy, max_seq_length=cfg.max_seq_length, tracker=tracker,
        )
        distill_cfg = cfg.with_updates(
            max_steps=settings.distill_steps, seed=rng.derive(cfg.seed, "distill")
        )
        classifier = distill(
            soft, unlabeled, task, vocab, base_model, distill_cfg,
            log_dir=(run_dir / "distill" if run_dir else None),
        )
        if run_dir is not None:
            save_checkpoint(run_dir / "classifier.ckpt", classifier)
    result = PetResult(members, soft, classifier, tracker, shortfalls, generations)
    return result


def write_manifest(run_dir: str | Path, payload: dict) -> Path:
    """Persist the replayable description of a run."""
    path = Path(run_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
