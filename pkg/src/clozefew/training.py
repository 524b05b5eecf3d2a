"""Loss functions and finetuning loops.

Three losses drive the system:

* cross entropy on the normalized single-token label distribution;
* multi-class hinge on log sequence scores, for multi-token verbalizers,
  requiring the correct label to beat every competitor by a log-margin of
  1 (the competitor sum runs over the other labels only; including the
  correct label would add a constant 1 and leave gradients unchanged);
* softened cross entropy against teacher distributions for distillation,
  with both sides tempered and the usual T^2 gradient scaling.

Each loss exists twice on purpose: a definitional form over plain score
tables, and a tape-building twin used by the trainer.  Tests pin the two
to each other.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .mlm import AdamW, clip_global_norm, copy_model
from .pvp import PVP, Example, TaskSpec, apply_pattern, max_verbalization_len
from .scoring import ScoreTable
from .vocab import Vocabulary

PROB_FLOOR = 1e-12


class TrainingDivergedError(FloatingPointError):
    """Non-finite loss encountered; carries the offending step."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    batch_size: int = 2
    gradient_accumulation_steps: int = 8
    max_steps: int = 250
    max_seq_length: int = 256
    distillation_temperature: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in (
            "learning_rate",
            "adam_epsilon",
            "weight_decay",
            "max_grad_norm",
            "batch_size",
            "gradient_accumulation_steps",
            "max_seq_length",
            "distillation_temperature",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def with_updates(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


@dataclass
class LossWarnings:
    """Counts floor-clamped probabilities instead of failing on them."""

    clamped: int = 0


# ----------------------------------------------------------------------
# definitional losses over plain score tables


def cross_entropy_pvp_loss(
    table: ScoreTable, y: int, warnings: LossWarnings | None = None
) -> float:
    """Negative log probability of the gold label under a normalized table."""
    if not table.normalized:
        raise ValueError("cross entropy needs a normalized score table")
    if y not in table.scores:
        raise ValueError(f"gold label {y} not in candidate set {table.labels}")
    p = table.scores[y]
    if p < PROB_FLOOR:
        p = PROB_FLOOR
        if warnings is not None:
            warnings.clamped += 1
    return -math.log(p)


def _log_scores(table: ScoreTable, warnings: LossWarnings | None) -> dict[int, float]:
    floor = math.log(PROB_FLOOR)
    out = {}
    for label in table.labels:
        value = table.raw.get(label)
        if value is None or not math.isfinite(value):
            value = math.log(max(table.scores[label], PROB_FLOOR))
        if value < floor:
            value = floor
            if warnings is not None:
                warnings.clamped += 1
        out[label] = value
    return out


def hinge_loss(table: ScoreTable, y: int, warnings: LossWarnings | None = None) -> float:
    """Sum of margin violations of the gold label against every competitor.

    Zero iff the gold log score exceeds each competitor's by at least 1;
    invariant under scaling all scores by a positive constant.
    """
    if y not in table.scores:
        raise ValueError(f"gold label {y} not in candidate set {table.labels}")
    logs = _log_scores(table, warnings)
    return float(
        sum(max(0.0, 1.0 - logs[y] + logs[other]) for other in table.labels if other != y)
    )


def soften(distribution: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-soften a probability distribution via its log."""
    logit = np.log(np.maximum(distribution, PROB_FLOOR)) / temperature
    logit -= logit.max()
    e = np.exp(logit)
    return e / e.sum()


def distill_loss(
    student_logits: np.ndarray, teacher: np.ndarray, temperature: float
) -> float:
    """Softened cross entropy between student logits and teacher distribution,
    scaled by temperature^2."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if student_logits.shape != teacher.shape:
        raise ValueError(
            f"label arity mismatch: student {student_logits.shape} vs teacher {teacher.shape}"
        )
    t_soft = soften(teacher, temperature)
    scaled = student_logits / temperature
    log_soft = scaled - scaled.max()
    log_soft = log_soft - np.log(np.exp(log_soft).sum())
    return float(-(t_soft * log_soft).sum() * temperature**2)


# ----------------------------------------------------------------------
# tape-building twins used inside the training loop


def pvp_loss_graph(
    model,
    pvp: PVP,
    x: Example,
    task: TaskSpec,
    vocab: Vocabulary,
    max_seq_length: int,
    kind: str,
    free_form_targets: tuple[int, ...] | None = None,
) -> Tensor:
    """Per-example training loss on the autodiff tape.

    All candidates are scored from one forward pass on the pattern carrying
    as many masks as the longest candidate needs (surplus slot predictions
    are ignored).  `kind` is ``cross_entropy``, ``hinge`` or ``free_form``.
    """
    if kind == "free_form":
        targets = list(free_form_targets)
        z = apply_pattern(pvp, x, len(targets), max_seq_length, vocab)
        logits = model.logits_graph(z.ids)
        rows = ad.take_rows(logits, list(z.mask_positions))
        log_probs = ad.log_softmax(rows, axis=-1)
        picked = ad.take_entries(log_probs, list(range(len(targets))), targets)
        return -ad.tsum(picked)

    candidates = x.candidate_ids(task)
    length = max_verbalization_len(pvp, x, task)
    z = apply_pattern(pvp, x, length, max_seq_length, vocab)
    logits = model.logits_graph(z.ids)
    rows = ad.take_rows(logits, list(z.mask_positions))

    if kind == "cross_entropy":
        verbalizations = {y: pvp.verbalizer.tokens(y) for y in candidates}
        if any(len(t) != 1 for t in verbalizations.values()):
            raise ValueError("cross entropy requires single-token verbalizations")
        cand = list(candidates)
        picked = ad.take_entries(rows, [0] * len(cand), [verbalizations[y][0] for y in cand])
        log_dist = ad.log_softmax(picked, axis=-1)
        gold = cand.index(x.label)
        return -ad.tsum(ad.take_entries(ad.reshape(log_dist, (1, len(cand))), [0], [gold]))

    if kind == "hinge":
        log_probs = ad.log_softmax(rows, axis=-1)
        seq_logs = {}
        for y in candidates:
            toks = pvp.verbalizer.tokens(y)
            picked = ad.take_entries(log_probs, list(range(len(toks))), list(toks))
            seq_logs[y] = ad.tsum(picked)
        gold = seq_logs[x.label]
        terms = [ad.relu(1.0 - gold + seq_logs[other]) for other in candidates if other != x.label]
        if not terms:
            return gold * 0.0
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    raise ValueError(f"unknown loss kind {kind!r}")


def classifier_loss_graph(classifier, ids, teacher: np.ndarray, temperature: float) -> Tensor:
    """Distillation loss of one example on the tape (see `distill_loss`)."""
    t_soft = soften(np.asarray(teacher, dtype=np.float64), temperature)
    logits = classifier.logits_graph(ids)
    log_soft = ad.log_softmax(logits * (1.0 / temperature), axis=-1)
    return -ad.tsum(log_soft * Tensor(t_soft)) * (temperature**2)


def mlm_loss_graph(model, ids: list[int], masked: list[int], originals: list[int]) -> Tensor:
    """Mean negative log likelihood of original tokens at masked positions."""
    logits = model.logits_graph(ids)
    rows = ad.take_rows(logits, masked)
    log_probs = ad.log_softmax(rows, axis=-1)
    picked = ad.take_entries(log_probs, list(range(len(masked))), originals)
    return -ad.mean(picked)


# ----------------------------------------------------------------------
# augmentations


@dataclass(frozen=True)
class Augmentations:
    """Training-time input diversification; never touches labels.

    `swap_fields` exchanges the contents of two fields with probability
    0.5 per appearance (binary-option / sentence-pair shuffling).
    `free_form` trains on the gold verbalization padded with 0-3 extra
    masks whose targets are PAD, so the mask count leaks nothing.
    """

    swap_fields: tuple[str, str] | None = None
    free_form: bool = False
    max_extra_masks: int = 3


def _augmented(
    x: Example,
    aug: Augmentations | None,
    pvp: PVP,
    vocab: Vocabulary,
    draw: rng.SplitMix64,
) -> tuple[Example, tuple[int, ...] | None]:
    if aug is None:
        return x, None
    targets = None
    if aug.swap_fields is not None and draw.randbelow(2) == 1:
        a, b = aug.swap_fields
        fields = dict(x.fields)
        fields[a], fields[b] = fields[b], fields[a]
        x = x.with_fields(fields)
    if aug.free_form:
        extra = draw.randbelow(aug.max_extra_masks + 1)
        targets = pvp.verbalizer.tokens(x.label) + (vocab.pad_id,) * extra
    return x, targets


# ----------------------------------------------------------------------
# training loops


def choose_loss_kind(pvp: PVP, task: TaskSpec) -> str:
    """Cross entropy when every label verbalizes to one token, else hinge."""
    lengths = [len(pvp.verbalizer.tokens(y)) for y in task.label_ids]
    return "cross_entropy" if all(n == 1 for n in lengths) else "hinge"


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)  # step, loss, grad norm

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss", "grad_norm"])
            writer.writerows(self.rows)


def _run_steps(model, cfg: TrainConfig, next_loss, log_dir: Path | None, label: str):
    """Shared optimizer loop: accumulate, clip, step, log."""
    params = model.parameters()
    optimizer = AdamW(
        params,
        lr=cfg.learning_rate,
        eps=cfg.adam_epsilon,
        weight_decay=cfg.weight_decay,
    )
    log = TrainLog()
    effective = cfg.batch_size * cfg.gradient_accumulation_steps
    for step in range(1, cfg.max_steps + 1):
        step_loss = 0.0
        for _ in range(cfg.gradient_accumulation_steps):
            losses = [next_loss() for _ in range(cfg.batch_size)]
            micro = losses[0]
            for term in losses[1:]:
                micro = micro + term
            micro = micro * (1.0 / effective)
            value = micro.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"{label}: non-finite loss {value} at step {step}")
            step_loss += value
            micro.backward()
        norm = clip_global_norm(params, cfg.max_grad_norm)
        optimizer.step()
        optimizer.zero_grad()
        log.rows.append((step, step_loss, norm))
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        log.write_csv(log_dir / "metrics.csv")
        (log_dir / "config.json").write_text(
            json.dumps(vars(cfg) | {"phase": label}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return log


class _EpochSampler:
    """Cycles a dataset with per-epoch reshuffling under the run seed."""

    def __init__(self, n: int, seed: int, tag: str):
        self.n = n
        self.seed = seed
        self.tag = tag
        self.epoch = -1
        self.order: list[int] = []
        self.pos = 0

    def next_index(self) -> tuple[int, int, int]:
        """Returns (example index, epoch, position within epoch)."""
        if self.pos >= len(self.order):
            self.epoch += 1
            self.order = rng.shuffled(list(range(self.n)), self.seed, self.tag, self.epoch)
            self.pos = 0
        idx = self.order[self.pos]
        pos = self.pos
        self.pos += 1
        return idx, self.epoch, pos


def finetune(
    model,
    pvp: PVP,
    dataset,
    task: TaskSpec,
    vocab: Vocabulary,
    cfg: TrainConfig,
    loss_kind: str = "auto",
    augment: Augmentations | None = None,
    log_dir: str | Path | None = None,
) -> object:
    """Finetune a copy of `model` on labeled examples through a PVP.

    Returns the trained snapshot; the input model is never mutated.  With
    `max_steps == 0` the snapshot equals the input exactly.
    """
    examples = list(dataset)
    if not examples:
        raise ValueError("empty training set")
    if any(x.label is None for x in examples):
        raise ValueError("finetune requires labeled examples")
    work = copy_model(model)
    if cfg.max_steps == 0:
        return work
    if loss_kind == "auto":
        loss_kind = choose_loss_kind(pvp, task)
    sampler = _EpochSampler(len(examples), cfg.seed, "order")

    def next_loss() -> Tensor:
        idx, epoch, pos = sampler.next_index()
        draw = rng.stream(cfg.seed, "augment", epoch, pos)
        x, targets = _augmented(examples[idx], augment, pvp, vocab, draw)
        kind = "free_form" if targets is not None else loss_kind
        return pvp_loss_graph(
            work, pvp, x, task, vocab, cfg.max_seq_length, kind, free_form_targets=targets
        )

    _run_steps(work, cfg, next_loss, Path(log_dir) if log_dir else None, f"pvp:{pvp.name}")
    return work


def train_classifier(
    classifier,
    inputs: list[tuple[tuple[int, ...], np.ndarray]],
    cfg: TrainConfig,
    log_dir: str | Path | None = None,
) -> object:
    """Train a copy of the classifier on (token ids, teacher distribution)
    pairs with the softened distillation loss."""
    if not inputs:
        raise ValueError("empty distillation set")
    work = copy_model(classifier)
    if cfg.max_steps == 0:
        return work
    sampler = _EpochSampler(len(inputs), cfg.seed, "order")

    def next_loss() -> Tensor:
        idx, _, _ = sampler.next_index()
        ids, teacher = inputs[idx]
        return classifier_loss_graph(work, list(ids), teacher, cfg.distillation_temperature)

    _run_steps(work, cfg, next_loss, Path(log_dir) if log_dir else None, "classifier")
    return work


def pretrain_mlm(
    model,
    corpus: list[str],
    vocab: Vocabulary,
    cfg: TrainConfig,
    mask_prob: float = 0.15,
) -> object:
    """Masked-token pretraining of a copy of `model` on raw text lines.

    Each drawn sequence gets ~15% of positions replaced by MASK (at least
    one) and the model predicts the originals.
    """
    from .vocab import tokenize

    sequences = []
    limit = model.config.max_positions
    for line in corpus:
        ids = list(tokenize(vocab, line).ids)[:limit]
        if len(ids) >= 2:
            sequences.append(ids)
    if not sequences:
        raise ValueError("pretraining corpus produced no usable sequences")
    work = copy_model(model)
    if cfg.max_steps == 0:
        return work
    sampler = _EpochSampler(len(sequences), cfg.seed, "mlm-order")
    gen = rng.generator(cfg.seed, "mlm-mask")

    def next_loss() -> Tensor:
        idx, _, _ = sampler.next_index()
        ids = sequences[idx]
        picks = np.nonzero(gen.random(len(ids)) < mask_prob)[0]
        if picks.size == 0:
            picks = np.array([int(gen.integers(len(ids)))])
        masked_ids = list(ids)
        originals = []
        for p in picks:
            originals.append(ids[p])
            masked_ids[p] = vocab.mask_id
        return mlm_loss_graph(work, masked_ids, [int(p) for p in picks], originals)

    _run_steps(work, cfg, next_loss, None, "pretrain")
    return work
