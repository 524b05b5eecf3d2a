"""Cloze scoring of labels through a masked LM.

Single-token candidates are scored by the raw logit of their verbalization
at the mask position, normalized over the candidate set.  Multi-token
candidates are scored autoregressively: starting from the pattern with k
masks, fill one slot per step and multiply the per-step probabilities.
Three slot orders are supported:

* ``max_first``      -- fill the slot whose target token currently has the
                        highest probability (ties: lowest slot index);
* ``left_to_right``  -- fill slots in position order;
* ``parallel``       -- score all slots from a single forward pass.

Probabilities are combined in log space; tables report them as plain
probabilities.  The parallel order is also the single-forward-pass
approximation used during training, where every candidate is scored
against the same maximally-masked sequence and surplus mask slots are
ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .mlm import forward_masked
from .pvp import PVP, Example, TaskSpec, apply_pattern, max_verbalization_len
from .vocab import TokenSequence, Vocabulary, detokenize


class DecodingStrategy(str, Enum):
    MAX_FIRST = "max-first"
    LEFT_TO_RIGHT = "ltr"
    PARALLEL = "parallel"


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreTable:
    """Per-label raw and final scores for one example.

    `raw` holds the quantity ensembles combine: the mask-position logit for
    single-token scoring, the log of the sequence probability otherwise.
    Normalized tables hold a probability distribution over the candidate
    set; unnormalized ones hold per-label sequence probabilities in (0, 1].
    """

    labels: tuple[int, ...]
    raw: dict[int, float]
    scores: dict[int, float]
    normalized: bool

    def argmax(self) -> int:
        """Highest-scoring label; ties break toward the lower label id."""
        return max(sorted(self.labels), key=lambda y: self.scores[y])

    def distribution(self, num_labels: int) -> np.ndarray:
        """Dense score vector over all task labels (zeros off-candidate)."""
        out = np.zeros(num_labels)
        for y, s in self.scores.items():
            out[y] = s
        return out


def _softmax_over(values: dict[int, float]) -> dict[int, float]:
    keys = sorted(values)
    arr = np.array([values[k] for k in keys], dtype=np.float64)
    arr -= arr.max()
    e = np.exp(arr)
    e /= e.sum()
    return {k: float(p) for k, p in zip(keys, e)}


def score_single_token(
    pvp: PVP, model, x: Example, task: TaskSpec, max_seq_length: int, vocab: Vocabulary
) -> ScoreTable:
    """Normalized label distribution from the single mask-position logits."""
    candidates = x.candidate_ids(task)
    verbalizations = {y: pvp.verbalizer.tokens(y) for y in candidates}
    if any(len(t) != 1 for t in verbalizations.values()):
        raise ScoringError(
            "multi-token verbalization present; use score_multi_token instead"
        )
    z = apply_pattern(pvp, x, 1, max_seq_length, vocab)
    row = forward_masked(model, z).rows[0]
    raw = {y: float(row[toks[0]]) for y, toks in verbalizations.items()}
    return ScoreTable(tuple(candidates), raw, _softmax_over(raw), normalized=True)


def _slot_log_probs(model, z: TokenSequence, targets: list[int]) -> np.ndarray:
    """log q of each remaining target token at its slot, one forward pass."""
    probs = forward_masked(model, z).probs()
    return np.array(
        [math.log(max(probs[i, t], 1e-300)) for i, t in enumerate(targets)]
    )


def decode_sequence_logprob(
    model, z: TokenSequence, tokens: list[int] | tuple[int, ...], strategy: DecodingStrategy
) -> float:
    """Log probability of filling the masks of `z` with `tokens`.

    Iterative form of the autoregressive recursion; the empty sequence has
    probability 1.
    """
    tokens = list(tokens)
    if len(tokens) != z.num_masks:
        raise ScoringError(f"{len(tokens)} target tokens for {z.num_masks} mask slots")
    if not tokens:
        return 0.0
    if strategy == DecodingStrategy.PARALLEL:
        return float(_slot_log_probs(model, z, tokens).sum())
    total = 0.0
    current = z
    remaining = tokens
    while remaining:
        logs = _slot_log_probs(model, current, remaining)
        j = 0 if strategy == DecodingStrategy.LEFT_TO_RIGHT else int(np.argmax(logs))
        total += float(logs[j])
        current = current.substitute(j, remaining[j])
        remaining = remaining[:j] + remaining[j + 1 :]
    return total


def decode_sequence_prob(
    model, z: TokenSequence, tokens: list[int] | tuple[int, ...], strategy: DecodingStrategy
) -> float:
    return math.exp(decode_sequence_logprob(model, z, tokens, strategy))


def score_multi_token(
    pvp: PVP,
    model,
    x: Example,
    task: TaskSpec,
    strategy: DecodingStrategy,
    max_seq_length: int,
    vocab: Vocabulary,
) -> ScoreTable:
    """Unnormalized per-label sequence probabilities.

    Each candidate is scored against the pattern expanded to exactly its
    own verbalization length.  `raw` is the log probability, the quantity
    ensembles combine for multi-token members.
    """
    candidates = x.candidate_ids(task)
    if not candidates:
        raise ScoringError(f"example {x.id} has an empty candidate set")
    raw: dict[int, float] = {}
    for y in candidates:
        toks = pvp.verbalizer.tokens(y)
        z = apply_pattern(pvp, x, len(toks), max_seq_length, vocab)
        raw[y] = decode_sequence_logprob(model, z, toks, strategy)
    scores = {y: math.exp(v) for y, v in raw.items()}
    return ScoreTable(tuple(candidates), raw, scores, normalized=False)


def score_parallel_training(
    pvp: PVP,
    model,
    x: Example,
    task: TaskSpec,
    max_seq_length: int,
    vocab: Vocabulary,
) -> ScoreTable:
    """Single-forward-pass approximation used during training.

    The pattern carries as many masks as the longest candidate needs; every
    candidate's tokens are scored in parallel at the leading slots and the
    surplus slots are ignored.  Exactly one model invocation per example.
    """
    candidates = x.candidate_ids(task)
    length = max_verbalization_len(pvp, x, task)
    z = apply_pattern(pvp, x, length, max_seq_length, vocab)
    probs = forward_masked(model, z).probs()
    raw: dict[int, float] = {}
    for y in candidates:
        toks = pvp.verbalizer.tokens(y)
        raw[y] = float(
            sum(math.log(max(probs[i, t], 1e-300)) for i, t in enumerate(toks))
        )
    scores = {y: math.exp(v) for y, v in raw.items()}
    return ScoreTable(tuple(candidates), raw, scores, normalized=False)


def score_example(
    pvp: PVP,
    model,
    x: Example,
    task: TaskSpec,
    strategy: DecodingStrategy,
    max_seq_length: int,
    vocab: Vocabulary,
) -> ScoreTable:
    """Dispatch on verbalization lengths: single-token exact scoring when
    possible, multi-token decoding otherwise."""
    candidates = x.candidate_ids(task)
    if all(len(pvp.verbalizer.tokens(y)) == 1 for y in candidates):
        return score_single_token(pvp, model, x, task, max_seq_length, vocab)
    return score_multi_token(pvp, model, x, task, strategy, max_seq_length, vocab)


def free_form_decode(model, z: TokenSequence, max_tokens: int | None = None) -> list[int]:
    """Greedy max-first completion of every mask slot of `z`.

    Each step picks the (slot, token) pair with the highest probability
    among the remaining slots, substitutes it, and re-runs the model.
    Returns the chosen tokens in slot position order with PAD stripped.
    """
    if z.num_masks < 1:
        raise ScoringError("sequence has no mask slots")
    pad_id = model.vocab.pad_id
    current = z
    chosen: list[tuple[int, int]] = []  # (original position, token)
    positions = list(z.mask_positions)
    steps = z.num_masks if max_tokens is None else min(max_tokens, z.num_masks)
    for _ in range(steps):
        probs = forward_masked(model, current).probs()
        best_per_slot = probs.max(axis=1)
        slot = int(np.argmax(best_per_slot))
        token = int(np.argmax(probs[slot]))
        chosen.append((positions[slot], token))
        current = current.substitute(slot, token)
        positions.pop(slot)
    chosen.sort()
    return [tok for _, tok in chosen if tok != pad_id]


def free_form_surface(model, z: TokenSequence, vocab: Vocabulary) -> str:
    return detokenize(vocab, free_form_decode(model, z))


def normalize_surface(text: str) -> str:
    """Lowercase and strip punctuation, for free-form answer matching."""
    cleaned = "".join(c if c.isalnum() or c.isspace() else " " for c in text.lower())
    return " ".join(cleaned.split())


def free_form_matches(predicted: str, target: str) -> bool:
    """Containment match after normalization, in either direction."""
    p, t = normalize_surface(predicted), normalize_surface(target)
    if not p or not t:
        return False
    return f" {p} " in f" {t} " or f" {t} " in f" {p} "


def table_to_json(example_id: str, table: ScoreTable, task: TaskSpec, strategy: str) -> str:
    """One JSONL line of a score table, keyed by label name."""
    return json.dumps(
        {
            "id": example_id,
            "strategy": strategy,
            "normalized": table.normalized,
            "raw": {task.labels[y]: table.raw[y] for y in table.labels},
            "scores": {task.labels[y]: table.scores[y] for y in table.labels},
        },
        sort_keys=True,
    )
