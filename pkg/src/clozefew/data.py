"""Dataset I/O, few-shot sampling, metrics, and synthetic toy tasks.

Few-shot training sets are drawn by shuffling the full training set with
the package's documented splitmix64 Fisher-Yates (see `rng`) and taking
the first n rows, so the same (file, n, seed) triple yields byte-identical
output on every platform.  Unlabeled pools are built the same way with
labels stripped; the combined splits builder keeps the two disjoint by id.

The three toy task generators produce label-balanced datasets with known
ground truth from templated grammars, plus a pretraining corpus and cloze
patterns sized for the tiny trainable backend.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .pvp import Example, TaskBundle, TaskSpec
from .vocab import SPECIAL_TOKENS, Vocabulary


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    task: str
    split: str
    examples: list[Example] = field(default_factory=list)

    def __post_init__(self):
        ids = [x.id for x in self.examples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate example ids in {self.task}/{self.split}: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def by_id(self) -> dict[str, Example]:
        return {x.id: x for x in self.examples}


# ----------------------------------------------------------------------
# JSONL I/O


def example_to_json(x: Example, task: TaskSpec) -> dict:
    obj: dict = {"id": x.id, "fields": dict(x.fields)}
    if x.label is not None:
        obj["label"] = task.labels[x.label]
    if x.candidates is not None:
        obj["candidates"] = [task.labels[c] for c in x.candidates]
    if x.meta:
        obj["meta"] = dict(x.meta)
    return obj


def example_from_json(obj: dict, task: TaskSpec) -> Example:
    label = task.label_id(obj["label"]) if "label" in obj and obj["label"] is not None else None
    candidates = (
        tuple(task.label_id(c) for c in obj["candidates"]) if obj.get("candidates") else None
    )
    return Example(
        id=obj["id"],
        fields=dict(obj["fields"]),
        label=label,
        candidates=candidates,
        meta=dict(obj.get("meta", {})),
    )


def save_dataset(path: str | Path, dataset: Dataset, task: TaskSpec) -> None:
    lines = [json.dumps(example_to_json(x, task), sort_keys=True) for x in dataset]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_dataset(path: str | Path, task: TaskSpec, split: str = "data") -> Dataset:
    examples = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            examples.append(example_from_json(json.loads(line), task))
    return Dataset(task.name, split, examples)


def dataset_hash(dataset: Dataset, task: TaskSpec) -> str:
    payload = "\n".join(json.dumps(example_to_json(x, task), sort_keys=True) for x in dataset)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_predictions(path: str | Path, task: TaskSpec) -> dict[str, dict]:
    """Prediction rows keyed by id: {"label": id} and/or {"scores": {id: v}}."""
    out: dict[str, dict] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        row: dict = {}
        if "label" in obj:
            row["label"] = task.label_id(obj["label"])
        if "scores" in obj:
            row["scores"] = {task.label_id(k): float(v) for k, v in obj["scores"].items()}
        out[obj["id"]] = row
    return out


# ----------------------------------------------------------------------
# sampling


def sample_few_shot(
    full: Dataset, n: int, seed: int, group_key: str | None = None
) -> Dataset:
    """First `n` rows (or question groups) of the seeded shuffle of `full`."""
    if group_key is None:
        if len(full) < n:
            raise DataError(f"need {n} examples, have {len(full)}")
        order = rng.shuffled(list(range(len(full))), seed, "few-shot")
        picked = [full.examples[i] for i in order[:n]]
    else:
        groups: dict[str, list[Example]] = {}
        for x in full:
            groups.setdefault(str(x.meta.get(group_key, x.id)), []).append(x)
        if len(groups) < n:
            raise DataError(f"need {n} groups, have {len(groups)}")
        keys = rng.shuffled(sorted(groups), seed, "few-shot-groups")
        picked = [x for key in keys[:n] for x in groups[key]]
    return Dataset(full.task, "train-few", picked)


def build_unlabeled(full: Dataset, cap: int, seed: int) -> Dataset:
    """Up to `cap` post-shuffle examples with labels removed, ids preserved."""
    order = rng.shuffled(list(range(len(full))), seed, "unlabeled")
    picked = [full.examples[i].with_label(None) for i in order[:cap]]
    return Dataset(full.task, "unlabeled", picked)


def make_few_shot_splits(
    full: Dataset, n: int, cap: int, seed: int, group_key: str | None = None
) -> tuple[Dataset, Dataset]:
    """Few-shot set plus an unlabeled pool guaranteed disjoint from it by id."""
    few = sample_few_shot(full, n, seed, group_key)
    taken = {x.id for x in few}
    remainder = Dataset(full.task, "pool", [x for x in full if x.id not in taken])
    return few, build_unlabeled(remainder, cap, seed)


# ----------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricReport:
    values: dict[str, float]
    counts: dict[str, int]

    def __post_init__(self):
        for name, value in self.values.items():
            if not (0.0 <= value <= 1.0):
                raise DataError(f"metric {name} out of range: {value}")

    def to_json(self) -> dict:
        return {"metrics": self.values, "counts": self.counts}


def _f1(tp: int, fp: int, fn: int) -> float:
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


def _macro_f1(pred: dict[str, int], gold_pairs: list[tuple[str, int]]) -> float:
    labels = sorted({y for _, y in gold_pairs})
    scores = []
    for label in labels:
        tp = sum(1 for i, y in gold_pairs if y == label and pred[i] == label)
        fp = sum(1 for i, y in gold_pairs if y != label and pred[i] == label)
        fn = sum(1 for i, y in gold_pairs if y == label and pred[i] != label)
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def _groups(gold: Dataset) -> dict[str, list[Example]]:
    out: dict[str, list[Example]] = {}
    for x in gold:
        out.setdefault(str(x.meta.get("group", x.id)), []).append(x)
    return out


def evaluate(
    predictions: dict[str, dict],
    gold: Dataset,
    metrics: tuple[str, ...],
    positive_label: int | None = None,
) -> MetricReport:
    """Score predictions against labeled examples.

    Supported metrics: ``acc``; ``f1`` (macro over gold labels); ``em``
    (all options of a question group correct); ``f1a`` (micro F1 of the
    positive label over all option-level decisions); ``group_acc``
    (per-group argmax over the positive-label score).
    """
    missing = [x.id for x in gold if x.id not in predictions]
    if missing:
        raise DataError(f"missing predictions for ids: {missing[:10]}")
    gold_pairs = [(x.id, x.label) for x in gold if x.label is not None]
    if not gold_pairs:
        raise DataError("gold dataset carries no labels")

    def predicted_label(example_id: str) -> int:
        row = predictions[example_id]
        if "label" in row:
            return row["label"]
        scores = row["scores"]
        return max(sorted(scores), key=lambda k: scores[k])

    pred = {i: predicted_label(i) for i, _ in gold_pairs}
    values: dict[str, float] = {}
    counts: dict[str, int] = {}
    need_positive = {"f1a", "group_acc"} & set(metrics)
    if need_positive and positive_label is None:
        labels = sorted({y for _, y in gold_pairs})
        if len(labels) != 2:
            raise DataError(f"metrics {sorted(need_positive)} need a positive label")
        positive_label = labels[1]

    for metric in metrics:
        if metric == "acc":
            values["acc"] = float(np.mean([pred[i] == y for i, y in gold_pairs]))
            counts["acc"] = len(gold_pairs)
        elif metric == "f1":
            values["f1"] = _macro_f1(pred, gold_pairs)
            counts["f1"] = len(gold_pairs)
        elif metric == "em":
            groups = _groups(gold)
            values["em"] = float(
                np.mean([all(pred[x.id] == x.label for x in grp) for grp in groups.values()])
            )
            counts["em"] = len(groups)
        elif metric == "f1a":
            tp = sum(1 for i, y in gold_pairs if y == positive_label and pred[i] == positive_label)
            fp = sum(1 for i, y in gold_pairs if y != positive_label and pred[i] == positive_label)
            fn = sum(1 for i, y in gold_pairs if y == positive_label and pred[i] != positive_label)
            values["f1a"] = _f1(tp, fp, fn)
            counts["f1a"] = len(gold_pairs)
        elif metric == "group_acc":
            hits = []
            for grp in _groups(gold).values():
                def positive_score(x: Example) -> float:
                    row = predictions[x.id]
                    if "scores" in row:
                        return row["scores"].get(positive_label, float("-inf"))
                    return 1.0 if row["label"] == positive_label else 0.0
                best = max(sorted(grp, key=lambda x: x.id), key=positive_score)
                hits.append(best.label == positive_label)
            values["group_acc"] = float(np.mean(hits))
            counts["group_acc"] = len(_groups(gold))
        else:
            raise DataError(f"unknown metric {metric!r}")
    return MetricReport(values, counts)


# ----------------------------------------------------------------------
# dataset transforms


def filter_positive(dataset: Dataset, positive_label: int) -> Dataset:
    """Keep only examples carrying the positive label (free-form training)."""
    kept = [x for x in dataset if x.label == positive_label]
    return Dataset(dataset.task, dataset.split, kept)


def split_candidates(dataset: Dataset, max_candidates: int, seed: int) -> Dataset:
    """Cap huge per-example candidate sets by sampling negatives.

    Each labeled example keeps its gold label plus up to `max_candidates-1`
    seeded-sampled negatives; examples already within the cap pass through.
    """
    out = []
    for x in dataset:
        if x.candidates is None or len(x.candidates) <= max_candidates or x.label is None:
            out.append(x)
            continue
        negatives = [c for c in x.candidates if c != x.label]
        draw = rng.stream(seed, "split-candidates", x.id)
        chosen = list(negatives)
        draw.shuffle(chosen)
        chosen = sorted(chosen[: max_candidates - 1] + [x.label])
        out.append(Example(x.id, dict(x.fields), x.label, tuple(chosen), dict(x.meta)))
    return Dataset(dataset.task, dataset.split, out)


# ----------------------------------------------------------------------
# toy tasks
#
# Each kind supplies: vocabulary, task schema, patterns, verbalizer
# surfaces, a pretraining corpus generator, and an example grammar with
# known ground truth.  Everything is deterministic per seed.

_PUNCT = [".", "!", "?", ",", '"', ":", "|"]

_SENT_POS = ["great", "tasty", "fresh", "lovely", "fine", "super", "nice",
             "happy", "golden", "warm", "crisp", "sweet"]
_SENT_NEG = ["terrible", "awful", "bland", "nasty", "stale", "gross", "sad",
             "cold", "soggy", "bitter", "rotten", "greasy"]
_SENT_NOUNS = ["pizza", "soup", "bread", "cake", "tea", "fish", "salad",
               "rice", "stew", "pie"]
_SENT_FILLER = ["the", "was", "is", "it", "this", "and", "really", "very",
                "so", "a", "food", "place", "meal", "all", "in"]

_ENT_GROUPS = [
    ["big", "large", "huge"],
    ["small", "little", "tiny"],
    ["fast", "quick", "speedy"],
    ["slow", "lazy", "sleepy"],
    ["happy", "glad", "merry"],
    ["sad", "gloomy", "upset"],
]
_ENT_NOUNS = ["dog", "cat", "bird", "horse", "cow", "fox", "frog", "bear",
              "mouse", "sheep"]
_ENT_FILLER = ["the", "is", "a", "yes", "no", "question", "answer", "and",
               "means", "so", "very", "it", "was", "not"]

_SPAN_ANSWERS = {
    "owl": ["hoot", "night"],
    "bat": ["cave", "wing"],
    "red fox": ["den", "bushy"],
    "red crab": ["sand", "claw"],
    "sea lion": ["wave", "roar"],
    "sea turtle": ["beach", "calm"],
    "green turtle": ["pond", "moss"],
    "big gray wolf": ["howl", "pack"],
}
_SPAN_FILLER = ["it", "likes", "the", "and", "is", "a", "near", "lives",
                "answer", "this", "animal", "one", "that", "loves"]


def toy_kinds() -> tuple[str, ...]:
    return ("sentiment", "entailment", "span-choice")


def make_toy_vocab(kind: str) -> Vocabulary:
    """Task-specific tiny vocabulary.

    The sentiment vocabulary deliberately omits "terrible" as a whole token
    and carries the pieces "terri" and "·ble" instead, so the negative
    verbalization tokenizes to two pieces.
    """
    if kind == "sentiment":
        words = set(_SENT_POS + _SENT_NEG + _SENT_NOUNS + _SENT_FILLER)
        words.discard("terrible")
        words.update(["terri", "·ble"])
    elif kind == "entailment":
        words = set(w for grp in _ENT_GROUPS for w in grp)
        words.update(_ENT_NOUNS + _ENT_FILLER)
    elif kind == "span-choice":
        words = set(_SPAN_FILLER)
        for answer, signature in _SPAN_ANSWERS.items():
            words.update(answer.split())
            words.update(signature)
    else:
        raise DataError(f"unknown toy kind {kind!r}")
    tokens = tuple(SPECIAL_TOKENS) + tuple(_PUNCT) + tuple(sorted(words))
    return Vocabulary(tokens)


def toy_bundle(kind: str) -> TaskBundle:
    from .pvp import Pattern

    if kind == "sentiment":
        task = TaskSpec(
            name="toy-sentiment",
            labels=("negative", "positive"),
            fields=("text",),
            metrics=("acc", "f1"),
            positive_label="positive",
        )
        patterns = [
            Pattern.parse("{text} it was [MASK] .", "p1"),
            Pattern.parse("{text} all in all , it was [MASK] .", "p2"),
            Pattern.parse("it was [MASK] ! {text}", "p3"),
        ]
        surfaces = {"default": {"positive": "great", "negative": "terrible"}}
    elif kind == "entailment":
        task = TaskSpec(
            name="toy-entailment",
            labels=("no", "yes"),
            fields=("premise", "hypothesis"),
            metrics=("acc", "f1"),
            positive_label="yes",
        )
        patterns = [
            Pattern.parse("{hypothesis} ? [MASK] , {premise}", "e1"),
            Pattern.parse('" {hypothesis} " ? [MASK] . " {premise} "', "e2"),
            Pattern.parse("{premise} || question : {hypothesis} ? answer : [MASK] .", "e3"),
        ]
        surfaces = {"default": {"yes": "yes", "no": "no"}}
    elif kind == "span-choice":
        answers = tuple(_SPAN_ANSWERS)
        task = TaskSpec(
            name="toy-span-choice",
            labels=answers,
            fields=("text",),
            metrics=("acc",),
        )
        patterns = [
            Pattern.parse("{text} it is a [MASK] .", "s1"),
            Pattern.parse("{text} the answer is [MASK] .", "s2"),
        ]
        surfaces = {"default": {a: a for a in answers}}
    else:
        raise DataError(f"unknown toy kind {kind!r}")
    return TaskBundle(task, patterns, surfaces)


def _pick(draw: rng.SplitMix64, items):
    return items[draw.randbelow(len(items))]


def _sentiment_fields(draw: rng.SplitMix64, label: int) -> dict[str, str]:
    adjectives = _SENT_POS if label == 1 else _SENT_NEG
    adj = _pick(draw, adjectives)
    adj2 = _pick(draw, adjectives)
    noun = _pick(draw, _SENT_NOUNS)
    templates = [
        f"{adj} {noun} !",
        f"the {noun} was {adj} .",
        f"this {noun} is {adj} .",
        f"really {adj} {noun} .",
        f"the {noun} was {adj} and {adj2} .",
        f"{adj} and {adj2} {noun} !",
    ]
    return {"text": _pick(draw, templates)}


def _entailment_fields(draw: rng.SplitMix64, label: int) -> dict[str, str]:
    noun = _pick(draw, _ENT_NOUNS)
    group_idx = draw.randbelow(len(_ENT_GROUPS))
    group = _ENT_GROUPS[group_idx]
    premise_adj = _pick(draw, group)
    if label == 1:
        hypothesis_adj = _pick(draw, group)
    else:
        other_idx = draw.randbelow(len(_ENT_GROUPS) - 1)
        if other_idx >= group_idx:
            other_idx += 1
        hypothesis_adj = _pick(draw, _ENT_GROUPS[other_idx])
    return {
        "premise": f"the {noun} is {premise_adj} .",
        "hypothesis": f"the {noun} is {hypothesis_adj} .",
    }


def entailment_rule(premise: str, hypothesis: str) -> int:
    """Ground truth of the entailment grammar: same synonym group -> yes."""
    def adjective(sentence: str) -> str:
        return sentence.replace(".", "").split()[-1]

    def group_of(adj: str) -> int:
        for i, grp in enumerate(_ENT_GROUPS):
            if adj in grp:
                return i
        raise DataError(f"adjective {adj!r} outside the grammar")

    return int(group_of(adjective(premise)) == group_of(adjective(hypothesis)))


def _span_choice_example(draw: rng.SplitMix64, label: int, answers: tuple[str, ...]):
    signature = _SPAN_ANSWERS[answers[label]]
    templates = [
        f"it likes the {signature[0]} and the {signature[1]} .",
        f"this animal loves the {signature[1]} and the {signature[0]} .",
        f"one that lives near the {signature[0]} and likes the {signature[1]} .",
    ]
    fields = {"text": _pick(draw, templates)}
    others = [i for i in range(len(answers)) if i != label]
    draw.shuffle(others)
    candidates = tuple(sorted([label] + others[:2]))
    return fields, candidates


def make_toy_task(
    kind: str,
    size: int,
    vocab: Vocabulary,
    seed: int,
    dev_size: int = 100,
    test_size: int = 200,
    unlabeled_size: int = 1000,
) -> dict[str, Dataset]:
    """Generate train/dev/test/unlabeled splits with known ground truth.

    Labels are balanced round-robin; every random choice flows from named
    sub-streams of `seed`, so regeneration is exact.
    """
    bundle = toy_bundle(kind)
    task = bundle.task
    num_labels = len(task.labels)

    def generate(split: str, count: int, labeled: bool) -> Dataset:
        examples = []
        for i in range(count):
            label = i % num_labels
            draw = rng.stream(seed, "toy", kind, split, i)
            if kind == "sentiment":
                fields, candidates = _sentiment_fields(draw, label), None
            elif kind == "entailment":
                fields, candidates = _entailment_fields(draw, label), None
            else:
                fields, candidates = _span_choice_example(draw, label, task.labels)
            examples.append(
                Example(
                    id=f"{split}-{i:05d}",
                    fields=fields,
                    label=label if labeled else None,
                    candidates=candidates,
                )
            )
        order = rng.shuffled(list(range(count)), seed, "toy-order", kind, split)
        return Dataset(task.name, split, [examples[i] for i in order])

    return {
        "train": generate("train", size, labeled=True),
        "dev": generate("dev", dev_size, labeled=True),
        "test": generate("test", test_size, labeled=True),
        "unlabeled": generate("unlabeled", unlabeled_size, labeled=False),
    }


def make_toy_corpus(kind: str, lines: int, seed: int) -> list[str]:
    """Pretraining text whose co-occurrence statistics carry the task's
    background knowledge (polarity clusters, synonym groups, habitat facts)."""
    out = []
    for i in range(lines):
        draw = rng.stream(seed, "corpus", kind, i)
        if kind == "sentiment":
            label = draw.randbelow(2)
            adjectives = _SENT_POS if label == 1 else _SENT_NEG
            adj, adj2, adj3 = (_pick(draw, adjectives) for _ in range(3))
            noun, noun2 = _pick(draw, _SENT_NOUNS), _pick(draw, _SENT_NOUNS)
            choices = [
                f"the {noun} was {adj} . it was {adj2} .",
                f"{adj} {noun} ! so {adj2} .",
                f"really {adj} and {adj2} {noun} .",
                f"this {noun} is {adj} . the {noun2} is {adj2} .",
                f"{adj} {noun} and {adj2} {noun2} . all in all {adj3} .",
                f"the {noun} and the {noun2} .",
                f"it is a {noun} . it is a {noun2} .",
            ]
            out.append(_pick(draw, choices))
        elif kind == "entailment":
            group = _ENT_GROUPS[draw.randbelow(len(_ENT_GROUPS))]
            adj, adj2 = _pick(draw, group), _pick(draw, group)
            other = _ENT_GROUPS[draw.randbelow(len(_ENT_GROUPS))]
            anti = _pick(draw, other)
            noun = _pick(draw, _ENT_NOUNS)
            same = group is other or anti in group
            choices = [
                f"the {noun} is {adj} and {adj2} .",
                f"{adj} means {adj2} .",
                f"the {noun} is {adj} . the {noun} is {adj2} . yes .",
                f"the {noun} is {adj} . is it {anti} ? " + ("yes ." if same else "no ."),
                f"a {noun} and a {noun} .",
            ]
            out.append(_pick(draw, choices))
        elif kind == "span-choice":
            answers = tuple(_SPAN_ANSWERS)
            answer = _pick(draw, answers)
            sig = _SPAN_ANSWERS[answer]
            choices = [
                f"the {answer} likes the {sig[0]} and the {sig[1]} .",
                f"the {answer} lives near the {sig[0]} .",
                f"it likes the {sig[1]} . it is a {answer} .",
                f"a {answer} is an animal .",
            ]
            out.append(_pick(draw, choices))
        else:
            raise DataError(f"unknown toy kind {kind!r}")
    return out


def write_toy_files(
    directory: str | Path,
    kind: str,
    size: int,
    seed: int,
    corpus_lines: int = 1500,
    **split_sizes,
) -> None:
    """Materialize a full toy task bundle: schema, patterns, verbalizers,
    vocabulary, pretraining corpus and all four JSONL splits."""
    from .pvp import save_bundle

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    bundle = toy_bundle(kind)
    vocab = make_toy_vocab(kind)
    save_bundle(root, bundle)
    vocab.save(root / "vocab.txt")
    corpus = make_toy_corpus(kind, corpus_lines, seed)
    (root / "corpus.txt").write_text("\n".join(corpus) + "\n", encoding="utf-8")
    splits = make_toy_task(kind, size, vocab, seed, **split_sizes)
    for name, dataset in splits.items():
        save_dataset(root / f"{name}.jsonl", dataset, bundle.task)
