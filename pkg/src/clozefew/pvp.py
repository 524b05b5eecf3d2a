"""Patterns, verbalizers, task schema, and the rewrite of inputs into cloze
questions.

A pattern is a text template with `{field}` placeholders, a single `[MASK]`
slot, and an optional `||` marker separating two text segments.  A
verbalizer maps each label to a token sequence.  Together they turn a
classification example into a fill-in-the-blank question whose blank the
masked LM scores.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .vocab import MASK_TOKEN, TokenSequence, Vocabulary, sequence, tokenize

SEGMENT_BOUNDARY = "||"


class PatternError(ValueError):
    """Malformed pattern or pattern/task mismatch."""


class VerbalizerError(ValueError):
    """Malformed verbalizer or verbalizer/task mismatch."""


class UnfittablePatternError(ValueError):
    """Pattern literals plus mask slots alone exceed the length budget."""


@dataclass(frozen=True)
class TaskSpec:
    """Task schema: label names, input field names, metric names."""

    name: str
    labels: tuple[str, ...]
    fields: tuple[str, ...]
    metrics: tuple[str, ...] = ("acc",)
    positive_label: str | None = None

    def label_id(self, name: str) -> int:
        try:
            return self.labels.index(name)
        except ValueError:
            raise VerbalizerError(f"unknown label {name!r} for task {self.name}") from None

    @property
    def label_ids(self) -> tuple[int, ...]:
        return tuple(range(len(self.labels)))

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "labels": list(self.labels),
            "fields": list(self.fields),
            "metrics": list(self.metrics),
        }
        if self.positive_label is not None:
            out["positive_label"] = self.positive_label
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        return cls(
            name=obj["name"],
            labels=tuple(obj["labels"]),
            fields=tuple(obj["fields"]),
            metrics=tuple(obj.get("metrics", ["acc"])),
            positive_label=obj.get("positive_label"),
        )


@dataclass(frozen=True)
class Example:
    """One task input: named text fields, optional label and candidate set."""

    id: str
    fields: dict[str, str]
    label: int | None = None
    candidates: tuple[int, ...] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.fields:
            raise ValueError(f"example {self.id}: fields must be nonempty")
        if self.candidates is not None and self.label is not None:
            if self.label not in self.candidates:
                raise ValueError(
                    f"example {self.id}: label {self.label} not in candidates {self.candidates}"
                )

    def candidate_ids(self, task: TaskSpec) -> tuple[int, ...]:
        return self.candidates if self.candidates is not None else task.label_ids

    def with_label(self, label: int | None) -> "Example":
        return Example(self.id, dict(self.fields), label, self.candidates, dict(self.meta))

    def with_fields(self, fields: dict[str, str]) -> "Example":
        return Example(self.id, fields, self.label, self.candidates, dict(self.meta))


# pattern segments: ("literal", text) | ("field", name) | ("mask",) | ("boundary",)
_TEMPLATE_RE = re.compile(r"\{(\w+)\}|\[MASK\]|\|\|")


@dataclass(frozen=True)
class Pattern:
    """Parsed cloze template with exactly one mask slot."""

    name: str
    segments: tuple[tuple, ...]

    def __post_init__(self):
        masks = sum(1 for seg in self.segments if seg[0] == "mask")
        if masks != 1:
            raise PatternError(f"pattern {self.name!r} has {masks} mask slots, needs exactly 1")
        boundaries = sum(1 for seg in self.segments if seg[0] == "boundary")
        if boundaries > 1:
            raise PatternError(f"pattern {self.name!r} has {boundaries} segment boundaries, max 1")

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(seg[1] for seg in self.segments if seg[0] == "field")

    @classmethod
    def parse(cls, text: str, name: str = "pattern") -> "Pattern":
        segments: list[tuple] = []
        pos = 0
        stripped = text.strip()
        for match in _TEMPLATE_RE.finditer(stripped):
            if match.start() > pos:
                segments.append(("literal", stripped[pos : match.start()]))
            if match.group(1):
                segments.append(("field", match.group(1)))
            elif match.group(0) == MASK_TOKEN:
                segments.append(("mask",))
            else:
                segments.append(("boundary",))
            pos = match.end()
        if pos < len(stripped):
            segments.append(("literal", stripped[pos:]))
        return cls(name, tuple(segments))

    def render(self) -> str:
        parts = []
        for seg in self.segments:
            if seg[0] == "literal":
                parts.append(seg[1])
            elif seg[0] == "field":
                parts.append("{" + seg[1] + "}")
            elif seg[0] == "mask":
                parts.append(MASK_TOKEN)
            else:
                parts.append(SEGMENT_BOUNDARY)
        return "".join(parts)


@dataclass(frozen=True)
class Verbalizer:
    """Injective map from label id to a nonempty token-id sequence."""

    name: str
    mapping: dict[int, tuple[int, ...]]

    def validate(self, vocab: Vocabulary) -> None:
        seen: dict[tuple[int, ...], int] = {}
        for label, toks in self.mapping.items():
            if not toks:
                raise VerbalizerError(f"verbalizer {self.name!r}: empty sequence for label {label}")
            if any(t in (vocab.mask_id, vocab.pad_id) for t in toks):
                raise VerbalizerError(
                    f"verbalizer {self.name!r}: label {label} maps onto mask/pad tokens"
                )
            if vocab.unk_id in toks:
                raise VerbalizerError(
                    f"verbalizer {self.name!r}: label {label} verbalization falls outside the vocabulary"
                )
            if toks in seen:
                raise VerbalizerError(
                    f"verbalizer {self.name!r}: labels {seen[toks]} and {label} share a verbalization"
                )
            seen[toks] = label

    def tokens(self, label: int) -> tuple[int, ...]:
        try:
            return self.mapping[label]
        except KeyError:
            raise VerbalizerError(f"verbalizer {self.name!r} has no entry for label {label}") from None

    @classmethod
    def from_surface(
        cls, name: str, surface: dict[str, str], task: TaskSpec, vocab: Vocabulary
    ) -> "Verbalizer":
        mapping = {}
        for label_name, text in surface.items():
            toks = tokenize(vocab, text)
            mapping[task.label_id(label_name)] = tuple(toks.ids)
        verbalizer = cls(name, mapping)
        verbalizer.validate(vocab)
        return verbalizer


@dataclass(frozen=True)
class PVP:
    """A pattern paired with a verbalizer."""

    pattern: Pattern
    verbalizer: Verbalizer
    name: str


def max_verbalization_len(pvp: PVP, x: Example, task: TaskSpec) -> int:
    """Largest token count any candidate output of `x` needs."""
    candidates = x.candidate_ids(task)
    if not candidates:
        raise VerbalizerError(f"example {x.id} has an empty candidate set")
    return max(len(pvp.verbalizer.tokens(y)) for y in candidates)


def apply_pattern(
    pvp: PVP,
    x: Example,
    k: int,
    max_seq_length: int,
    vocab: Vocabulary,
) -> TokenSequence:
    """Assemble the cloze question with the mask slot expanded to `k` masks.

    Field texts are tokenized and truncated longest-first (one token off the
    end of the currently longest field, ties broken by field order) until
    the assembled sequence fits `max_seq_length`.  Pattern literals are
    never truncated.
    """
    if k < 1:
        raise ValueError(f"mask count must be >= 1, got {k}")
    field_tokens: dict[str, list[int]] = {}
    fixed = k
    for seg in pvp.pattern.segments:
        if seg[0] == "literal":
            fixed += len(tokenize(vocab, seg[1]).ids)
        elif seg[0] == "field":
            name = seg[1]
            if name not in x.fields:
                raise PatternError(
                    f"pattern {pvp.pattern.name!r} references field {name!r} "
                    f"missing from example {x.id}"
                )
            if name not in field_tokens:
                field_tokens[name] = list(tokenize(vocab, x.fields[name]).ids)
    budget = max_seq_length - fixed
    if budget < 0:
        raise UnfittablePatternError(
            f"pattern {pvp.pattern.name!r} needs {fixed} tokens for literals and "
            f"masks alone, over the limit of {max_seq_length}"
        )
    order = [name for name in x.fields if name in field_tokens]
    while sum(len(t) for t in field_tokens.values()) > budget:
        longest = max(order, key=lambda name: len(field_tokens[name]))
        field_tokens[longest].pop()

    ids: list[int] = []
    for seg in pvp.pattern.segments:
        if seg[0] == "literal":
            ids.extend(tokenize(vocab, seg[1]).ids)
        elif seg[0] == "field":
            ids.extend(field_tokens[seg[1]])
        elif seg[0] == "mask":
            ids.extend([vocab.mask_id] * k)
    return sequence(vocab, ids)


def classifier_input(
    x: Example, task: TaskSpec, vocab: Vocabulary, max_seq_length: int
) -> TokenSequence:
    """Bare fields joined with segment boundaries; no pattern, no mask.

    The sequence classifier trained by distillation consumes this form.
    Fields are truncated longest-first under the same budget rule as
    `apply_pattern`.
    """
    names = [name for name in task.fields if name in x.fields] or list(x.fields)
    separator = tokenize(vocab, "|").ids
    field_tokens = {name: list(tokenize(vocab, x.fields[name]).ids) for name in names}
    fixed = len(separator) * (len(names) - 1)
    budget = max(max_seq_length - fixed, 0)
    while sum(len(t) for t in field_tokens.values()) > budget:
        longest = max(names, key=lambda name: len(field_tokens[name]))
        field_tokens[longest].pop()
    ids: list[int] = []
    for i, name in enumerate(names):
        if i:
            ids.extend(separator)
        ids.extend(field_tokens[name])
    return sequence(vocab, ids)


# ----------------------------------------------------------------------
# task bundle I/O
#
# A task bundle directory holds:
#   task.json          -- schema (see TaskSpec)
#   patterns/*.txt     -- one template per file, file stem = pattern name
#   verbalizers.json   -- {label: surface} or {name: {label: surface}}
#   vocab.txt          -- optional vocabulary file


@dataclass
class TaskBundle:
    task: TaskSpec
    patterns: list[Pattern]
    verbalizers_surface: dict[str, dict[str, str]]

    def pvps(self, vocab: Vocabulary) -> list[PVP]:
        """Cross product of patterns and verbalizers, tokenized against `vocab`."""
        out = []
        for pattern in self.patterns:
            for vname, surface in self.verbalizers_surface.items():
                verbalizer = Verbalizer.from_surface(vname, surface, self.task, vocab)
                name = pattern.name if len(self.verbalizers_surface) == 1 else f"{pattern.name}+{vname}"
                out.append(PVP(pattern, verbalizer, name))
        return out


def load_bundle(path: str | Path) -> TaskBundle:
    root = Path(path)
    task = TaskSpec.from_json(json.loads((root / "task.json").read_text(encoding="utf-8")))
    patterns = []
    for pattern_file in sorted((root / "patterns").glob("*.txt")):
        patterns.append(Pattern.parse(pattern_file.read_text(encoding="utf-8"), pattern_file.stem))
    if not patterns:
        raise PatternError(f"no patterns found under {root / 'patterns'}")
    raw = json.loads((root / "verbalizers.json").read_text(encoding="utf-8"))
    if raw and all(isinstance(v, dict) for v in raw.values()):
        surfaces = raw
    else:
        surfaces = {"default": raw}
    return TaskBundle(task, patterns, surfaces)


def save_bundle(path: str | Path, bundle: TaskBundle) -> None:
    root = Path(path)
    (root / "patterns").mkdir(parents=True, exist_ok=True)
    (root / "task.json").write_text(
        json.dumps(bundle.task.to_json(), indent=2) + "\n", encoding="utf-8"
    )
    for pattern in bundle.patterns:
        (root / "patterns" / f"{pattern.name}.txt").write_text(
            pattern.render() + "\n", encoding="utf-8"
        )
    surfaces = bundle.verbalizers_surface
    payload = surfaces["default"] if set(surfaces) == {"default"} else surfaces
    (root / "verbalizers.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
