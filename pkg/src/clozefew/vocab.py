"""Vocabulary, special tokens and deterministic subword tokenization.

Every backend and every pattern shares one `Vocabulary`.  Tokenization is
intentionally simple but real enough that multi-token verbalizations arise
naturally: words are segmented by greedy longest-prefix match against the
vocabulary, and word-internal continuation pieces carry a leading "·"
marker (so a vocabulary holding "terri" and "·ble" splits "terrible" into
those two pieces).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (MASK_TOKEN, PAD_TOKEN, UNK_TOKEN)

CONTINUATION = "·"

# surface text splits into lowercase word runs and single punctuation marks
_PIECE_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


class VocabularyError(ValueError):
    """Invalid vocabulary contents or file."""


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token inventory with dense ids and fixed special tokens."""

    tokens: tuple[str, ...]

    index: dict[str, int] = field(init=False, repr=False, compare=False)
    mask_id: int = field(init=False, compare=False)
    pad_id: int = field(init=False, compare=False)
    unk_id: int = field(init=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabularyError(f"duplicate token {tok!r}")
            index[tok] = i
        for special in SPECIAL_TOKENS:
            if special not in index:
                raise VocabularyError(f"missing special token {special!r}")
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "mask_id", index[MASK_TOKEN])
        object.__setattr__(self, "pad_id", index[PAD_TOKEN])
        object.__setattr__(self, "unk_id", index[UNK_TOKEN])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def encode_word(self, word: str) -> list[int]:
        """Greedy longest-prefix segmentation of one lowercase word.

        Pieces after the first are matched with the continuation marker
        prepended.  A run of characters with no matching piece collapses to
        a single UNK.
        """
        ids: list[int] = []
        pos = 0
        in_unk_run = False
        while pos < len(word):
            best = None
            for end in range(len(word), pos, -1):
                piece = word[pos:end]
                if pos > 0:
                    piece = CONTINUATION + piece
                if piece in self.index:
                    best = (self.index[piece], end)
                    break
            if best is None:
                if not in_unk_run:
                    ids.append(self.unk_id)
                    in_unk_run = True
                pos += 1
            else:
                ids.append(best[0])
                pos = best[1]
                in_unk_run = False
        return ids

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        tokens = tuple(line for line in lines if line)
        if tokens[:3] != SPECIAL_TOKENS:
            raise VocabularyError(
                f"vocabulary file must start with {SPECIAL_TOKENS}, got {tokens[:3]}"
            )
        return cls(tokens)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the ascending positions of the mask slots."""

    ids: tuple[int, ...]
    mask_positions: tuple[int, ...] = field(init=False, compare=False)
    _mask_id: int = field(repr=False, compare=False)

    def __post_init__(self):
        positions = tuple(i for i, t in enumerate(self.ids) if t == self._mask_id)
        object.__setattr__(self, "mask_positions", positions)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_masks(self) -> int:
        return len(self.mask_positions)

    def substitute(self, slot: int, token_id: int) -> "TokenSequence":
        """New sequence with the token at mask slot `slot` replaced."""
        pos = self.mask_positions[slot]
        ids = list(self.ids)
        ids[pos] = token_id
        return TokenSequence(tuple(ids), _mask_id=self._mask_id)


def sequence(vocab: Vocabulary, ids: list[int] | tuple[int, ...]) -> TokenSequence:
    return TokenSequence(tuple(ids), _mask_id=vocab.mask_id)


def build_vocab(
    corpus: list[str],
    max_size: int,
    specials: tuple[str, ...] = SPECIAL_TOKENS,
) -> Vocabulary:
    """Specials first, then corpus tokens by descending frequency.

    Frequency ties break lexicographically, so the result is deterministic
    for a fixed corpus.  An empty corpus yields just the specials.
    """
    if max_size < len(specials) + 1:
        raise VocabularyError(
            f"max_size {max_size} cannot hold {len(specials)} specials plus a token"
        )
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_PIECE_RE.findall(text.lower()))
    for special in specials:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    room = max_size - len(specials)
    tokens = tuple(specials) + tuple(tok for tok, _ in ranked[:room])
    return Vocabulary(tokens)


def tokenize(vocab: Vocabulary, text: str) -> TokenSequence:
    """Lowercase, split on whitespace/punctuation, segment words greedily.

    Pure and deterministic; never emits MASK or PAD for surface text.
    """
    ids: list[int] = []
    for word in _PIECE_RE.findall(text.lower()):
        ids.extend(vocab.encode_word(word))
    return sequence(vocab, ids)


def detokenize(vocab: Vocabulary, ids: list[int] | tuple[int, ...]) -> str:
    """Surface string: continuation pieces rejoin their word, rest space-joined."""
    words: list[str] = []
    for token_id in ids:
        token = vocab.token_of(token_id)
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION) :]
        else:
            words.append(token)
    return " ".join(words)
