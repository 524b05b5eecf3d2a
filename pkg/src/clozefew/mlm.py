"""Masked-language-model backends.

Two implementations of one contract (per-mask-slot logits over the
vocabulary):

* `TabularBackend` -- an exact, stateless oracle.  Distributions are keyed
  on (full token-id sequence, mask slot index); unseen keys are filled from
  a seeded pseudo-random stream, so every lookup is replayable without any
  training.  Specific keys can be primed with hand-chosen distributions.
* `TinyTransformer` -- a small trainable bidirectional encoder (learned
  positions, pre-norm blocks, GELU, tied input/output embeddings) built on
  the package's reverse-mode autodiff.

Plus the sequence-classification head used after distillation, the AdamW
optimizer with global gradient-norm clipping, and a versioned binary
checkpoint format.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .autodiff import Tensor
from .vocab import TokenSequence, Vocabulary

CHECKPOINT_MAGIC = b"CFCK"
CHECKPOINT_VERSION = 1


class SequenceLengthError(ValueError):
    """Input longer than the backend's position table."""


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class MaskLogits:
    """One row of raw scores over the vocabulary per mask slot."""

    rows: np.ndarray  # (num_masks, vocab_size)

    def __post_init__(self):
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("mask logits must be finite")

    @property
    def num_slots(self) -> int:
        return self.rows.shape[0]

    def probs(self) -> np.ndarray:
        return softmax_rows(self.rows)


def forward_masked(model, z: TokenSequence) -> MaskLogits:
    """Logits for every mask slot of `z` in one pass."""
    if z.num_masks < 1:
        raise ValueError("sequence has no mask slots")
    max_positions = getattr(model, "max_positions", None)
    if max_positions is not None and len(z) > max_positions:
        raise SequenceLengthError(f"sequence length {len(z)} exceeds model limit {max_positions}")
    return model.mask_logits(z)


class TabularBackend:
    """Exact lookup-table MLM keyed on (token-id sequence, mask slot index).

    Unseen keys get a deterministic pseudo-random logit row derived from the
    backend seed, so scoring and decoding tests have a replayable ground
    truth that never needs training.
    """

    def __init__(self, vocab: Vocabulary, seed: int = 0, spread: float = 2.0):
        self.vocab = vocab
        self.seed = seed
        self.spread = spread
        self.max_positions = None
        self._table: dict[tuple[tuple[int, ...], int], np.ndarray] = {}

    def prime(self, z: TokenSequence, slot: int, probs: dict[int, float] | np.ndarray) -> None:
        """Fix the distribution of mask slot `slot` for this exact sequence.

        A dict gives exact probabilities for the named tokens; leftover mass
        spreads uniformly over the rest of the vocabulary.  The softmax of
        the stored logits reproduces the distribution.
        """
        if isinstance(probs, dict):
            row = np.zeros(len(self.vocab))
            for token_id, p in probs.items():
                row[token_id] = p
            total = row.sum()
            unspecified = len(self.vocab) - len(probs)
            if total < 1.0 and unspecified > 0:
                rest = (1.0 - total) / unspecified
                for token_id in range(len(self.vocab)):
                    if token_id not in probs:
                        row[token_id] = rest
        else:
            row = np.asarray(probs, dtype=np.float64)
        row = np.maximum(row, 1e-12)
        row = row / row.sum()
        self._table[(tuple(z.ids), slot)] = np.log(row)

    def _random_row(self, key: tuple[tuple[int, ...], int]) -> np.ndarray:
        ids, slot = key
        sub = rng.derive(self.seed, "tabular", slot, *[int(i) for i in ids])
        gen = np.random.default_rng(sub)
        return gen.standard_normal(len(self.vocab)) * self.spread

    def mask_logits(self, z: TokenSequence) -> MaskLogits:
        rows = []
        for slot in range(z.num_masks):
            key = (tuple(z.ids), slot)
            row = self._table.get(key)
            if row is None:
                row = self._random_row(key)
            rows.append(row)
        return MaskLogits(np.stack(rows))


class CountingBackend:
    """Wrapper that counts forward passes; used to check call contracts."""

    def __init__(self, inner):
        self.inner = inner
        self.vocab = inner.vocab
        self.max_positions = inner.max_positions
        self.calls = 0

    def mask_logits(self, z: TokenSequence) -> MaskLogits:
        self.calls += 1
        return self.inner.mask_logits(z)


@dataclass(frozen=True)
class TinyTransformerConfig:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "model_dim", "heads", "ff_dim", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


class TinyTransformer:
    """Small bidirectional encoder over token ids, trained as an MLM.

    Processes one sequence at a time (shape (S, D) activations); batching is
    a loop in the trainer.  Output logits share the input embedding matrix.
    """

    def __init__(self, config: TinyTransformerConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        self.max_positions = config.max_positions
        gen = rng.generator(config.seed, "init")
        d, f = config.model_dim, config.ff_dim
        scale = 0.02

        def param(shape, zero=False):
            data = np.zeros(shape) if zero else gen.normal(0.0, scale, size=shape)
            return Tensor(data, requires_grad=True)

        self.token_emb = param((len(vocab), d))
        self.pos_emb = param((config.max_positions, d))
        self.blocks = []
        for _ in range(config.layers):
            self.blocks.append(
                {
                    "ln1_g": Tensor(np.ones(d), requires_grad=True),
                    "ln1_b": param((d,), zero=True),
                    "wq": param((d, d)),
                    "bq": param((d,), zero=True),
                    "wk": param((d, d)),
                    "bk": param((d,), zero=True),
                    "wv": param((d, d)),
                    "bv": param((d,), zero=True),
                    "wo": param((d, d)),
                    "bo": param((d,), zero=True),
                    "ln2_g": Tensor(np.ones(d), requires_grad=True),
                    "ln2_b": param((d,), zero=True),
                    "w1": param((d, f)),
                    "b1": param((f,), zero=True),
                    "w2": param((f, d)),
                    "b2": param((d,), zero=True),
                }
            )
        self.ln_f_g = Tensor(np.ones(d), requires_grad=True)
        self.ln_f_b = param((d,), zero=True)
        self.out_bias = param((len(vocab),), zero=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in fixed declaration order (checkpoint order)."""
        out = [("token_emb", self.token_emb), ("pos_emb", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            for key in (
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
            ):
                out.append((f"block{i}.{key}", blk[key]))
        out += [("ln_f_g", self.ln_f_g), ("ln_f_b", self.ln_f_b), ("out_bias", self.out_bias)]
        return out

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def clone(self) -> "TinyTransformer":
        other = TinyTransformer(self.config, self.vocab)
        for (_, src), (_, dst) in zip(self.parameters(), other.parameters()):
            dst.data = src.data.copy()
        return other

    def hidden_graph(self, ids) -> Tensor:
        """Final hidden states (S, D) on the autodiff tape."""
        ids = list(ids)
        if len(ids) > self.config.max_positions:
            raise SequenceLengthError(
                f"sequence length {len(ids)} exceeds model limit {self.config.max_positions}"
            )
        h_cfg = self.config.heads
        d = self.config.model_dim
        dh = d // h_cfg
        s = len(ids)
        x = ad.take_rows(self.token_emb, ids) + ad.take_rows(self.pos_emb, list(range(s)))
        for blk in self.blocks:
            n = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = n @ blk["wq"] + blk["bq"]
            k = n @ blk["wk"] + blk["bk"]
            v = n @ blk["wv"] + blk["bv"]
            q = ad.transpose(ad.reshape(q, (s, h_cfg, dh)), (1, 0, 2))
            k = ad.transpose(ad.reshape(k, (s, h_cfg, dh)), (1, 0, 2))
            v = ad.transpose(ad.reshape(v, (s, h_cfg, dh)), (1, 0, 2))
            scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
            attn = ad.softmax(scores, axis=-1) @ v
            merged = ad.reshape(ad.transpose(attn, (1, 0, 2)), (s, d))
            x = x + (merged @ blk["wo"] + blk["bo"])
            n = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            x = x + (ad.gelu(n @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"])
        return ad.layer_norm(x, self.ln_f_g, self.ln_f_b)

    def logits_graph(self, ids) -> Tensor:
        """Token logits (S, V): hidden states against the tied embedding."""
        h = self.hidden_graph(ids)
        return h @ ad.transpose(self.token_emb, (1, 0)) + self.out_bias

    def mask_logits(self, z: TokenSequence) -> MaskLogits:
        with ad.no_grad():
            logits = self.logits_graph(z.ids).data
        return MaskLogits(logits[list(z.mask_positions)])


@dataclass
class ClassifierHead:
    """Linear head over the pooled first-position representation."""

    weight: Tensor  # (num_labels, model_dim)
    bias: Tensor  # (num_labels,)

    @classmethod
    def zeros(cls, num_labels: int, model_dim: int) -> "ClassifierHead":
        return cls(
            Tensor(np.zeros((num_labels, model_dim)), requires_grad=True),
            Tensor(np.zeros(num_labels), requires_grad=True),
        )

    @property
    def num_labels(self) -> int:
        return self.weight.shape[0]


class Classifier:
    """Backbone plus head, trained by distillation into a plain classifier."""

    def __init__(self, backbone: TinyTransformer, head: ClassifierHead):
        self.backbone = backbone
        self.head = head
        self.vocab = backbone.vocab
        self.max_positions = backbone.max_positions

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.backbone.parameters() + [
            ("head.weight", self.head.weight),
            ("head.bias", self.head.bias),
        ]

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def clone(self) -> "Classifier":
        other = Classifier(
            self.backbone.clone(),
            ClassifierHead.zeros(self.head.num_labels, self.backbone.config.model_dim),
        )
        other.head.weight.data = self.head.weight.data.copy()
        other.head.bias.data = self.head.bias.data.copy()
        return other

    def logits_graph(self, ids) -> Tensor:
        pooled = ad.take_rows(self.backbone.hidden_graph(ids), [0])  # (1, D)
        out = pooled @ ad.transpose(self.head.weight, (1, 0)) + self.head.bias
        return ad.reshape(out, (self.head.num_labels,))

    def label_logits(self, z: TokenSequence) -> np.ndarray:
        with ad.no_grad():
            return self.logits_graph(z.ids).data


def forward_classify(model: Classifier, z: TokenSequence) -> np.ndarray:
    """One logit per label from the pooled first-position representation."""
    return model.label_logits(z)


# ----------------------------------------------------------------------
# optimization


def global_grad_norm(params: list[tuple[str, Tensor]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad**2).sum())
    return float(np.sqrt(total))


def clip_global_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most `max_norm`.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Weight decay applies only to matrices (ndim >= 2); biases and norm
    gains are exempt, following common transformer practice.
    """

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float = 1e-5,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
    ):
        self.params = params
        self.lr = lr
        self.eps = eps
        self.weight_decay = weight_decay
        self.betas = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self) -> None:
        b1, b2 = self.betas
        self.t += 1
        for i, (_, p) in enumerate(self.params):
            grad = p.grad
            if grad is None:
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * grad**2
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= self.lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state_arrays(self) -> tuple[int, list[np.ndarray], list[np.ndarray]]:
        return self.t, self.m, self.v

    def load_state(self, t: int, m: list[np.ndarray], v: list[np.ndarray]) -> None:
        self.t = t
        self.m = [a.astype(np.float64) for a in m]
        self.v = [a.astype(np.float64) for a in v]


def collect_gradients(model, loss: Tensor) -> dict[str, np.ndarray]:
    """Run reverse accumulation from `loss`; returns gradients by name."""
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss {loss.data!r}; aborting")
    loss.backward()
    return {name: p.grad for name, p in model.parameters() if p.grad is not None}


# ----------------------------------------------------------------------
# checkpoint container
#
# Layout (all little-endian):
#   magic "CFCK" | u16 version | u32 json_len | json config block
#   per parameter, declaration order: u32 ndim, u32 dims..., f32 data
#   u8 optimizer flag; if 1: u64 step, then per parameter f32 m, f32 v


def _write_array(out: list[bytes], arr: np.ndarray) -> None:
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(arr.astype("<f4").tobytes())


def _read_array(buf: bytes, offset: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    offset += 4 * count
    return arr.astype(np.float64), offset


def save_checkpoint(path: str | Path, model, optimizer: AdamW | None = None) -> None:
    if isinstance(model, Classifier):
        config = {
            "kind": "classifier",
            "backbone": vars(model.backbone.config),
            "vocab_size": len(model.vocab),
            "num_labels": model.head.num_labels,
        }
    else:
        config = {
            "kind": "tiny_transformer",
            "backbone": vars(model.config),
            "vocab_size": len(model.vocab),
        }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out: list[bytes] = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    for _, p in model.parameters():
        _write_array(out, p.data)
    if optimizer is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", optimizer.t))
        t, m, v = optimizer.state_arrays()
        for arr in m:
            _write_array(out, arr)
        for arr in v:
            _write_array(out, arr)
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path: str | Path, vocab: Vocabulary):
    """Rebuild (model, optimizer_state | None) from a checkpoint file.

    The optimizer state is returned as (t, m, v) arrays; pass them to
    `AdamW.load_state` to resume training deterministically.
    """
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (json_len,) = struct.unpack_from("<I", buf, 6)
    offset = 10
    config = json.loads(buf[offset : offset + json_len].decode("utf-8"))
    offset += json_len
    if config["vocab_size"] != len(vocab):
        raise ValueError(
            f"{path}: checkpoint vocab size {config['vocab_size']} != supplied {len(vocab)}"
        )
    backbone = TinyTransformer(TinyTransformerConfig(**config["backbone"]), vocab)
    if config["kind"] == "classifier":
        model = Classifier(
            backbone, ClassifierHead.zeros(config["num_labels"], backbone.config.model_dim)
        )
    elif config["kind"] == "tiny_transformer":
        model = backbone
    else:
        raise ValueError(f"{path}: unknown checkpoint kind {config['kind']!r}")
    for _, p in model.parameters():
        arr, offset = _read_array(buf, offset)
        p.data = arr
    (flag,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    state = None
    if flag:
        (t,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        m, v = [], []
        for _ in model.parameters():
            arr, offset = _read_array(buf, offset)
            m.append(arr)
        for _ in model.parameters():
            arr, offset = _read_array(buf, offset)
            v.append(arr)
        state = (t, m, v)
    return model, state


def copy_model(model):
    """Deep copy helper honoring each model type's clone()."""
    if hasattr(model, "clone"):
        return model.clone()
    return copy.deepcopy(model)
