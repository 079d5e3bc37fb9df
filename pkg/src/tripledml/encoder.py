"""Desk-scale text encoder.

A trainable token-embedding table followed by a residual feed-forward block
stands in for a pretrained transformer. The block is contextual without
attention: its hidden layer sees each token together with the mask-aware
mean of its sentence, so every token vector carries sentence information.

The encoder exposes both views the TripleEntropy objective needs: every
token's contextual vector (fed to SoftTriple) and the pooled sentence
vector with class probabilities (fed to cross-entropy).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, matmul, softmax, tensor
from .errors import ContractError, DataError, ShapeError

MAX_LEN = 512
PAD, UNK, CLS, SEP, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, EOS)
CHECKPOINT_VERSION = 1

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace with punctuation as separate tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ContractError(f"vocabulary must start with {SPECIAL_TOKENS}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ContractError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        words = sorted((w for w, n in counts.items() if n >= min_count and w not in SPECIAL_TOKENS),
                       key=lambda w: (-counts[w], w))
        return cls(SPECIAL_TOKENS + tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def tokenize(text: str, vocab: Vocabulary, text2: str | None = None, max_len: int = MAX_LEN) -> list[int]:
    """Map text (or a text pair) to ``[CLS] ... ([SEP] ...) [EOS]`` ids, truncated to ``max_len``."""
    ids = [vocab.id(w) for w in split_words(text)]
    if text2 is not None:
        ids = ids + [vocab.sep_id] + [vocab.id(w) for w in split_words(text2)]
    ids = ids[: max_len - 2]
    return [vocab.cls_id] + ids + [vocab.eos_id]


@dataclass
class Batch:
    """Padded token ids. ``pad_mask`` is True where a position holds padding."""

    token_ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def token_mask(self) -> np.ndarray:
        return ~self.pad_mask


def make_batch(sequences: Sequence[Sequence[int]], labels: Sequence[int], pad_id: int) -> Batch:
    if len(sequences) != len(labels):
        raise ShapeError(f"{len(sequences)} sequences but {len(labels)} labels")
    width = max((len(s) for s in sequences), default=0)
    if width > MAX_LEN:
        raise ContractError(f"sequence length {width} exceeds {MAX_LEN}")
    ids = np.full((len(sequences), max(width, 1)), pad_id, dtype=np.int64)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = seq
    pad_mask = np.ones_like(ids, dtype=bool)
    for i, seq in enumerate(sequences):
        pad_mask[i, : len(seq)] = False
    return Batch(ids, pad_mask, np.asarray(labels, dtype=np.int64))


class EncoderModel:
    """Embedding table, residual two-layer contextual MLP, and a linear classifier head."""

    PARAM_NAMES = ("embedding", "ff_w1", "ff_wc", "ff_b1", "ff_w2", "ff_b2", "head_w", "head_b")

    def __init__(self, params: dict[str, Tensor], pooling: str = "mean", max_len: int = MAX_LEN):
        if pooling not in ("mean", "first"):
            raise ContractError(f"unknown pooling {pooling!r}")
        missing = set(self.PARAM_NAMES) - set(params)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if not np.all(np.isfinite(p.data)):
                raise ContractError(f"parameter {name} has non-finite values")
        self.params = params
        self.pooling = pooling
        self.max_len = max_len

    @classmethod
    def init(cls, vocab_size: int, num_classes: int, dim: int = 64, rng: np.random.Generator | None = None,
             pooling: str = "mean") -> "EncoderModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = 1.0 / np.sqrt(dim)
        raw = {
            "embedding": rng.normal(0.0, 1.0, size=(vocab_size, dim)) * scale,
            "ff_w1": rng.normal(0.0, 1.0, size=(dim, dim)) * scale,
            "ff_wc": rng.normal(0.0, 1.0, size=(dim, dim)) * scale,
            "ff_b1": np.zeros(dim),
            "ff_w2": rng.normal(0.0, 1.0, size=(dim, dim)) * scale,
            "ff_b2": np.zeros(dim),
            "head_w": rng.normal(0.0, 1.0, size=(dim, num_classes)) * scale,
            "head_b": np.zeros(num_classes),
        }
        return cls({k: Tensor(v, requires_grad=True) for k, v in raw.items()}, pooling=pooling)

    @property
    def dim(self) -> int:
        return self.params["embedding"].shape[1]

    @property
    def vocab_size(self) -> int:
        return self.params["embedding"].shape[0]

    @property
    def num_classes(self) -> int:
        return self.params["head_w"].shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def copy(self) -> "EncoderModel":
        return EncoderModel({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
                            pooling=self.pooling, max_len=self.max_len)

    def transform(self, x: Tensor, context: Tensor) -> Tensor:
        """``x + W2 relu(W1 x + Wc context + b1) + b2`` row by row."""
        p = self.params
        hidden = (matmul(x, p["ff_w1"]) + matmul(context, p["ff_wc"]) + p["ff_b1"]).relu()
        return x + matmul(hidden, p["ff_w2"]) + p["ff_b2"]


def _pooling_matrix(pad_mask: np.ndarray, mode: str) -> np.ndarray:
    b, length = pad_mask.shape
    pool = np.zeros((b, b * length))
    keep = ~pad_mask
    for i in range(b):
        cols = np.flatnonzero(keep[i]) + i * length
        if cols.size == 0:
            continue
        if mode == "first":
            pool[i, cols[0]] = 1.0
        else:
            pool[i, cols] = 1.0 / cols.size
    return pool


def encode(batch: Batch, model: EncoderModel) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(token_embeddings [B, L, d], pooled [B, d], probs [B, C])``.

    Padding positions still get embeddings; masking happens in pooling and
    in :func:`token_views_for_dml`.
    """
    ids = batch.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= model.vocab_size):
        raise ContractError(f"token id out of range for vocabulary of size {model.vocab_size}")
    b, length = ids.shape
    if length > model.max_len:
        raise ContractError(f"sequence length {length} exceeds {model.max_len}")
    flat = model.params["embedding"].gather_rows(ids.reshape(-1))
    # sentence mean of the raw embeddings, copied back onto each of its positions
    sentence_mean = matmul(tensor(_pooling_matrix(batch.pad_mask, "mean")), flat)
    owner = np.zeros((b * length, b))
    owner[np.arange(b * length), np.repeat(np.arange(b), length)] = 1.0
    tokens = model.transform(flat, matmul(tensor(owner), sentence_mean))
    pooled = matmul(tensor(_pooling_matrix(batch.pad_mask, model.pooling)), tokens)
    logits = matmul(pooled, model.params["head_w"]) + model.params["head_b"]
    return tokens.reshape(b, length, model.dim), pooled, softmax(logits, axis=1)


def token_views_for_dml(token_embeddings: Tensor, pad_mask: np.ndarray, labels) -> tuple[Tensor, np.ndarray]:
    """Flatten to one row per non-pad token, each labelled with its sentence's class."""
    b, length, dim = token_embeddings.shape
    if pad_mask.shape != (b, length):
        raise ShapeError(f"pad mask {pad_mask.shape} does not match embeddings {token_embeddings.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(~pad_mask.reshape(-1))
    flat = token_embeddings.reshape(b * length, dim).gather_rows(keep)
    return flat, np.repeat(labels, length)[keep]


def predict(model: EncoderModel, batch: Batch) -> np.ndarray:
    _, _, probs = encode(batch, model)
    return np.argmax(probs.data, axis=1)


def save_checkpoint(path, model: EncoderModel, extra: dict[str, Tensor] | None = None, meta: dict | None = None) -> None:
    """Write an ``.npz`` with one shape-tagged array per parameter plus JSON metadata."""
    blocks = {f"param/{k}": v.data for k, v in model.params.items()}
    for k, v in (extra or {}).items():
        blocks[f"extra/{k}"] = v.data
    header = {"format_version": CHECKPOINT_VERSION, "pooling": model.pooling, "max_len": model.max_len,
              "meta": meta or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **blocks)


def load_checkpoint(path) -> tuple[EncoderModel, dict[str, Tensor], dict]:
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        params, extra = {}, {}
        for key in archive.files:
            if key.startswith("param/"):
                params[key[6:]] = Tensor(archive[key].astype(np.float64), requires_grad=True)
            elif key.startswith("extra/"):
                extra[key[6:]] = Tensor(archive[key].astype(np.float64), requires_grad=True)
    model = EncoderModel(params, pooling=header["pooling"], max_len=header["max_len"])
    return model, extra, header["meta"]
