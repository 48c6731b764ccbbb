"""
Caption decoder, word-level vocabulary and greedy decoding.

Captions are lowercased and split into word and punctuation tokens. Four
special ids come first in every vocabulary: ``<pad>``=0, ``<bos>``=1,
``<eos>``=2, ``<unk>``=3.
"""

import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import structlog

from autograd import functional as F
from autograd.nn import Dropout, Embedding, LayerNorm, Linear, Module, ModuleList
from autograd.tensor import ShapeError, Tensor, no_grad

from .attention import MultiHeadAttention, causal_mask
from .backbone import FeatureMap
from .errors import ConfigError, DataError

logger = structlog.get_logger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(4)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_ATTACHED = frozenset(".,!?;:")


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for token in tokens:
        if token in _ATTACHED or not out:
            out += token
        else:
            out += " " + token
    return out


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError(f"vocabulary must start with {', '.join(SPECIALS)}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary holds duplicate tokens")
        self.tokens = tokens
        self.index: Dict[str, int] = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and other.tokens == self.tokens

    @property
    def content_tokens(self) -> List[str]:
        return self.tokens[len(SPECIALS) :]

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, text: str) -> List[int]:
        return [self.id_of(token) for token in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Tokens up to the first ``<eos>``, with ``<pad>``/``<bos>`` dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self.tokens[i] if 0 <= i < len(self.tokens) else UNK)
        return out

    def save(self, path: Union[str, os.PathLike]) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls([line for line in lines if line])


def build_vocabulary(captions: Iterable[str], min_count: int = 1) -> Vocabulary:
    captions = list(captions)
    if not captions:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(token for caption in captions for token in tokenize(caption))
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if not kept:
        raise DataError(f"empty content vocabulary: no token occurs at least {min_count} times")
    logger.debug("vocabulary built", captions=len(captions), size=len(kept) + len(SPECIALS), min_count=min_count)
    return Vocabulary(list(SPECIALS) + kept)


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 128
    max_len: int = 64
    dropout: float = 0.1
    ff_width: int = 256

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"decoder needs at least one layer, got {self.layers}")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"decoder d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.max_len < 1:
            raise ConfigError(f"decoder max_len must be >= 1, got {self.max_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"decoder dropout must lie in [0, 1), got {self.dropout}")


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        d = cfg.d_model
        self.self_attention = MultiHeadAttention(d, cfg.heads, rng)
        self.self_norm = LayerNorm(d)
        self.cross_attention = MultiHeadAttention(d, cfg.heads, rng)
        self.cross_norm = LayerNorm(d)
        self.ff_in = Linear(d, cfg.ff_width, rng)
        self.ff_out = Linear(cfg.ff_width, d, rng)
        self.ff_norm = LayerNorm(d)
        self.self_dropout = Dropout(cfg.dropout)
        self.cross_dropout = Dropout(cfg.dropout)
        self.ff_dropout = Dropout(cfg.dropout)

    def forward(self, x: Tensor, memory: Tensor, mask: Tensor) -> Tensor:
        x = self.self_norm(F.add(x, self.self_dropout(self.self_attention(x, x, mask))))
        x = self.cross_norm(F.add(x, self.cross_dropout(self.cross_attention(x, memory))))
        return self.ff_norm(F.add(x, self.ff_dropout(self.ff_out(F.relu(self.ff_in(x))))))


class CaptionDecoder(Module):
    def __init__(self, cfg: DecoderConfig, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.token_embedding = Embedding(vocab_size, cfg.d_model, rng)
        self.position_embedding = Embedding(cfg.max_len, cfg.d_model, rng)
        self.layers = ModuleList(DecoderLayer(cfg, rng) for _ in range(cfg.layers))
        self.output = Linear(cfg.d_model, vocab_size, rng)

    def forward(self, tokens: np.ndarray, encoder_out: Union[FeatureMap, Tensor]) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"decoder expects token ids [B, T], got {tokens.shape}")
        length = tokens.shape[1]
        if length > self.cfg.max_len:
            raise ShapeError(f"sequence length {length} exceeds decoder max_len {self.cfg.max_len}")
        if tokens.size and tokens.max() >= self.vocab_size:
            raise ShapeError(f"token id {int(tokens.max())} out of range for vocabulary of {self.vocab_size}")
        memory = encoder_out.data if isinstance(encoder_out, FeatureMap) else encoder_out
        if memory.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"decoder width {self.cfg.d_model} does not match encoder width {memory.shape[-1]}")
        positions = np.broadcast_to(np.arange(length), tokens.shape)
        x = F.add(self.token_embedding(tokens), self.position_embedding(positions))
        mask = causal_mask(length)
        for layer in self.layers:
            x = layer(x, memory, mask)
        return self.output(x)


def decoder_forward(tokens: np.ndarray, encoder_out: FeatureMap, decoder: CaptionDecoder) -> Tensor:
    return decoder(tokens, encoder_out)


@dataclass
class TokenSequence:
    ids: List[int]
    tokens: List[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        return detokenize(self.tokens)


def greedy_decode(
    encoder_out: FeatureMap,
    decoder: CaptionDecoder,
    vocab: Vocabulary,
    max_len: Optional[int] = None,
) -> List[TokenSequence]:
    """
    Argmax decoding for every sample of the batch. The sequence budget counts
    ``<bos>``, so ``max_len=1`` yields empty captions.
    """
    max_len = min(max_len or decoder.cfg.max_len, decoder.cfg.max_len)
    batch = encoder_out.batch
    seqs = np.full((batch, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    with no_grad():
        while seqs.shape[1] < max_len and not finished.all():
            logits = decoder(seqs, encoder_out).data[:, -1, :]
            step = np.where(finished, PAD_ID, logits.argmax(axis=-1))
            finished |= step == EOS_ID
            seqs = np.concatenate([seqs, step[:, None]], axis=1)
    out = []
    for row in seqs[:, 1:]:
        ids = []
        for i in row:
            if i in (EOS_ID, PAD_ID):
                break
            ids.append(int(i))
        out.append(TokenSequence(ids, vocab.decode(ids)))
    return out
