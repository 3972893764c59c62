"""Token vocabulary, skip-gram embeddings and fixed-length sequence encoding."""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = "<PAD>"
UNK = "<UNK>"
PAD_ID = 0
UNK_ID = 1


def _tokens(seq) -> Sequence[str]:
    return seq.tokens if hasattr(seq, "tokens") else seq


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]  # index == id

    @property
    def token_to_id(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, tokens: Iterable[str]) -> list[int]:
        lookup = self.token_to_id
        return [lookup.get(t, UNK_ID) for t in tokens]


def build_vocab(sequences: Iterable, min_count: int = 1) -> Vocabulary:
    """PAD=0, UNK=1, then tokens by descending count, ties lexicographic."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for seq in sequences:
        counts.update(_tokens(seq))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count and tok not in (PAD, UNK)),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary((PAD, UNK, *kept))


@dataclass
class EmbeddingTable:
    vocab: Vocabulary
    vectors: np.ndarray  # (len(vocab), dim)
    loss_history: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "tokens": list(self.vocab.tokens),
            "vectors": self.vectors.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EmbeddingTable":
        vectors = np.asarray(doc["vectors"], dtype=np.float64).reshape(len(doc["tokens"]), doc["dim"])
        if doc["tokens"][:2] != [PAD, UNK]:
            raise ValueError("embedding tokens must start with PAD, UNK")
        return cls(Vocabulary(tuple(doc["tokens"])), vectors)


def _skipgram_pairs(id_seqs: list[list[int]], window: int) -> np.ndarray:
    pairs = []
    for ids in id_seqs:
        n = len(ids)
        for i, center in enumerate(ids):
            for j in range(max(0, i - window), min(n, i + window + 1)):
                if j != i:
                    pairs.append((center, ids[j]))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def train_embeddings(
    sequences: Sequence,
    vocab: Vocabulary,
    dim: int = 300,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 30,
    seed: int = 0,
    lr: float = 0.025,
    batch_size: int = 64,
) -> EmbeddingTable:
    """Skip-gram with negative sampling, trained by mini-batch SGD.

    Tokens outside ``vocab`` train the UNK row. The learning rate decays
    linearly from ``lr`` to ``lr * 1e-4`` over all updates. Negatives are
    drawn from the unigram distribution raised to 0.75 (PAD excluded).
    The returned table carries the mean loss of each epoch in
    ``loss_history``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    V = len(vocab)
    w_in = (rng.random((V, dim)) - 0.5) / dim
    w_in[PAD_ID] = 0.0
    w_out = np.zeros((V, dim))

    id_seqs = [vocab.ids(_tokens(s)) for s in sequences]
    pairs = _skipgram_pairs(id_seqs, window)
    if len(pairs) == 0 or epochs == 0:
        if epochs > 0:
            warnings.warn("no skip-gram pairs in corpus; returning the seeded initial table", RuntimeWarning)
        return EmbeddingTable(vocab, w_in)

    freq = np.bincount(np.concatenate([np.asarray(s, dtype=np.int64) for s in id_seqs]), minlength=V).astype(np.float64)
    freq[PAD_ID] = 0.0
    noise = freq**0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    total = epochs * len(pairs)
    done = 0
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = pairs[order[start : start + batch_size]]
            centers, contexts = batch[:, 0], batch[:, 1]
            b = len(batch)
            neg = np.searchsorted(noise_cdf, rng.random((b, negatives)), side="right")
            neg = np.minimum(neg, V - 1)
            alpha = lr * max(1e-4, 1.0 - done / total)
            done += b

            # work on the distinct rows touched by this batch
            uc, ci = np.unique(centers, return_inverse=True)
            targets = np.concatenate([contexts[:, None], neg], axis=1)  # (b, 1+k)
            ut, ti = np.unique(targets, return_inverse=True)
            ti = ti.reshape(targets.shape)
            v = w_in[uc]
            u = w_out[ut]
            scores = (u @ v.T)[ti, ci[:, None]]
            sign = np.ones_like(scores)
            sign[:, 1:] = -1.0
            epoch_loss -= _log_sigmoid(sign * scores).sum()
            # d(-log sigmoid(s*x))/dx = -s * sigmoid(-s*x); tanh form cannot overflow
            coef = -sign * (0.5 * np.tanh(-0.5 * sign * scores) + 0.5)
            S = np.bincount(
                (ti * len(uc) + ci[:, None]).ravel(), weights=coef.ravel(), minlength=len(ut) * len(uc)
            ).reshape(len(ut), len(uc))
            w_in[uc] -= alpha * (S.T @ u)
            w_out[ut] -= alpha * (S @ v)
            w_in[PAD_ID] = 0.0
        history.append(epoch_loss / len(pairs))
        logger.debug("word2vec epoch loss %.6f", history[-1])
    return EmbeddingTable(vocab, w_in, loss_history=history)


@dataclass(frozen=True)
class EncodedSequence:
    matrix: np.ndarray  # (L, dim)
    true_length: int

    @property
    def seq_len(self) -> int:
        return self.matrix.shape[0]


def encode_sequence(tokens, table: EmbeddingTable, L: int = 100) -> EncodedSequence:
    """Look up each token's vector, truncating at ``L`` and zero-padding after."""
    if L < 1:
        raise ValueError("L must be >= 1")
    ids = table.vocab.ids(_tokens(tokens))[:L]
    matrix = np.zeros((L, table.dim))
    if ids:
        matrix[: len(ids)] = table.vectors[ids]
    return EncodedSequence(matrix, len(ids))
