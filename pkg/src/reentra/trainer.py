"""Adam, the training loop, cross-validation and hyperparameter grid search."""

from __future__ import annotations

import csv
import io
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .corpus import stratified_kfold
from .embed import EmbeddingTable, EncodedSequence, build_vocab, encode_sequence, train_embeddings
from .errors import ContractViolation
from .metrics import EvalReport, Prediction, evaluate
from .preproc import SnippetRecord
from .seeds import rng_for, sub_seed
from .seqmodel import ModelParams, init_params, pack, packed_loss_and_gradients, predict_proba

logger = logging.getLogger(__name__)

DEFAULT_LR_GRID = (0.0001, 0.0005, 0.001, 0.002, 0.005)
DEFAULT_DROPOUT_GRID = (0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.002
    dropout: float = 0.2
    batch_size: int = 64
    embed_dim: int = 300
    seq_len: int = 100
    hidden: int = 64
    epochs: int = 50
    seed: int = 0
    attention_dim: int | None = None  # defaults to hidden
    # word2vec stage
    window: int = 5
    negatives: int = 5
    w2v_epochs: int = 30
    min_count: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("batch_size", "embed_dim", "seq_len", "hidden", "window", "min_count"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.w2v_epochs < 0 or self.negatives < 0:
            raise ValueError("epoch and negative-sample counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **constants) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays()},
            v={k: np.zeros_like(a) for k, a in params.arrays()},
            **constants,
        )


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    g = dict(grads.arrays())
    for name, p in params.arrays():
        if name not in g or g[name].shape != p.shape or state.m.get(name, p).shape != p.shape:
            raise ContractViolation(f"gradient/state shape mismatch for {name}")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    m = {k: b1 * state.m[k] + (1.0 - b1) * g[k] for k in state.m}
    v = {k: b2 * state.v[k] + (1.0 - b2) * g[k] * g[k] for k in state.v}
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def update(name, p):
        m_hat = m[name] / c1
        v_hat = v[name] / c2
        return p - lr * m_hat / (np.sqrt(v_hat) + eps)

    return params.map(update), replace(state, m=m, v=v, t=t)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class TrainRun:
    history: list[float]
    final_params: ModelParams
    fold_reports: list[EvalReport] | None = None


def train(
    dataset: Sequence[tuple[EncodedSequence, int]],
    hp: Hyperparams,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainRun:
    """Mini-batch Adam on mean cross-entropy, fully determined by ``hp.seed``.

    Each epoch reshuffles the data; the final short batch is kept.
    ``history`` holds the example-weighted mean training loss per epoch.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    for seq, _ in dataset:
        if seq.matrix.shape[1] != hp.embed_dim:
            raise ContractViolation(f"encoded width {seq.matrix.shape[1]} != embed_dim {hp.embed_dim}")
    params = init_params(
        hp.embed_dim, hp.hidden, hp.seq_len, hp.attention_dim, hp.dropout, seed=sub_seed(hp.seed, "init")
    )
    state = AdamState.zeros_like(params)
    shuffle = rng_for(hp.seed, "shuffle")
    packed = pack([seq for seq, _ in dataset], hp.embed_dim)
    labels = np.array([int(y) for _, y in dataset])
    n = len(dataset)
    history = []
    for epoch in range(hp.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, hp.batch_size)):
            which = order[start : start + hp.batch_size]
            loss, grads = packed_loss_and_gradients(
                params, packed.subset(which), labels[which], seed=sub_seed(hp.seed, "dropout", epoch, b)
            )
            params, state = adam_step(params, grads, state, hp.lr)
            total += loss * len(which)
        history.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return TrainRun(history=history, final_params=params)


@dataclass
class Detector:
    """A trained embedding table plus classifier."""

    table: EmbeddingTable
    params: ModelParams
    hp: Hyperparams
    history: list[float] = field(default_factory=list)

    def encode(self, tokens) -> EncodedSequence:
        return encode_sequence(tokens, self.table, self.hp.seq_len)

    def scores(self, token_seqs: Sequence) -> np.ndarray:
        """Probability of the reentrant class for each token sequence."""
        if len(token_seqs) == 0:
            return np.zeros(0)
        return predict_proba(self.params, [self.encode(t) for t in token_seqs])[:, 1]

    def predictions(self, records: Sequence[SnippetRecord]) -> list[Prediction]:
        probs = predict_proba(self.params, [self.encode(r.tokens) for r in records]) if records else np.zeros((0, 2))
        return [
            Prediction(r.id, float(p[1]), r.label, int(p[1] > p[0]))
            for r, p in zip(records, probs)
        ]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "hyperparams": self.hp.to_dict(),
            "embedding": self.table.to_dict(),
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Detector":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        hp = Hyperparams(**doc["hyperparams"])
        table = EmbeddingTable.from_dict(doc["embedding"])
        params = ModelParams.from_dict(doc["params"], hp.hidden, hp.embed_dim, hp.seq_len, hp.dropout)
        return cls(table, params, hp)


def fit(
    records: Sequence[SnippetRecord],
    hp: Hyperparams,
    fold: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Detector:
    """Vocabulary, embeddings and classifier from ``records`` alone."""
    tokens = [r.tokens for r in records]
    vocab = build_vocab(tokens, hp.min_count)
    table = train_embeddings(
        tokens,
        vocab,
        dim=hp.embed_dim,
        window=hp.window,
        negatives=hp.negatives,
        epochs=hp.w2v_epochs,
        seed=sub_seed(hp.seed, "embed", "all" if fold is None else fold),
    )
    dataset = [(encode_sequence(r.tokens, table, hp.seq_len), r.label) for r in records]
    run = train(dataset, hp, on_epoch=on_epoch)
    return Detector(table, run.final_params, hp, run.history)


@dataclass(frozen=True)
class _ContractGroup:
    id: str
    label: int


def contract_groups(records: Sequence[SnippetRecord]) -> list[_ContractGroup]:
    """One entry per contract; a contract is positive if any snippet is."""
    labels: dict[str, int] = {}
    for r in records:
        labels[r.contract_id] = max(labels.get(r.contract_id, 0), r.label)
    return [_ContractGroup(cid, y) for cid, y in labels.items()]


def cross_validate(
    records: Sequence[SnippetRecord],
    hp: Hyperparams,
    k: int = 10,
    observer: Callable[[int, list[str], list[str]], None] | None = None,
) -> list[EvalReport]:
    """k-fold cross-validation with folds drawn per contract.

    All snippets of one contract land in the same fold. For each fold the
    vocabulary, embeddings and classifier are rebuilt from the training
    folds only. ``observer(fold, train_ids, test_ids)`` sees the snippet
    ids on each side before training starts.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    split = stratified_kfold(contract_groups(records), k, sub_seed(hp.seed, "folds"))
    by_fold: dict[int, list[SnippetRecord]] = defaultdict(list)
    for r in records:
        by_fold[split.assignments[r.contract_id]].append(r)

    reports = []
    for fold in range(k):
        test = by_fold[fold]
        train_recs = [r for f in range(k) if f != fold for r in by_fold[f]]
        if observer is not None:
            observer(fold, [r.id for r in train_recs], [r.id for r in test])
        detector = fit(train_recs, hp, fold=fold)
        report = evaluate(detector.predictions(test))
        logger.info("fold %d/%d: f1=%.4f fpr=%.4f", fold + 1, k, report.f1, report.fpr)
        reports.append(report)
    return reports


def mean_metrics(reports: Sequence[EvalReport]) -> dict:
    keys = ("acc", "tpr", "fpr", "pre", "f1")
    out = {key: float(np.mean([getattr(r, key) for r in reports])) for key in keys}
    aucs = [r.auc for r in reports if r.auc is not None]
    out["auc"] = float(np.mean(aucs)) if aucs else None
    return out


@dataclass(frozen=True)
class GridPoint:
    lr: float
    dropout: float
    mean_f1: float
    mean_fpr: float


def grid_search(
    records: Sequence[SnippetRecord],
    base_hp: Hyperparams,
    lr_grid: Sequence[float] = DEFAULT_LR_GRID,
    dropout_grid: Sequence[float] = DEFAULT_DROPOUT_GRID,
    k: int = 10,
) -> tuple[Hyperparams, list[GridPoint]]:
    """Cross-validate every (lr, dropout) pair.

    Best point: highest mean F1, then lowest mean FPR, then lowest lr.
    """
    if not lr_grid or not dropout_grid:
        raise ValueError("grids must be non-empty")
    table = []
    for lr in lr_grid:
        for dropout in dropout_grid:
            hp = replace(base_hp, lr=lr, dropout=dropout)
            m = mean_metrics(cross_validate(records, hp, k))
            table.append(GridPoint(lr, dropout, m["f1"], m["fpr"]))
            logger.info("grid lr=%g dropout=%g: f1=%.4f fpr=%.4f", lr, dropout, m["f1"], m["fpr"])
    best = min(table, key=lambda g: (-g.mean_f1, g.mean_fpr, g.lr))
    return replace(base_hp, lr=best.lr, dropout=best.dropout), table


def grid_csv(table: Sequence[GridPoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["lr", "dropout", "mean_f1", "mean_fpr"])
    for g in table:
        writer.writerow([repr(g.lr), repr(g.dropout), repr(g.mean_f1), repr(g.mean_fpr)])
    return buf.getvalue()
