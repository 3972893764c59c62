"""Bidirectional LSTM with attention pooling and a softmax classifier.

Everything is plain numpy in float64 with hand-written backpropagation.
Batches are processed together; sequences shorter than the batch maximum
are handled with per-step masks so padded positions never reach the
recurrent state, the attention softmax or the pooled vector.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .embed import EmbeddingTable, EncodedSequence, encode_sequence
from .errors import ContractViolation

GATES = ("f", "i", "o", "C")


def sigmoid(x):
    # tanh form never overflows and saturates to exactly 0 or 1
    return 0.5 * np.tanh(0.5 * x) + 0.5


# --------------------------------------------------------------------------
# Parameter containers
# --------------------------------------------------------------------------


@dataclass
class LstmParams:
    """Gate weights act on the concatenation ``[h_prev, x]``."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_o: np.ndarray
    W_C: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_C: np.ndarray

    @property
    def hidden(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.concatenate([self.W_f, self.W_i, self.W_o, self.W_C], axis=0)
        b = np.concatenate([self.b_f, self.b_i, self.b_o, self.b_C])
        return W, b

    @classmethod
    def from_stacked(cls, W: np.ndarray, b: np.ndarray) -> "LstmParams":
        H = W.shape[0] // 4
        return cls(*(W[k * H : (k + 1) * H] for k in range(4)), *(b[k * H : (k + 1) * H] for k in range(4)))


@dataclass
class AttentionParams:
    W: np.ndarray  # (A, 2H)
    b: np.ndarray  # (A,)
    u: np.ndarray  # (A,) context vector the projected states are scored against


@dataclass
class ClassifierParams:
    W: np.ndarray  # (2, 2H)
    b: np.ndarray  # (2,)


@dataclass
class ModelParams:
    forward: LstmParams
    backward: LstmParams
    attention: AttentionParams
    classifier: ClassifierParams
    dropout_rate: float = 0.0
    hidden: int = 0
    embed_dim: int = 0
    seq_len: int = 0

    def __post_init__(self):
        H, vm = self.hidden, self.embed_dim
        for name, lstm in (("forward", self.forward), ("backward", self.backward)):
            for g in GATES:
                if getattr(lstm, f"W_{g}").shape != (H, H + vm) or getattr(lstm, f"b_{g}").shape != (H,):
                    raise ContractViolation(f"{name} gate {g} must be ({H}, {H + vm}) with bias ({H},)")
        A = self.attention.W.shape[0]
        if self.attention.W.shape != (A, 2 * H) or self.attention.b.shape != (A,) or self.attention.u.shape != (A,):
            raise ContractViolation(f"attention parameters must be ({A}, {2 * H}), ({A},), ({A},)")
        if self.classifier.W.shape != (2, 2 * H) or self.classifier.b.shape != (2,):
            raise ContractViolation(f"classifier parameters must be (2, {2 * H}) and (2,)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractViolation("dropout_rate must lie in [0, 1)")

    @property
    def attention_dim(self) -> int:
        return self.attention.W.shape[0]

    def arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """(name, array) for every trainable array, in a fixed order."""
        for group in ("forward", "backward", "attention", "classifier"):
            obj = getattr(self, group)
            for f in dataclasses.fields(obj):
                yield f"{group}.{f.name}", getattr(obj, f.name)

    def map(self, fn: Callable[[str, np.ndarray], np.ndarray]) -> "ModelParams":
        groups = {}
        for group in ("forward", "backward", "attention", "classifier"):
            obj = getattr(self, group)
            groups[group] = dataclasses.replace(
                obj, **{f.name: fn(f"{group}.{f.name}", getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            )
        return dataclasses.replace(self, **groups)

    def copy(self) -> "ModelParams":
        return self.map(lambda _, a: a.copy())

    def zeros_like(self) -> "ModelParams":
        return self.map(lambda _, a: np.zeros_like(a))

    def hyperparams(self) -> dict:
        return {
            "hidden": self.hidden,
            "embed_dim": self.embed_dim,
            "seq_len": self.seq_len,
            "attention_dim": self.attention_dim,
            "dropout_rate": self.dropout_rate,
        }

    def to_dict(self) -> dict:
        doc: dict = {}
        for name, arr in self.arrays():
            group, field = name.split(".")
            doc.setdefault(group, {})[field] = arr.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict, hidden: int, embed_dim: int, seq_len: int, dropout_rate: float = 0.0) -> "ModelParams":
        def arr(group, field):
            return np.asarray(doc[group][field], dtype=np.float64)

        lstm = {
            d: LstmParams(**{f.name: arr(d, f.name) for f in dataclasses.fields(LstmParams)})
            for d in ("forward", "backward")
        }
        return cls(
            forward=lstm["forward"],
            backward=lstm["backward"],
            attention=AttentionParams(arr("attention", "W"), arr("attention", "b"), arr("attention", "u")),
            classifier=ClassifierParams(arr("classifier", "W"), arr("classifier", "b")),
            dropout_rate=dropout_rate,
            hidden=hidden,
            embed_dim=embed_dim,
            seq_len=seq_len,
        )


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def init_params(
    embed_dim: int,
    hidden: int,
    seq_len: int,
    attention_dim: int | None = None,
    dropout_rate: float = 0.0,
    seed: int = 0,
) -> ModelParams:
    """Glorot-uniform weights per matrix, zero biases."""
    rng = np.random.default_rng(seed)
    H, vm = hidden, embed_dim
    A = attention_dim or hidden

    def lstm():
        Ws = [_glorot(rng, H, H + vm) for _ in GATES]
        return LstmParams(*Ws, *(np.zeros(H) for _ in GATES))

    fwd, bwd = lstm(), lstm()
    attention = AttentionParams(_glorot(rng, A, 2 * H), np.zeros(A), _glorot(rng, A, 1)[:, 0])
    classifier = ClassifierParams(_glorot(rng, 2, 2 * H), np.zeros(2))
    return ModelParams(fwd, bwd, attention, classifier, dropout_rate, H, vm, seq_len)


# --------------------------------------------------------------------------
# Single-step and single-sequence operations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LstmState:
    h: np.ndarray
    C: np.ndarray


def lstm_step(params: LstmParams, state: LstmState, x: np.ndarray) -> LstmState:
    H = params.hidden
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.input_dim,) or state.h.shape != (H,) or state.C.shape != (H,):
        raise ContractViolation(
            f"lstm_step expects x ({params.input_dim},) and state ({H},); got {x.shape}, {state.h.shape}, {state.C.shape}"
        )
    z = np.concatenate([state.h, x])
    f = sigmoid(params.W_f @ z + params.b_f)
    i = sigmoid(params.W_i @ z + params.b_i)
    o = sigmoid(params.W_o @ z + params.b_o)
    candidate = np.tanh(params.W_C @ z + params.b_C)
    C = f * state.C + i * candidate
    return LstmState(h=o * np.tanh(C), C=C)


def _check_input(params: ModelParams, matrix: np.ndarray) -> None:
    if matrix.ndim != 2 or matrix.shape[1] != params.embed_dim:
        raise ContractViolation(f"input rows must have {params.embed_dim} columns, got shape {matrix.shape}")


@dataclass
class PackedBatch:
    """Sequences stored as distinct input rows plus an index into them.

    Embedding rows repeat heavily (one vector per vocabulary entry), so the
    input projection is computed once per distinct row. Row 0 is all zeros
    and backs every padded position. ``index`` is only as wide as the
    longest sequence.
    """

    rows: np.ndarray  # (R, vm)
    index: np.ndarray  # (B, T) into rows
    lengths: np.ndarray  # (B,)

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.index.shape[1])[None, :] < self.lengths[:, None]

    def __len__(self) -> int:
        return len(self.lengths)

    def subset(self, which: Sequence[int]) -> "PackedBatch":
        which = np.asarray(which, dtype=np.int64)
        lengths = self.lengths[which]
        T = int(lengths.max())
        return PackedBatch(self.rows, self.index[which, :T], lengths)


def pack(seqs: Sequence[EncodedSequence], embed_dim: int) -> PackedBatch:
    """Deduplicate the real rows of ``seqs`` into a ``PackedBatch``."""
    if len(seqs) == 0:
        raise ValueError("nothing to pack")
    lengths = np.array([s.true_length for s in seqs], dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("every sequence needs at least one token")
    T = int(lengths.max())
    seen: dict[bytes, int] = {}
    rows = [np.zeros(embed_dim)]
    index = np.zeros((len(seqs), T), dtype=np.int64)
    for k, s in enumerate(seqs):
        m = np.asarray(s.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[1] != embed_dim:
            raise ContractViolation(f"input rows must have {embed_dim} columns, got shape {m.shape}")
        for t in range(s.true_length):
            key = m[t].tobytes()
            r = seen.get(key)
            if r is None:
                r = seen[key] = len(rows)
                rows.append(m[t])
            index[k, t] = r
    return PackedBatch(np.array(rows), index, lengths)


def _dropout_masks(params: ModelParams, R: int, B: int, T: int, seed: int | None):
    """Inverted-dropout masks: one (R, vm) mask over the distinct input rows,
    shared by every position that uses a row, and one (B, T, 2H) mask over
    the BLSTM outputs."""
    d = params.dropout_rate
    if seed is None or d == 0.0:
        return None, None
    rng = np.random.default_rng(seed)
    keep = 1.0 - d
    in_mask = (rng.random((R, params.embed_dim)) < keep) / keep
    out_mask = (rng.random((B, T, 2 * params.hidden)) < keep) / keep
    return in_mask, out_mask


def blstm_forward(
    params: ModelParams,
    input: EncodedSequence,
    training: bool = False,
    seed: int = 0,
    length: int | None = None,
) -> np.ndarray:
    """Per-position ``[h_fwd(t), h_bwd(t)]`` as an (L, 2H) array.

    Both chains start from a zero state. The backward chain starts at the
    last real token (``input.true_length`` unless ``length`` is given), so
    trailing padding never influences real positions; padded positions
    are zero.
    """
    matrix = np.asarray(input.matrix, dtype=np.float64)
    _check_input(params, matrix)
    L = matrix.shape[0]
    T = input.true_length if length is None else length
    batch = PackedBatch(
        rows=np.vstack([np.zeros((1, matrix.shape[1])), matrix[:T]]),
        index=np.arange(1, T + 1)[None, :],
        lengths=np.array([T]),
    )
    in_mask, out_mask = _dropout_masks(params, len(batch.rows), 1, T, seed if training else None)
    states, _ = _run_chains(params, batch, in_mask)
    if out_mask is not None:
        states = states * out_mask
    out = np.zeros((L, 2 * params.hidden))
    out[:T] = states[0]
    return out


def attention_pool(params: AttentionParams, states: np.ndarray, mask_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Softmax-weighted sum of the first ``mask_length`` states."""
    states = np.asarray(states, dtype=np.float64)
    if mask_length < 1 or mask_length > len(states):
        raise ValueError(f"mask_length must lie in [1, {len(states)}], got {mask_length}")
    if states.shape[1] != params.W.shape[1]:
        raise ContractViolation(f"states must have {params.W.shape[1]} columns, got {states.shape[1]}")
    h = states[:mask_length]
    mu = np.tanh(h @ params.W.T + params.b)
    scores = mu @ params.u
    scores = scores - scores.max()
    e = np.exp(scores)
    alphas = e / e.sum()
    return alphas @ h, alphas


def classify(params: ClassifierParams, h_star: np.ndarray) -> tuple[np.ndarray, int]:
    logits = params.W @ np.asarray(h_star, dtype=np.float64) + params.b
    logits = logits - logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return probs, int(probs[1] > probs[0])


# --------------------------------------------------------------------------
# Batched forward / backward
# --------------------------------------------------------------------------


def _run_chains(params: ModelParams, batch: PackedBatch, row_mask: np.ndarray | None):
    """Run the forward and backward chains over a batch.

    Both directions advance in one loop over a leading direction axis; the
    backward chain sees the batch time-reversed. Padded steps reset the
    state to zero, which for the backward chain is exactly a zero initial
    state at the last real token. ``row_mask`` (R, vm) multiplies the
    distinct input rows (input dropout). Returns the (B, T, 2H) outputs and
    a cache for ``_backprop_chains``.
    """
    B, T = batch.shape
    H = params.hidden
    idx = np.ascontiguousarray(batch.index.T)  # time-major (T, B)
    rows = batch.rows if row_mask is None else batch.rows * row_mask
    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so the sigmoid gates are pre-halved
    half = np.r_[np.full(3 * H, 0.5), np.ones(H)]
    P = np.empty((2, len(batch.rows), 4 * H))
    Wh = np.empty((2, 4 * H, H))
    bias = np.empty((2, 1, 1, 4 * H))
    for d, p in enumerate((params.forward, params.backward)):
        W, b = p.stacked()
        np.matmul(rows, W[:, H:].T * half, out=P[d])
        Wh[d] = W[:, :H] * half[:, None]
        bias[d] = b * half
    # direction-major inputs and masks; the backward chain is time-reversed
    index = np.stack([idx, idx[::-1]])  # (2, T, B)
    XW = P[np.arange(2)[:, None, None], index]  # (2, T, B, 4H)
    XW += bias
    valid = batch.valid.T
    mask = np.stack([valid, valid[::-1]])[..., None].astype(np.float64)  # (2, T, B, 1)
    WhT = Wh.transpose(0, 2, 1)
    gain = np.r_[np.full(3 * H, 0.5), np.ones(H)]
    offset = np.r_[np.full(3 * H, 0.5), np.zeros(H)]

    # caches are direction-major; step k reads state slot k and writes slot k + 1
    hs = np.zeros((2, T + 1, B, H))
    cs = np.zeros((2, T + 1, B, H))
    acts = np.empty((2, T, B, 4 * H))
    tanh_c = np.empty((2, T, B, H))
    for k in range(T):
        act = acts[:, k]
        np.matmul(hs[:, k], WhT, out=act)
        act += XW[:, k]
        np.tanh(act, out=act)
        act *= gain
        act += offset
        c = cs[:, k + 1]
        np.multiply(act[..., :H], cs[:, k], out=c)
        c += act[..., H : 2 * H] * act[..., 3 * H :]
        tc = tanh_c[:, k]
        np.tanh(c, out=tc)
        c *= mask[:, k]
        h = hs[:, k + 1]
        np.multiply(act[..., 2 * H : 3 * H], tc, out=h)
        h *= mask[:, k]
    out = np.concatenate([hs[0, 1:].transpose(1, 0, 2), hs[1, :0:-1].transpose(1, 0, 2)], axis=2)
    cache = dict(batch=batch, rows=rows, index=index, mask=mask, hs=hs, cs=cs, acts=acts, tanh_c=tanh_c)
    return out, cache


def _backprop_chains(params: ModelParams, cache: dict, d_out: np.ndarray) -> tuple[LstmParams, LstmParams]:
    H = params.hidden
    batch, rows, index, mask = cache["batch"], cache["rows"], cache["index"], cache["mask"]
    Wh = np.stack([params.forward.stacked()[0][:, :H], params.backward.stacked()[0][:, :H]])  # (2, 4H, H)
    acts, tanh_c, hs, cs = cache["acts"], cache["tanh_c"], cache["hs"], cache["cs"]
    B, T = batch.shape
    dO = np.stack([d_out[:, :, :H].transpose(1, 0, 2), d_out[:, ::-1, H:].transpose(1, 0, 2)])  # (2, T, B, H)
    # sigmoid' = s(1 - s) on the first three gates, tanh' = (1 - g)(1 + g) on the last
    lift = np.r_[np.zeros(3 * H), np.ones(H)]

    dA = np.empty_like(acts)
    dh_next = np.zeros((2, B, H))
    dc_next = np.zeros((2, B, H))
    for k in range(T - 1, -1, -1):
        act, tc, m, da = acts[:, k], tanh_c[:, k], mask[:, k], dA[:, k]
        dh = dO[:, k] + dh_next
        dh *= m
        dc = 1.0 - tc * tc
        dc *= act[..., 2 * H : 3 * H]
        dc *= dh
        dc += dc_next * m
        np.multiply(dc, cs[:, k], out=da[..., :H])
        np.multiply(dc, act[..., 3 * H :], out=da[..., H : 2 * H])
        np.multiply(dh, tc, out=da[..., 2 * H : 3 * H])
        np.multiply(dc, act[..., H : 2 * H], out=da[..., 3 * H :])
        da *= 1.0 - act
        da *= lift + act
        dh_next = da @ Wh
        dc_next = dc * act[..., :H]

    R = len(batch.rows)
    grads = []
    for d in (0, 1):
        flat = dA[d].reshape(T * B, 4 * H)
        dWh = flat.T @ hs[d, :-1].reshape(T * B, H)
        # input rows: sum the gradients of every position using the row
        rows_at = index[d].ravel()
        if R * T * B <= 1 << 23:
            spread = np.zeros((R, T * B))
            spread[rows_at, np.arange(T * B)] = 1.0
            per_row = spread @ flat
        else:
            per_row = np.zeros((R, 4 * H))
            np.add.at(per_row, rows_at, flat)
        dWx = per_row.T @ rows
        grads.append(LstmParams.from_stacked(np.concatenate([dWh, dWx], axis=1), flat.sum(axis=0)))
    return grads[0], grads[1]


def _forward(params: ModelParams, batch: PackedBatch, dropout_seed: int | None):
    B, T = batch.shape
    valid = batch.valid
    in_mask, out_mask = _dropout_masks(params, len(batch.rows), B, T, dropout_seed)
    Hc, chains = _run_chains(params, batch, in_mask)
    Hd = Hc * out_mask if out_mask is not None else Hc

    att = params.attention
    mu = np.tanh(Hd @ att.W.T + att.b)
    scores = np.where(valid, mu @ att.u, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    alpha = e / e.sum(axis=1, keepdims=True)
    h_star = np.matmul(alpha[:, None, :], Hd)[:, 0]
    logits = h_star @ params.classifier.W.T + params.classifier.b
    cache = dict(chains=chains, Hd=Hd, out_mask=out_mask, mu=mu, alpha=alpha, h_star=h_star)
    return logits, cache


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> ModelParams:
    H = params.hidden
    att, cls = params.attention, params.classifier
    Hd, mu, alpha, h_star = cache["Hd"], cache["mu"], cache["alpha"], cache["h_star"]

    d_cls = ClassifierParams(dlogits.T @ h_star, dlogits.sum(axis=0))
    dh_star = dlogits @ cls.W
    dalpha = np.matmul(Hd, dh_star[:, :, None])[:, :, 0]
    dHd = alpha[:, :, None] * dh_star[:, None, :]
    ds = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dpre = ds[:, :, None] * att.u * (1.0 - mu * mu)
    B, T, A = mu.shape
    d_att = AttentionParams(
        W=dpre.reshape(B * T, A).T @ Hd.reshape(B * T, -1),
        b=dpre.sum(axis=(0, 1)),
        u=ds.reshape(B * T) @ mu.reshape(B * T, A),
    )
    dHd += dpre @ att.W
    if cache["out_mask"] is not None:
        dHd = dHd * cache["out_mask"]
    d_fwd, d_bwd = _backprop_chains(params, cache["chains"], dHd)
    return dataclasses.replace(params, forward=d_fwd, backward=d_bwd, attention=d_att, classifier=d_cls)


def _as_encoded(item, table: EmbeddingTable | None, seq_len: int) -> EncodedSequence:
    if isinstance(item, EncodedSequence):
        return item
    if table is None:
        raise ValueError("token sequences need an embedding table to be encoded")
    return encode_sequence(item, table, seq_len)


def loss_and_gradients(
    params: ModelParams,
    table: EmbeddingTable | None,
    batch: Sequence[tuple],
    seed: int | None = 0,
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over ``batch`` and its exact gradient.

    ``batch`` holds ``(sequence, label)`` pairs; sequences may be already
    encoded or token sequences, in which case ``table`` encodes them.
    Dropout masks come from ``seed`` (pass ``None`` to disable dropout).
    The embedding table is frozen, so no gradient is returned for it.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    seqs = [_as_encoded(s, table, params.seq_len) for s, _ in batch]
    labels = np.array([int(y) for _, y in batch])
    return packed_loss_and_gradients(params, pack(seqs, params.embed_dim), labels, seed)


def packed_loss_and_gradients(
    params: ModelParams, batch: PackedBatch, labels: np.ndarray, seed: int | None = 0
) -> tuple[float, ModelParams]:
    """``loss_and_gradients`` on an already packed batch."""
    logits, cache = _forward(params, batch, seed)
    logp = _log_softmax(logits)
    B = len(batch)
    loss = float(-logp[np.arange(B), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    return loss, _backward(params, cache, dlogits)


def predict_proba(params: ModelParams, seqs: Sequence[EncodedSequence], batch_size: int = 256) -> np.ndarray:
    """Class probabilities (n, 2) without dropout."""
    out = np.zeros((len(seqs), 2))
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        logits, _ = _forward(params, pack(chunk, params.embed_dim), None)
        out[start : start + len(chunk)] = np.exp(_log_softmax(logits))
    return out
