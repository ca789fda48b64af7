"""Text branch: LSTM over word embeddings, pooled into a fixed-size vector.

Embeddings stay frozen; the recurrent weights, the projection and the
optional scoring head are what training updates.  Each gate keeps its own
input and recurrent matrices.  Hidden states are averaged over the real
(unpadded) tokens, then projected with relu and dropout to the text
representation consumed by the fusion stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .optim import Adam
from .prng import PrngState
from .tensor import (Tensor, bce_with_logits, concat, dropout, relu, sigmoid,
                     tanh, time_slice, xavier_uniform, zeros_param)
from .textproc import TRUNCATE_LEN, tokenize

_GATES = ("inp", "forget", "out", "cell")


@dataclass
class LanguageConfig:
    embed_dim: int = 100
    hidden_dim: int = 300
    repr_dim: int = 300
    dropout: float = 0.5
    max_len: int = TRUNCATE_LEN
    lr: float = 0.001
    epochs: int = 8
    batch_size: int = 32

    def validate(self):
        for name in ("embed_dim", "hidden_dim", "repr_dim", "max_len", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout must lie in [0,1), got {self.dropout}")
        return self


class LanguageNet:
    """LSTM encoder plus projection; `with_head` adds a scalar scoring head."""

    def __init__(self, cfg: LanguageConfig, prng: PrngState, dtype=np.float32,
                 with_head: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        e, h, r = cfg.embed_dim, cfg.hidden_dim, cfg.repr_dim
        self.gates = {}
        for g in _GATES:
            s = prng.split("lstm", g)
            self.gates[g] = (
                xavier_uniform((e, h), e, h, s.split("w"), dtype),
                xavier_uniform((h, h), h, h, s.split("r"), dtype),
                zeros_param((h,), dtype),
            )
        # a mildly open forget gate at the start helps gradients reach
        # early tokens; everything else starts at zero bias
        self.gates["forget"][2].data[:] = 1.0
        self.w_proj = xavier_uniform((h, r), h, r, prng.split("proj"), dtype)
        self.b_proj = zeros_param((r,), dtype)
        self.with_head = with_head
        if with_head:
            self.w_head = xavier_uniform((r, 1), r, 1, prng.split("head"), dtype)
            self.b_head = zeros_param((1,), dtype)

    def params(self) -> list[Tensor]:
        ps = []
        for g in _GATES:
            ps.extend(self.gates[g])
        ps.extend([self.w_proj, self.b_proj])
        if self.with_head:
            ps.extend([self.w_head, self.b_head])
        return ps

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for g in _GATES:
            w, r, b = self.gates[g]
            out[f"lstm.{g}.w"] = w
            out[f"lstm.{g}.r"] = r
            out[f"lstm.{g}.b"] = b
        out["proj.w"] = self.w_proj
        out["proj.b"] = self.b_proj
        if self.with_head:
            out["head.w"] = self.w_head
            out["head.b"] = self.b_head
        return out

    # -- forward ------------------------------------------------------------

    def lstm_states(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """x: (B, T, E), mask: (B, T) of 0/1.  Returns (B, T, H).

        Steps beyond a sequence's end carry the last real state forward, so
        pooling with the same mask ignores them entirely.
        """
        if x.data.ndim != 3:
            raise ContractError(f"lstm input must be (B, T, E), got {x.data.shape}")
        b, t, e = x.data.shape
        if mask.shape != (b, t):
            raise ContractError(f"mask shape {mask.shape} does not match input {(b, t)}")
        h_dim = self.cfg.hidden_dim
        h = Tensor(np.zeros((b, h_dim), dtype=self.dtype))
        c = Tensor(np.zeros((b, h_dim), dtype=self.dtype))
        states = []
        for step in range(t):
            x_t = time_slice(x, step)
            m_t = Tensor(mask[:, step:step + 1].astype(self.dtype))
            keep = Tensor((1.0 - mask[:, step:step + 1]).astype(self.dtype))
            wi, ri, bi = self.gates["inp"]
            wf, rf, bf = self.gates["forget"]
            wo, ro, bo = self.gates["out"]
            wc, rc, bc = self.gates["cell"]
            gi = sigmoid(x_t @ wi + h @ ri + bi)
            gf = sigmoid(x_t @ wf + h @ rf + bf)
            go = sigmoid(x_t @ wo + h @ ro + bo)
            gc = tanh(x_t @ wc + h @ rc + bc)
            c_new = gf * c + gi * gc
            h_new = go * tanh(c_new)
            c = m_t * c_new + keep * c
            h = m_t * h_new + keep * h
            states.append(h.reshape((b, 1, h_dim)))
        return concat(states, axis=1)

    def represent(self, x: Tensor, mask: np.ndarray, prng: PrngState | None = None) -> Tensor:
        """Masked mean-pool over time, then project.  Pass a prng to enable
        dropout (training); None runs the deterministic eval path."""
        states = self.lstm_states(x, mask)
        b, t, _ = x.data.shape
        m3 = Tensor(mask[:, :, None].astype(self.dtype))
        lengths = mask.sum(axis=1, keepdims=True)
        if (lengths == 0).any():
            raise ContractError("every sequence needs at least one real token")
        inv = Tensor((1.0 / lengths).astype(self.dtype))
        pooled = (states * m3).sum(axis=1) * inv
        rep = relu(pooled @ self.w_proj + self.b_proj)
        if prng is not None:
            rep = dropout(rep, self.cfg.dropout, True, prng)
        return rep

    def head_logits(self, rep: Tensor) -> Tensor:
        if not self.with_head:
            raise ContractError("this network was built without a scoring head")
        return rep @ self.w_head + self.b_head


# -- batching -----------------------------------------------------------------


def batch_embed(table, token_docs, max_len: int, dtype=np.float32):
    """Token lists -> (x: (B, T, E) array, mask: (B, T) array).

    T is the longest (truncated) document in the batch.  Unknown tokens
    embed as zero vectors, identical to the single-document path.
    """
    if not token_docs:
        raise ContractError("empty batch")
    docs = [toks[:max_len] for toks in token_docs]
    if any(len(d) == 0 for d in docs):
        raise ContractError("cannot embed a document with no tokens")
    b = len(docs)
    t = max(len(d) for d in docs)
    e = table.dim
    x = np.zeros((b, t, e), dtype=dtype)
    mask = np.zeros((b, t), dtype=dtype)
    for i, doc in enumerate(docs):
        for j, tok in enumerate(doc):
            row = table.index.get(tok)
            if row is not None:
                x[i, j, :] = table.vectors[row]
        mask[i, :len(doc)] = 1.0
    return x, mask


# -- training ------------------------------------------------------------------


def _snapshot(net):
    return {k: v.data.copy() for k, v in net.named_params().items()}


def _restore(net, snap):
    for k, v in net.named_params().items():
        v.data[:] = snap[k]


def score_records(net: LanguageNet, table, records, batch_size: int = 64) -> np.ndarray:
    """Eval-mode positive-class scores, one per record."""
    scores = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        docs = [tokenize(r.text, net.cfg.max_len) for r in chunk]
        x, mask = batch_embed(table, docs, net.cfg.max_len, dtype=net.dtype)
        rep = net.represent(Tensor(x), mask, prng=None)
        z = net.head_logits(rep).data[:, 0]
        scores.append(1.0 / (1.0 + np.exp(-z.astype(np.float64))))
    return np.concatenate(scores)


def train_language_unimodal(train_records, table, cfg: LanguageConfig,
                            prng: PrngState, val_records=None, log_fn=None,
                            stop_fn=None):
    """Train the text branch end to end with a sigmoid head.

    Returns (net, history).  With a validation set the returned weights are
    the ones from the epoch with the best validation weighted accuracy.
    `stop_fn(epoch, history)` returning true ends training early.
    """
    from .datagen import binarize_label
    from .metrics import confusion, weighted_accuracy

    cfg.validate()
    if not train_records:
        raise ContractError("no training records")
    net = LanguageNet(cfg, prng.split("init"))
    opt = Adam(net.params(), lr=cfg.lr)
    docs = [tokenize(r.text, cfg.max_len) for r in train_records]
    labels = np.array([binarize_label(r.label7) for r in train_records], dtype=np.float32)
    if val_records is not None:
        val_labels = np.array([binarize_label(r.label7) for r in val_records])

    history = {"train_loss": [], "val_weighted_accuracy": []}
    best = (None, -1.0)
    n = len(train_records)
    for epoch in range(cfg.epochs):
        order = prng.split("order", epoch).permutation(n)
        drop = prng.split("dropout", epoch)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x, mask = batch_embed(table, [docs[i] for i in idx], cfg.max_len)
            y = labels[idx][:, None]
            rep = net.represent(Tensor(x), mask, prng=drop)
            loss = bce_with_logits(net.head_logits(rep), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history["train_loss"].append(float(np.mean(losses)))
        if val_records is not None:
            s = score_records(net, table, val_records, cfg.batch_size)
            wa = weighted_accuracy(confusion(val_labels, (s >= 0.5).astype(int)))
            history["val_weighted_accuracy"].append(wa)
            if wa > best[1]:
                best = (_snapshot(net), wa)
        if log_fn:
            log_fn(epoch, history)
        if stop_fn and stop_fn(epoch, history):
            break
    if best[0] is not None:
        _restore(net, best[0])
    return net, history


__all__ = [
    "LanguageConfig", "LanguageNet", "batch_embed", "score_records",
    "train_language_unimodal",
]
