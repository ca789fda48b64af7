"""Joint model: text vector x image slots -> decision stack -> score.

The two branch vectors meet as an outer product: every image slot's
representation row multiplies every coordinate of the text vector, giving
a (slots, d_v, d_l) tensor per ad.  Slots act as input channels of the
decision stack, whose layout is fixed: two 5x5 convolutions,
each followed by 2x2 pooling and dropout, with no activation between
them, then one hidden layer with relu before the scoring unit.

Word embeddings stay frozen throughout; everything else trains jointly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .language_net import LanguageConfig, LanguageNet, batch_embed
from .optim import Adam
from .prng import PrngState
from .tensor import (Tensor, bce_with_logits, conv2d, dropout, fuse_outer,
                     maxpool2d, relu, xavier_uniform, zeros_param)
from .textproc import tokenize
from .vision_net import BackboneProfile, VisionNet, prepare_images, vision_repr

fuse = fuse_outer


@dataclass
class DecisionConfig:
    channels: tuple = (8, 16)
    kernel: int = 5
    fc_width: int = 150
    dropout: float = 0.5

    def validate(self):
        if len(self.channels) != 2 or any(c <= 0 for c in self.channels):
            raise ConfigError(f"decision stack wants two conv widths, got {self.channels}")
        if self.kernel <= 0 or self.fc_width <= 0:
            raise ConfigError("kernel and fc_width must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0,1), got {self.dropout}")
        return self


def decision_shape_chain(slots: int, d_v: int, d_l: int, cfg: DecisionConfig):
    """Symbolic walk of the decision stack, mirroring the conv arithmetic."""
    k = cfg.kernel
    h, w = d_v, d_l
    chain = [("joint", (slots, h, w))]
    for i, c in enumerate(cfg.channels):
        h, w = h - k + 1, w - k + 1
        chain.append((f"conv{i + 1}", (c, h, w)))
        h, w = h // 2, w // 2
        chain.append((f"pool{i + 1}", (c, h, w)))
    chain.append(("flatten", (cfg.channels[-1] * h * w,)))
    chain.append(("hidden", (cfg.fc_width,)))
    chain.append(("score", (1,)))
    return chain


class DecisionNet:
    def __init__(self, slots: int, d_v: int, d_l: int, cfg: DecisionConfig,
                 prng: PrngState, dtype=np.float32):
        cfg.validate()
        for step, shape in decision_shape_chain(slots, d_v, d_l, cfg):
            if len(shape) == 3 and (shape[1] <= 0 or shape[2] <= 0):
                raise ConfigError(
                    f"joint tensor {slots}x{d_v}x{d_l} collapses at {step}: {shape}")
        self.cfg = cfg
        self.slots, self.d_v, self.d_l = slots, d_v, d_l
        self.dtype = np.dtype(dtype)
        k = cfg.kernel
        c1, c2 = cfg.channels
        self.k1 = xavier_uniform((c1, slots, k, k), slots * k * k, c1 * k * k,
                                 prng.split("conv1"), dtype)
        self.b1 = zeros_param((c1, 1, 1), dtype)
        self.k2 = xavier_uniform((c2, c1, k, k), c1 * k * k, c2 * k * k,
                                 prng.split("conv2"), dtype)
        self.b2 = zeros_param((c2, 1, 1), dtype)
        flat = dict(decision_shape_chain(slots, d_v, d_l, cfg))["flatten"][0]
        self.w_fc = xavier_uniform((flat, cfg.fc_width), flat, cfg.fc_width,
                                   prng.split("fc"), dtype)
        self.b_fc = zeros_param((cfg.fc_width,), dtype)
        self.w_out = xavier_uniform((cfg.fc_width, 1), cfg.fc_width, 1,
                                    prng.split("out"), dtype)
        self.b_out = zeros_param((1,), dtype)

    def params(self):
        return [self.k1, self.b1, self.k2, self.b2,
                self.w_fc, self.b_fc, self.w_out, self.b_out]

    def named_params(self):
        return {"conv1.k": self.k1, "conv1.b": self.b1,
                "conv2.k": self.k2, "conv2.b": self.b2,
                "fc.w": self.w_fc, "fc.b": self.b_fc,
                "out.w": self.w_out, "out.b": self.b_out}

    def forward(self, h_m: Tensor, prng: PrngState | None = None) -> Tensor:
        """(B, slots, d_v, d_l) -> logits (B, 1)."""
        if h_m.ndim != 4 or h_m.shape[1:] != (self.slots, self.d_v, self.d_l):
            raise ContractError(
                f"decision stack expects (B, {self.slots}, {self.d_v}, {self.d_l}), got {h_m.shape}")
        train = prng is not None
        p = self.cfg.dropout
        t = conv2d(h_m, self.k1) + self.b1
        t = maxpool2d(t, window=2, stride=2)
        t = dropout(t, p, train, prng)
        t = conv2d(t, self.k2) + self.b2
        t = maxpool2d(t, window=2, stride=2)
        t = dropout(t, p, train, prng)
        t = t.reshape((t.shape[0], -1))
        t = relu(t @ self.w_fc + self.b_fc)
        t = dropout(t, p, train, prng)
        return t @ self.w_out + self.b_out


class HtdnModel:
    """Both branches plus the decision stack, trained as one graph."""

    def __init__(self, lang_cfg: LanguageConfig, profile: BackboneProfile,
                 decision_cfg: DecisionConfig, prng: PrngState, dtype=np.float32):
        self.lang = LanguageNet(lang_cfg, prng.split("lang"), dtype, with_head=False)
        self.vis = VisionNet(profile, prng.split("vision"), dtype)
        self.dec = DecisionNet(profile.slots, profile.repr_dim, lang_cfg.repr_dim,
                               decision_cfg, prng.split("decision"), dtype)
        self.profile = profile

    def params(self):
        return self.lang.params() + self.vis.params() + self.dec.params()

    def named_params(self):
        out = {}
        for k, v in self.lang.named_params().items():
            out[f"lang.{k}"] = v
        for k, v in self.vis.named_params().items():
            out[f"vision.{k}"] = v
        for k, v in self.dec.named_params().items():
            out[f"decision.{k}"] = v
        return out

    def forward(self, x_text, text_mask, x_img, slot_mask,
                prng: PrngState | None = None) -> Tensor:
        # one shared dropout stream, drawn in a fixed branch order, so a
        # single stateful prng gives each batch fresh masks
        h_l = self.lang.represent(Tensor(x_text), text_mask, prng)
        h_v = vision_repr(self.vis, x_img, slot_mask, prng)
        h_m = fuse(h_l, h_v)
        return self.dec.forward(h_m, prng)


# -- batching and scoring -------------------------------------------------------


class _BatchSource:
    """Tokenizes text once and keeps prepared image slots around."""

    def __init__(self, records, table, max_len, image_size, slots):
        self.records = records
        self.table = table
        self.max_len = max_len
        self.image_size = image_size
        self.slots = slots
        self.docs = [tokenize(r.text, max_len) for r in records]
        self._img_cache = {}

    def batch(self, idx):
        x_text, text_mask = batch_embed(self.table, [self.docs[i] for i in idx],
                                        self.max_len)
        missing = [i for i in idx if i not in self._img_cache]
        for i in missing:
            x, m = prepare_images([self.records[i]], self.image_size, self.slots)
            self._img_cache[i] = (x[0], m[0])
        x_img = np.stack([self._img_cache[i][0] for i in idx])
        slot_mask = np.stack([self._img_cache[i][1] for i in idx])
        return x_text, text_mask, x_img, slot_mask


def predict_scores(model: HtdnModel, table, records, batch_size: int = 16) -> np.ndarray:
    """Eval-mode positive-class scores.  Every consumer of model scores
    (evaluation tables, prediction output) goes through this one path."""
    if not records:
        raise ContractError("no records to score")
    src = _BatchSource(records, table, model.lang.cfg.max_len,
                       model.profile.input_size, model.profile.slots)
    out = []
    for lo in range(0, len(records), batch_size):
        idx = list(range(lo, min(lo + batch_size, len(records))))
        x_text, text_mask, x_img, slot_mask = src.batch(idx)
        z = model.forward(x_text, text_mask, x_img, slot_mask).data[:, 0]
        out.append(1.0 / (1.0 + np.exp(-z.astype(np.float64))))
    return np.concatenate(out)


@dataclass
class HtdnTrainConfig:
    lr: float = 0.001
    epochs: int = 10
    batch_size: int = 16

    def validate(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ContractError("lr, epochs and batch_size must be positive")
        return self


def train_htdn(train_records, table, lang_cfg: LanguageConfig,
               profile: BackboneProfile, decision_cfg: DecisionConfig,
               cfg: HtdnTrainConfig, prng: PrngState, val_records=None,
               pretrained_backbone: VisionNet | None = None, log_fn=None,
               stop_fn=None):
    """Joint training.  Returns (model, history).

    `pretrained_backbone` copies warm backbone weights in before the first
    step.  With a validation set, the epoch with the best validation
    weighted accuracy supplies the returned weights.  `stop_fn(epoch,
    history)` returning true ends training early.
    """
    from .datagen import binarize_label
    from .metrics import confusion, weighted_accuracy

    cfg.validate()
    if not train_records:
        raise ContractError("no training records")
    model = HtdnModel(lang_cfg, profile, decision_cfg, prng.split("init"))
    if pretrained_backbone is not None:
        if pretrained_backbone.profile != profile:
            raise ContractError("pretrained backbone profile does not match")
        theirs = dict(pretrained_backbone.named_params())
        for name, mine in model.vis.named_params().items():
            mine.data[:] = theirs[name].data

    opt = Adam(model.params(), lr=cfg.lr)
    src = _BatchSource(train_records, table, lang_cfg.max_len,
                       profile.input_size, profile.slots)
    labels = np.array([binarize_label(r.label7) for r in train_records],
                      dtype=np.float32)
    if val_records is not None:
        val_labels = np.array([binarize_label(r.label7) for r in val_records])

    n = len(train_records)
    history = {"train_loss": [], "val_weighted_accuracy": []}
    best = (None, -1.0)
    for epoch in range(cfg.epochs):
        order = prng.split("order", epoch).permutation(n)
        drop = prng.split("dropout", epoch)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = list(order[lo:lo + cfg.batch_size])
            x_text, text_mask, x_img, slot_mask = src.batch(idx)
            z = model.forward(x_text, text_mask, x_img, slot_mask, prng=drop)
            loss = bce_with_logits(z, labels[idx][:, None])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history["train_loss"].append(float(np.mean(losses)))
        if val_records is not None:
            s = predict_scores(model, table, val_records, cfg.batch_size)
            wa = weighted_accuracy(confusion(val_labels, (s >= 0.5).astype(int)))
            history["val_weighted_accuracy"].append(wa)
            if wa > best[1]:
                best = ({k: v.data.copy() for k, v in model.named_params().items()}, wa)
        if log_fn:
            log_fn(epoch, history)
        if stop_fn and stop_fn(epoch, history):
            break
    if best[0] is not None:
        for k, v in model.named_params().items():
            v.data[:] = best[0][k]
    return model, history


__all__ = [
    "fuse", "DecisionConfig", "decision_shape_chain", "DecisionNet", "HtdnModel",
    "HtdnTrainConfig", "predict_scores", "train_htdn",
]
