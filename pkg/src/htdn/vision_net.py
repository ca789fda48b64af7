"""Image branch: conv backbone, per-image representation head, slot packing.

Every ad contributes up to five image slots.  Missing slots hold zero
pixels and are masked out of the representation, so downstream stages see
exact zeros rather than whatever the backbone makes of a black frame.
Profiles describe the stack symbolically; `shape_chain` walks one without
allocating anything, which is how the full-scale geometry is checked
without paying for a full-scale forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .optim import Adam
from .ppm import read_ppm
from .prng import PrngState
from .tensor import (Tensor, bce_with_logits, conv2d, dropout, maxpool2d, relu,
                     xavier_uniform, zeros_param)

SLOTS = 5


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    pool: bool = False  # 2x2 max pool, stride 2, after the relu


@dataclass(frozen=True)
class BackboneProfile:
    name: str
    input_size: int
    convs: tuple          # ConvSpec per layer
    fc_dims: tuple        # widths of the backbone FCs (relu, no dropout)
    head_dims: tuple      # widths of the representation FCs (relu + dropout)
    slots: int = SLOTS

    def validate(self):
        if self.input_size < 8:
            raise ConfigError(f"input_size must be at least 8, got {self.input_size}")
        if not self.convs or not self.head_dims:
            raise ConfigError("profile needs at least one conv and one head layer")
        for c in self.convs:
            if c.channels <= 0 or c.kernel <= 0 or c.stride <= 0 or c.padding < 0:
                raise ConfigError(f"bad conv spec {c}")
        if any(d <= 0 for d in self.fc_dims) or any(d <= 0 for d in self.head_dims):
            raise ConfigError("fc widths must be positive")
        if self.slots <= 0:
            raise ConfigError(f"slots must be positive, got {self.slots}")
        if self.name == "full" and (len(self.convs) != 13 or len(self.fc_dims) != 2):
            raise ConfigError("the full profile is fixed at 13 convs and 2 backbone FCs")
        for step, shape in self.shape_chain():
            if len(shape) == 3 and (shape[1] <= 0 or shape[2] <= 0):
                raise ConfigError(f"feature map collapses at {step}: {shape}")
        return self

    @property
    def repr_dim(self):
        return self.head_dims[-1]

    def shape_chain(self):
        """Symbolic (stage, shape) walk of one image through the stack."""
        c, h, w = 3, self.input_size, self.input_size
        chain = [("input", (c, h, w))]
        for i, spec in enumerate(self.convs):
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.channels
            chain.append((f"conv{i + 1}", (c, h, w)))
            if spec.pool:
                h, w = h // 2, w // 2
                chain.append((f"pool{i + 1}", (c, h, w)))
        flat = c * h * w
        chain.append(("flatten", (flat,)))
        d = flat
        for i, d_next in enumerate(self.fc_dims):
            d = d_next
            chain.append((f"fc{i + 1}", (d,)))
        for i, d_next in enumerate(self.head_dims):
            d = d_next
            chain.append((f"head{i + 1}", (d,)))
        chain.append(("slots", (self.slots, d)))
        return chain


def _vgg_block(channels, n):
    return tuple(ConvSpec(channels, pool=(i == n - 1)) for i in range(n))


FULL_PROFILE = BackboneProfile(
    name="full",
    input_size=224,
    convs=(_vgg_block(64, 2) + _vgg_block(128, 2) + _vgg_block(256, 3)
           + _vgg_block(512, 3) + _vgg_block(512, 3)),
    fc_dims=(4096, 4096),
    head_dims=(200, 200, 200),
)

REDUCED_PROFILE = BackboneProfile(
    name="reduced",
    input_size=64,
    convs=(ConvSpec(8, pool=True), ConvSpec(16, pool=True),
           ConvSpec(32, pool=True), ConvSpec(32, pool=True)),
    fc_dims=(256, 256),
    head_dims=(200, 200, 200),
)

LIGHT_PROFILE = BackboneProfile(
    name="light",
    input_size=24,
    convs=(ConvSpec(6, pool=True), ConvSpec(12, pool=True)),
    fc_dims=(64,),
    head_dims=(48, 48, 48),
)

PROFILES = {p.name: p for p in (FULL_PROFILE, REDUCED_PROFILE, LIGHT_PROFILE)}


# -- image preparation ----------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """(H, W, C) float array -> (out, out, C), half-pixel centers."""
    h, w = img.shape[:2]
    if h == out_size and w == out_size:
        return img.copy()
    ys = (np.arange(out_size) + 0.5) * h / out_size - 0.5
    xs = (np.arange(out_size) + 0.5) * w / out_size - 0.5
    y0f, x0f = np.floor(ys), np.floor(xs)
    wy, wx = ys - y0f, xs - x0f
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(np.int64), 0, w - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, w - 1)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def load_image(path, size: int) -> np.ndarray:
    """One file -> (3, size, size) float32 in [0, 1]."""
    try:
        raw = read_ppm(path)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e.strerror}") from None
    img = raw.astype(np.float32) / 255.0
    img = bilinear_resize(img, size)
    return np.transpose(img, (2, 0, 1))


def prepare_images(records, size: int, slots: int = SLOTS):
    """Records -> (x: (B, slots, 3, size, size), slot_mask: (B, slots)).

    The first `slots` stored images fill the slots in order; the rest of
    an ad's images are ignored here (pretraining uses them all).
    """
    if not records:
        raise ContractError("empty batch")
    b = len(records)
    x = np.zeros((b, slots, 3, size, size), dtype=np.float32)
    mask = np.zeros((b, slots), dtype=np.float32)
    for i, r in enumerate(records):
        for k, path in enumerate(r.images[:slots]):
            x[i, k] = load_image(path, size)
            mask[i, k] = 1.0
    return x, mask


# -- network ---------------------------------------------------------------------


class VisionNet:
    def __init__(self, profile: BackboneProfile, prng: PrngState, dtype=np.float32,
                 head_dropout: float = 0.5):
        profile.validate()
        self.profile = profile
        self.dtype = np.dtype(dtype)
        if not 0.0 <= head_dropout < 1.0:
            raise ContractError(f"dropout must lie in [0,1), got {head_dropout}")
        self.head_dropout = head_dropout

        self.convs = []
        c_in = 3
        for i, spec in enumerate(profile.convs):
            fan_in = c_in * spec.kernel ** 2
            fan_out = spec.channels * spec.kernel ** 2
            k = xavier_uniform((spec.channels, c_in, spec.kernel, spec.kernel),
                               fan_in, fan_out, prng.split("conv", i), dtype)
            b = zeros_param((spec.channels, 1, 1), dtype)
            self.convs.append((k, b))
            c_in = spec.channels

        chain = dict(profile.shape_chain())
        d = chain["flatten"][0]
        self.fcs = []
        for i, d_next in enumerate(profile.fc_dims):
            w = xavier_uniform((d, d_next), d, d_next, prng.split("fc", i), dtype)
            self.fcs.append((w, zeros_param((d_next,), dtype)))
            d = d_next
        self.head = []
        for i, d_next in enumerate(profile.head_dims):
            w = xavier_uniform((d, d_next), d, d_next, prng.split("headfc", i), dtype)
            self.head.append((w, zeros_param((d_next,), dtype)))
            d = d_next

    # parameter access ------------------------------------------------------

    def backbone_params(self):
        ps = []
        for k, b in self.convs:
            ps.extend([k, b])
        for w, b in self.fcs:
            ps.extend([w, b])
        return ps

    def head_params(self):
        ps = []
        for w, b in self.head:
            ps.extend([w, b])
        return ps

    def params(self):
        return self.backbone_params() + self.head_params()

    def named_params(self):
        out = {}
        for i, (k, b) in enumerate(self.convs):
            out[f"conv{i}.k"], out[f"conv{i}.b"] = k, b
        for i, (w, b) in enumerate(self.fcs):
            out[f"fc{i}.w"], out[f"fc{i}.b"] = w, b
        for i, (w, b) in enumerate(self.head):
            out[f"head{i}.w"], out[f"head{i}.b"] = w, b
        return out

    # forward -----------------------------------------------------------------

    def backbone(self, x: Tensor) -> Tensor:
        """(N, 3, H, W) -> (N, fc_out) features."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"backbone expects (N, 3, H, W), got {x.shape}")
        t = x
        for spec, (k, b) in zip(self.profile.convs, self.convs):
            t = relu(conv2d(t, k, stride=spec.stride, padding=spec.padding) + b)
            if spec.pool:
                t = maxpool2d(t, window=2, stride=2)
        n = t.shape[0]
        t = t.reshape((n, -1))
        for w, b in self.fcs:
            t = relu(t @ w + b)
        return t

    def represent(self, feats: Tensor, prng: PrngState | None = None) -> Tensor:
        """Backbone features -> (N, repr_dim); prng enables dropout."""
        t = feats
        for w, b in self.head:
            t = relu(t @ w + b)
            if prng is not None:
                t = dropout(t, self.head_dropout, True, prng)
        return t


def vision_repr(net: VisionNet, images: np.ndarray, slot_mask: np.ndarray,
                prng: PrngState | None = None) -> Tensor:
    """(B, S, 3, H, W) + (B, S) mask -> (B, S, repr_dim) with empty slots zeroed."""
    b, s = images.shape[:2]
    if slot_mask.shape != (b, s):
        raise ContractError(f"slot mask {slot_mask.shape} does not match images {(b, s)}")
    flat = Tensor(np.ascontiguousarray(
        images.reshape(b * s, *images.shape[2:]).astype(net.dtype, copy=False)))
    feats = net.backbone(flat)
    rep = net.represent(feats, prng)
    rep = rep.reshape((b, s, net.profile.repr_dim))
    return rep * Tensor(slot_mask[:, :, None].astype(net.dtype))


def pooled_repr(rep: Tensor, slot_mask: np.ndarray) -> Tensor:
    """Mean over real slots; all-empty ads yield a zero vector."""
    counts = slot_mask.sum(axis=1, keepdims=True)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    return rep.sum(axis=1) * Tensor(inv.astype(rep.dtype))


# -- pretraining on single images ---------------------------------------------------


def pretraining_pairs(records):
    """Every stored image of every ad, tagged with the ad's binary label."""
    from .datagen import binarize_label
    paths, labels = [], []
    for r in records:
        y = binarize_label(r.label7)
        for p in r.images:
            paths.append(p)
            labels.append(y)
    return paths, np.array(labels, dtype=np.float32)


@dataclass
class VisionTrainConfig:
    lr: float = 0.001
    epochs: int = 4
    batch_size: int = 32

    def validate(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ContractError("lr, epochs and batch_size must be positive")
        return self


def pretrain_backbone(records, profile: BackboneProfile, cfg: VisionTrainConfig,
                      prng: PrngState, log_fn=None):
    """Single-image classification warm-up.

    A throwaway scalar head sits directly on the backbone features; after
    training it is dropped and only the backbone weights matter.  Returns
    (net, history).
    """
    cfg.validate()
    net = VisionNet(profile, prng.split("init"))
    paths, labels = pretraining_pairs(records)
    if len(paths) == 0:
        raise ContractError("no images to pretrain on")
    d = profile.fc_dims[-1] if profile.fc_dims else dict(profile.shape_chain())["flatten"][0]
    w_tmp = xavier_uniform((d, 1), d, 1, prng.split("tmp_head"))
    b_tmp = zeros_param((1,))
    opt = Adam(net.backbone_params() + [w_tmp, b_tmp], lr=cfg.lr)

    cache = np.stack([load_image(p, profile.input_size) for p in paths])
    n = len(paths)
    history = {"train_loss": []}
    for epoch in range(cfg.epochs):
        order = prng.split("order", epoch).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x = Tensor(np.ascontiguousarray(cache[idx]))
            feats = net.backbone(x)
            loss = bce_with_logits(feats @ w_tmp + b_tmp, labels[idx][:, None])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history["train_loss"].append(float(np.mean(losses)))
        if log_fn:
            log_fn(epoch, history)
    return net, history


# -- unimodal image classifier --------------------------------------------------------


def score_records_vision(net: VisionNet, w_head, b_head, records,
                         batch_size: int = 16) -> np.ndarray:
    scores = []
    size = net.profile.input_size
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        x, mask = prepare_images(chunk, size, net.profile.slots)
        rep = vision_repr(net, x, mask, prng=None)
        pooled = pooled_repr(rep, mask)
        z = (pooled @ w_head + b_head).data[:, 0]
        scores.append(1.0 / (1.0 + np.exp(-z.astype(np.float64))))
    return np.concatenate(scores)


def train_vision_unimodal(train_records, profile: BackboneProfile,
                          cfg: VisionTrainConfig, prng: PrngState,
                          val_records=None, init_net: VisionNet | None = None,
                          log_fn=None, stop_fn=None):
    """Slot-mean image classifier; `init_net` warm-starts from pretraining.

    Returns (net, (w_head, b_head), history); with a validation set the
    weights are restored from the best epoch.
    """
    from .datagen import binarize_label
    from .metrics import confusion, weighted_accuracy

    cfg.validate()
    if not train_records:
        raise ContractError("no training records")
    net = VisionNet(profile, prng.split("init"))
    if init_net is not None:
        if init_net.profile != profile:
            raise ContractError("pretrained backbone profile does not match")
        for mine, theirs in zip(net.params(), init_net.params()):
            mine.data[:] = theirs.data
    d = profile.repr_dim
    w_head = xavier_uniform((d, 1), d, 1, prng.split("head"))
    b_head = zeros_param((1,))
    opt = Adam(net.params() + [w_head, b_head], lr=cfg.lr)

    labels = np.array([binarize_label(r.label7) for r in train_records], dtype=np.float32)
    if val_records is not None:
        val_labels = np.array([binarize_label(r.label7) for r in val_records])
    size = profile.input_size
    cache = {}

    def batch_arrays(recs, keys):
        missing = [k for k in keys if k not in cache]
        for k in missing:
            x, m = prepare_images([recs[k]], size, profile.slots)
            cache[k] = (x[0], m[0])
        xs = np.stack([cache[k][0] for k in keys])
        ms = np.stack([cache[k][1] for k in keys])
        return xs, ms

    n = len(train_records)
    history = {"train_loss": [], "val_weighted_accuracy": []}
    best = (None, -1.0)
    for epoch in range(cfg.epochs):
        order = prng.split("order", epoch).permutation(n)
        drop = prng.split("dropout", epoch)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x, mask = batch_arrays(train_records, list(idx))
            rep = vision_repr(net, x, mask, prng=drop)
            pooled = pooled_repr(rep, mask)
            loss = bce_with_logits(pooled @ w_head + b_head, labels[idx][:, None])
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        history["train_loss"].append(float(np.mean(losses)))
        if val_records is not None:
            s = score_records_vision(net, w_head, b_head, val_records, cfg.batch_size)
            wa = weighted_accuracy(confusion(val_labels, (s >= 0.5).astype(int)))
            history["val_weighted_accuracy"].append(wa)
            if wa > best[1]:
                snap = ({k: v.data.copy() for k, v in net.named_params().items()},
                        w_head.data.copy(), b_head.data.copy())
                best = (snap, wa)
        if log_fn:
            log_fn(epoch, history)
        if stop_fn and stop_fn(epoch, history):
            break
    if best[0] is not None:
        snap, wh, bh = best[0]
        for k, v in net.named_params().items():
            v.data[:] = snap[k]
        w_head.data[:] = wh
        b_head.data[:] = bh
    return net, (w_head, b_head), history


__all__ = [
    "SLOTS", "ConvSpec", "BackboneProfile", "FULL_PROFILE", "REDUCED_PROFILE",
    "LIGHT_PROFILE", "PROFILES", "bilinear_resize", "load_image", "prepare_images",
    "VisionNet", "vision_repr", "pooled_repr", "pretraining_pairs",
    "VisionTrainConfig", "pretrain_backbone", "train_vision_unimodal",
    "score_records_vision",
]
