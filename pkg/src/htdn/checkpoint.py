"""Model checkpoints: one binary file holding everything a scorer needs.

Layout: magic, format version, then named length-prefixed sections in a
fixed order (meta JSON, embedding table, then one tensor block per model
part).  Sections are framed, so a reader can skip what it does not know,
and the canonical ordering plus canonical JSON make save -> load -> save
reproduce the file byte for byte.  No timestamps anywhere.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ContractError, DataError
from .fusion import DecisionConfig, HtdnModel
from .ioutil import atomic_write_bytes
from .language_net import LanguageConfig
from .prng import PrngState
from .tensor import tensor_from_bytes, tensor_to_bytes
from .textproc import embeddings_from_text, embeddings_to_text
from .vision_net import BackboneProfile, ConvSpec, PROFILES, VisionNet

MAGIC = b"HTDN"
VERSION = 1
_SECTIONS = ("meta", "embedding", "lang", "vision", "decision")


# -- profile and config (de)serialization ------------------------------------------


def profile_to_dict(p: BackboneProfile) -> dict:
    return {
        "name": p.name,
        "input_size": p.input_size,
        "convs": [[c.channels, c.kernel, c.stride, c.padding, bool(c.pool)]
                  for c in p.convs],
        "fc_dims": list(p.fc_dims),
        "head_dims": list(p.head_dims),
        "slots": p.slots,
    }


def profile_from_dict(d: dict) -> BackboneProfile:
    try:
        profile = BackboneProfile(
            name=d["name"],
            input_size=int(d["input_size"]),
            convs=tuple(ConvSpec(int(c), int(k), int(s), int(pd), bool(pl))
                        for c, k, s, pd, pl in d["convs"]),
            fc_dims=tuple(int(v) for v in d["fc_dims"]),
            head_dims=tuple(int(v) for v in d["head_dims"]),
            slots=int(d["slots"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed profile record: {e}") from None
    known = PROFILES.get(profile.name)
    if known is not None and known != profile:
        raise DataError(f"profile {profile.name!r} does not match its built-in definition")
    return profile.validate()


def _lang_cfg_to_dict(c: LanguageConfig) -> dict:
    return {"embed_dim": c.embed_dim, "hidden_dim": c.hidden_dim,
            "repr_dim": c.repr_dim, "dropout": c.dropout, "max_len": c.max_len}


def _lang_cfg_from_dict(d: dict) -> LanguageConfig:
    return LanguageConfig(embed_dim=int(d["embed_dim"]), hidden_dim=int(d["hidden_dim"]),
                          repr_dim=int(d["repr_dim"]), dropout=float(d["dropout"]),
                          max_len=int(d["max_len"]))


def _dec_cfg_to_dict(c: DecisionConfig) -> dict:
    return {"channels": list(c.channels), "kernel": c.kernel,
            "fc_width": c.fc_width, "dropout": c.dropout}


def _dec_cfg_from_dict(d: dict) -> DecisionConfig:
    return DecisionConfig(channels=tuple(int(v) for v in d["channels"]),
                          kernel=int(d["kernel"]), fc_width=int(d["fc_width"]),
                          dropout=float(d["dropout"]))


# -- framing ------------------------------------------------------------------------


def _frame_section(name: str, payload: bytes) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def _pack_tensors(named: dict) -> bytes:
    parts = [struct.pack("<I", len(named))]
    for name in sorted(named):
        raw = name.encode("ascii")
        blob = tensor_to_bytes(named[name])
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<Q", len(blob)) + blob)
    return b"".join(parts)


def _unpack_tensors(payload: bytes, where: str) -> dict:
    out = {}
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        pos = 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + nlen].decode("ascii")
            pos += nlen
            (blen,) = struct.unpack_from("<Q", payload, pos)
            pos += 8
            out[name] = tensor_from_bytes(payload[pos:pos + blen]).data
            pos += blen
    except (struct.error, UnicodeDecodeError, ContractError) as e:
        raise DataError(f"corrupt tensor block in section {where!r}: {e}") from None
    if pos != len(payload):
        raise DataError(f"section {where!r} has {len(payload) - pos} trailing bytes")
    return out


# -- public API -----------------------------------------------------------------------


def backbone_fingerprint(net: VisionNet) -> str:
    """Stable digest of the backbone weights, for pretraining lineage."""
    h = hashlib.sha256()
    named = net.named_params()
    for name in sorted(named):
        if name.startswith("head"):
            continue
        h.update(name.encode("ascii"))
        h.update(tensor_to_bytes(named[name]))
    return h.hexdigest()


def save_checkpoint(path, model: HtdnModel, table, meta_extra: dict | None = None) -> None:
    meta = {
        "format": "htdn-checkpoint",
        "profile": profile_to_dict(model.profile),
        "language": _lang_cfg_to_dict(model.lang.cfg),
        "decision": _dec_cfg_to_dict(model.dec.cfg),
        "extra": meta_extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":"),
                            ensure_ascii=False).encode("utf-8")
    sections = {
        "meta": meta_bytes,
        "embedding": embeddings_to_text(table).encode("utf-8"),
        "lang": _pack_tensors(model.lang.named_params()),
        "vision": _pack_tensors(model.vis.named_params()),
        "decision": _pack_tensors(model.dec.named_params()),
    }
    blob = [MAGIC, struct.pack("<HI", VERSION, len(_SECTIONS))]
    for name in _SECTIONS:
        blob.append(_frame_section(name, sections[name]))
    atomic_write_bytes(path, b"".join(blob))


class CheckpointData:
    def __init__(self, meta, table, params):
        self.meta = meta
        self.table = table
        self.params = params  # {"lang": {...}, "vision": {...}, "decision": {...}}


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    try:
        version, n_sections = struct.unpack_from("<HI", buf, 4)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    sections = {}
    order = []
    for _ in range(n_sections):
        try:
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("ascii")
            pos += nlen
            (plen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            payload = buf[pos:pos + plen]
            if len(payload) != plen:
                raise DataError(f"{path}: section {name!r} truncated")
            pos += plen
        except (struct.error, UnicodeDecodeError):
            raise DataError(f"{path}: corrupt section table at byte {pos}") from None
        sections[name] = payload
        order.append(name)
    if pos != len(buf):
        raise DataError(f"{path}: {len(buf) - pos} trailing bytes")
    if tuple(order) != _SECTIONS:
        raise DataError(f"{path}: unexpected section order {order}")
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: malformed meta section: {e}") from None
    try:
        emb_text = sections["embedding"].decode("utf-8")
    except UnicodeDecodeError:
        raise DataError(f"{path}: embedding section is not valid UTF-8") from None
    table = embeddings_from_text(emb_text, where=str(path))
    params = {name: _unpack_tensors(sections[name], name)
              for name in ("lang", "vision", "decision")}
    return CheckpointData(meta, table, params)


def build_model(ckpt: CheckpointData) -> HtdnModel:
    """Reconstruct the model a checkpoint describes and load its weights."""
    try:
        profile = profile_from_dict(ckpt.meta["profile"])
        lang_cfg = _lang_cfg_from_dict(ckpt.meta["language"])
        dec_cfg = _dec_cfg_from_dict(ckpt.meta["decision"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"checkpoint meta is missing or malformed: {e}") from None
    model = HtdnModel(lang_cfg, profile, dec_cfg, PrngState(0))
    for part, net_params in (("lang", model.lang.named_params()),
                             ("vision", model.vis.named_params()),
                             ("decision", model.dec.named_params())):
        stored = ckpt.params[part]
        if set(stored) != set(net_params):
            missing = set(net_params) ^ set(stored)
            raise DataError(f"checkpoint section {part!r} parameter mismatch: {sorted(missing)}")
        for name, tensor in net_params.items():
            if stored[name].shape != tensor.data.shape:
                raise DataError(f"{part}.{name}: stored shape {stored[name].shape} "
                                f"!= model shape {tensor.data.shape}")
            tensor.data[:] = stored[name]
    return model


def save_backbone(path, net: VisionNet, meta_extra: dict | None = None) -> None:
    """Pretrained backbone on its own: meta plus a single tensor section."""
    meta = {
        "format": "htdn-backbone",
        "profile": profile_to_dict(net.profile),
        "fingerprint": backbone_fingerprint(net),
        "extra": meta_extra or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":"),
                            ensure_ascii=False).encode("utf-8")
    blob = [MAGIC, struct.pack("<HI", VERSION, 2),
            _frame_section("meta", meta_bytes),
            _frame_section("vision", _pack_tensors(net.named_params()))]
    atomic_write_bytes(path, b"".join(blob))


def load_backbone(path) -> VisionNet:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a model checkpoint")
    try:
        version, n_sections = struct.unpack_from("<HI", buf, 4)
        if version != VERSION or n_sections != 2:
            raise DataError(f"{path}: not a backbone file")
        pos = 10
        sections = {}
        for _ in range(2):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("ascii")
            pos += nlen
            (plen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            sections[name] = buf[pos:pos + plen]
            pos += plen
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, KeyError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt backbone file") from None
    if meta.get("format") != "htdn-backbone":
        raise DataError(f"{path}: expected a backbone file, got {meta.get('format')!r}")
    profile = profile_from_dict(meta["profile"])
    net = VisionNet(profile, PrngState(0))
    stored = _unpack_tensors(sections["vision"], "vision")
    for name, tensor in net.named_params().items():
        if name not in stored:
            raise DataError(f"{path}: backbone parameter {name!r} missing")
        if stored[name].shape != tensor.data.shape:
            raise DataError(f"{path}: {name}: stored shape {stored[name].shape} "
                            f"!= expected {tensor.data.shape}")
        tensor.data[:] = stored[name]
    if backbone_fingerprint(net) != meta.get("fingerprint"):
        raise DataError(f"{path}: backbone fingerprint mismatch")
    return net


__all__ = [
    "MAGIC", "VERSION", "profile_to_dict", "profile_from_dict",
    "backbone_fingerprint", "save_checkpoint", "load_checkpoint",
    "CheckpointData", "build_model", "save_backbone", "load_backbone",
]
