"""Synthetic ad corpus with label-correlated text and image signal.

Nothing here is scraped or real: the vocabulary is procedurally generated
pseudo-language, images are procedural patterns, and the "suspicious"
keyword list is synthetic.  Signal strengths are dials: at 0 the planted
tokens and image patterns are independent of the label, at 1 they follow
it deterministically.

The fixed word lists (filler vocabulary, signal tokens, contexts) are
derived from a constant master seed so that corpora generated under
different run seeds still share one language; embeddings trained on one
corpus then transfer to another.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .ioutil import atomic_write_text
from .ppm import write_ppm
from .prng import PrngState
from .textproc import tokenize

log = logging.getLogger(__name__)

LABELS7 = (
    "certainly no", "likely no", "weakly no", "unsure",
    "weakly yes", "likely yes", "certainly yes",
)
POSITIVE_LEVELS = frozenset({"weakly yes", "likely yes", "certainly yes"})
NEGATIVE_LEVELS = tuple(l for l in LABELS7 if l not in POSITIVE_LEVELS)
_POSITIVE_ORDERED = tuple(l for l in LABELS7 if l in POSITIVE_LEVELS)

REGIONS = ("north", "south", "east", "west", "central")

# Character substitutions for obfuscated spellings.  'a' and 'h' are
# deliberately absent so e.g. the c/s substitutions leave them intact.
OBFUSCATION_TABLE = {
    "b": "ß", "c": "©", "d": "đ", "e": "€", "f": "ƒ",
    "g": "9", "i": "1", "k": "κ", "l": "£", "m": "₥",
    "n": "и", "o": "0", "p": "₽", "r": "®", "s": "$",
    "t": "†", "u": "µ", "v": "√", "w": "ω", "x": "×",
    "y": "¥", "z": "ž",
}

_EMOJI = ("\U0001f48b", "\U0001f525", "\U0001f339", "\U0001f60d", "\U0001f4de",
          "\U0001f4b5", "✨", "\U0001f381", "\U0001f451", "\U0001f4af")

KEYWORD_COUNT = 108


def binarize_label(label7: str, positive_levels=POSITIVE_LEVELS) -> int:
    """Seven-level annotation -> binary.  'unsure' is negative by default."""
    if label7 not in LABELS7:
        raise DataError(f"unknown annotation level {label7!r}")
    return 1 if label7 in positive_levels else 0


@dataclass
class AdRecord:
    id: str
    text: str
    images: list[str]      # file paths; relative refs resolve against the dataset file
    label7: str
    region: str = ""


@dataclass
class SyntheticConfig:
    ads: int = 1000
    positive_fraction: float = 3257 / 10249
    length_mean: float = 137.0
    length_sd: float = 74.0
    length_min: int = 7
    length_cap: int = 184
    images_mean: float = 5.9
    images_max: int = 12
    image_size: int = 64
    text_signal: float = 0.8
    image_signal: float = 0.5
    obfuscation_rate: float = 0.25
    emoji_rate: float = 0.05
    seed: int = 0

    def validate(self):
        if self.ads <= 0:
            raise ConfigError(f"ads must be positive, got {self.ads}")
        for name in ("positive_fraction", "text_signal", "image_signal",
                     "obfuscation_rate", "emoji_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0,1], got {v}")
        if not 1 <= self.length_min < self.length_cap:
            raise ConfigError(f"need 1 <= length_min < length_cap, got {self.length_min}, {self.length_cap}")
        if not self.length_min < self.length_mean < self.length_cap:
            raise ConfigError(f"length_mean must lie inside [{self.length_min}, {self.length_cap}]")
        if self.length_sd <= 0:
            raise ConfigError(f"length_sd must be positive, got {self.length_sd}")
        if not 1 <= self.images_max <= 64:
            raise ConfigError(f"images_max must lie in [1,64], got {self.images_max}")
        if not 0.2 < self.images_mean < self.images_max:
            raise ConfigError(f"images_mean must lie in (0.2, images_max), got {self.images_mean}")
        if self.image_size < 8 or self.image_size > 512:
            raise ConfigError(f"image_size must lie in [8,512], got {self.image_size}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must fit in u64, got {self.seed}")
        return self


# -- fixed synthetic language -------------------------------------------------

_CONSONANTS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"


def _make_word(stream: PrngState, min_syll: int, max_syll: int) -> str:
    n = int(stream.integers(min_syll, max_syll + 1))
    parts = []
    for _ in range(n):
        parts.append(_CONSONANTS[int(stream.integers(len(_CONSONANTS)))]
                     + _VOWELS[int(stream.integers(len(_VOWELS)))])
    if stream.random() < 0.3:
        parts.append(_CONSONANTS[int(stream.integers(len(_CONSONANTS)))])
    return "".join(parts)


def full_variant(token: str) -> str:
    """Deterministic full-rate obfuscation of a token."""
    return "".join(OBFUSCATION_TABLE.get(c, c) for c in token)


def obfuscate(token: str, prng: PrngState, rate: float = 1.0) -> str:
    """Substitute table characters, each with probability `rate`."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"obfuscation rate must lie in [0,1], got {rate}")
    if rate == 0.0 or not token:
        return token
    if rate == 1.0:
        return full_variant(token)
    out = []
    for c in token:
        sub = OBFUSCATION_TABLE.get(c)
        out.append(sub if sub is not None and prng.random() < rate else c)
    return "".join(out)


@dataclass
class _Language:
    filler: list[str]
    filler_cdf: np.ndarray
    pos_signal: list[str]
    neg_signal: list[str]
    variants: dict[str, str]
    contexts: dict[str, tuple[str, ...]]
    keywords: list[str]


@lru_cache(maxsize=1)
def _language() -> _Language:
    stream = PrngState(0x5EED_1A57)  # constant: defines the language, not the run
    seen: set[str] = set()

    def fresh(n, min_syll, max_syll, require_variant=False):
        out = []
        while len(out) < n:
            w = _make_word(stream, min_syll, max_syll)
            if w in seen:
                continue
            if require_variant and full_variant(w) == w:
                continue
            seen.add(w)
            out.append(w)
        return out

    filler = fresh(3500, 2, 4)
    pos_signal = fresh(54, 3, 3, require_variant=True)
    neg_signal = fresh(54, 3, 3, require_variant=True)
    ctx_pool = fresh(320, 2, 3)

    variants = {w: full_variant(w) for w in pos_signal + neg_signal}
    contexts = {}
    for w in pos_signal + neg_signal:
        idx = [int(stream.integers(len(ctx_pool))) for _ in range(4)]
        contexts[w] = tuple(ctx_pool[i] for i in idx)

    # Zipf-ish weights over the filler vocabulary
    ranks = np.arange(1, len(filler) + 1, dtype=np.float64)
    weights = 1.0 / ranks ** 1.05
    cdf = np.cumsum(weights / weights.sum())

    keywords = list(pos_signal) + [variants[w] for w in pos_signal]
    if len(keywords) != KEYWORD_COUNT or len(set(keywords)) != KEYWORD_COUNT:
        raise ContractError("keyword construction lost distinctness")
    return _Language(filler, cdf, pos_signal, neg_signal, variants, contexts, keywords)


def keyword_list() -> list[str]:
    """The 108 synthetic suspicious tokens (bases plus obfuscated variants)."""
    return list(_language().keywords)


# -- length and image-count calibration ----------------------------------------


def _phi(x):
    return math.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


def _cap_phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2)))


def _clipped_normal_mean(mu, sd, lo, hi):
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    return (lo * _cap_phi(a) + hi * (1.0 - _cap_phi(b))
            + mu * (_cap_phi(b) - _cap_phi(a)) + sd * (_phi(a) - _phi(b)))


def _calibrate_length_mu(cfg: SyntheticConfig) -> float:
    """Location parameter so the post-clip mean hits the configured target."""
    lo, hi = float(cfg.length_min), float(cfg.length_cap)
    lo_mu, hi_mu = lo - 6 * cfg.length_sd, hi + 8 * cfg.length_sd
    for _ in range(80):
        mid = 0.5 * (lo_mu + hi_mu)
        if _clipped_normal_mean(mid, cfg.length_sd, lo, hi) < cfg.length_mean:
            lo_mu = mid
        else:
            hi_mu = mid
    return 0.5 * (lo_mu + hi_mu)


def _image_count_pmf(mean: float, kmax: int, r: int = 5) -> np.ndarray:
    """Negative-binomial counts clamped to [0, kmax], calibrated to `mean`."""

    def clamped(p):
        q = 1.0 - p
        pmf = np.array([math.comb(k + r - 1, k) * p**r * q**k for k in range(kmax)])
        pmf = np.append(pmf, max(0.0, 1.0 - pmf.sum()))
        return pmf

    lo, hi = 1e-4, 1.0 - 1e-4  # mean is decreasing in p
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        m = float(clamped(mid) @ np.arange(kmax + 1))
        if m > mean:
            lo = mid
        else:
            hi = mid
    return clamped(0.5 * (lo + hi))


# -- generation -----------------------------------------------------------------


def _render_image(stream: PrngState, size: int, cls: int) -> np.ndarray:
    h = w = size
    base = 0.32 + 0.10 * stream.random() + (0.16 if cls else -0.04)
    rows = np.arange(h, dtype=np.float64)[:, None]
    freq = 7.0 if cls else 2.0
    phase = stream.random() * 2 * math.pi
    img = base + 0.11 * np.sin(2 * math.pi * freq * rows / h + phase)
    img = img + 0.05 * stream.normal(size=(h, w))
    rgb = np.stack([img] * 3, axis=-1)
    if cls:
        rgb[:, :, 0] += 0.04
    else:
        rgb[:, :, 2] += 0.04
    return (np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def _build_text(stream: PrngState, lang: _Language, cfg: SyntheticConfig, y: int,
                length: int) -> str:
    n_plant = max(1, length // 22)
    if 3 * n_plant > length:
        n_plant = max(1, length // 3)
    n_filler = length - 3 * n_plant

    if n_filler > 0:
        ids = np.searchsorted(lang.filler_cdf, stream.random(size=n_filler))
        words = [lang.filler[int(i)] for i in ids]
        deco = stream.random(size=n_filler)
        caps = stream.random(size=n_filler)
        for i in range(n_filler):
            if deco[i] < cfg.emoji_rate:
                words[i] = _EMOJI[int(stream.integers(len(_EMOJI)))] + words[i]
            elif caps[i] < 0.08:
                words[i] = words[i].capitalize()
    else:
        words = []

    for _ in range(n_plant):
        informative = stream.random() < cfg.text_signal
        cls = y if informative else int(stream.random() < 0.5)
        pool = lang.pos_signal if cls else lang.neg_signal
        base = pool[int(stream.integers(len(pool)))]
        tok = lang.variants[base] if stream.random() < cfg.obfuscation_rate else base
        ctxs = lang.contexts[base]
        c1 = ctxs[int(stream.integers(len(ctxs)))]
        c2 = ctxs[int(stream.integers(len(ctxs)))]
        pos = int(stream.integers(0, len(words) + 1))
        words[pos:pos] = [c1, tok, c2]
    return " ".join(words)


def generate_corpus(cfg: SyntheticConfig, out_dir=None) -> list[AdRecord]:
    """Generate ads; when out_dir is given, image files are written under
    <out_dir>/images and records carry paths pointing at them.  Without an
    out_dir the image references are names only (counts are still drawn),
    which is enough for corpus statistics but not for loading pixels.
    """
    cfg.validate()
    lang = _language()
    mu_len = _calibrate_length_mu(cfg)
    pmf = _image_count_pmf(cfg.images_mean, cfg.images_max)
    counts_support = np.arange(cfg.images_max + 1)
    root = PrngState(cfg.seed)

    img_dir = None
    if out_dir is not None:
        img_dir = os.path.join(os.fspath(out_dir), "images")
        os.makedirs(img_dir, exist_ok=True)

    records = []
    for i in range(cfg.ads):
        s = root.split("ad", i)
        y = int(s.random() < cfg.positive_fraction)
        levels = _POSITIVE_ORDERED if y else NEGATIVE_LEVELS
        label7 = levels[int(s.integers(len(levels)))]
        length = int(round(float(np.clip(s.normal(mu_len, cfg.length_sd),
                                         cfg.length_min, cfg.length_cap))))
        text = _build_text(s, lang, cfg, y, length)
        region = REGIONS[int(s.integers(len(REGIONS)))]

        n_img = int(s.choice(counts_support, p=pmf))
        ad_id = f"ad{i:06d}"
        refs = []
        for k in range(n_img):
            informative = s.random() < cfg.image_signal
            cls = y if informative else int(s.random() < 0.5)
            name = f"{ad_id}_{k}.ppm"
            if img_dir is not None:
                write_ppm(os.path.join(img_dir, name), _render_image(s, cfg.image_size, cls))
                refs.append(os.path.join(img_dir, name))
            else:
                refs.append(os.path.join("images", name))
        records.append(AdRecord(id=ad_id, text=text, images=refs, label7=label7, region=region))
    return records


# -- split ------------------------------------------------------------------------


def split_corpus(records: list[AdRecord], ratios=(0.7, 0.1, 0.2), seed: int = 0,
                 positive_levels=POSITIVE_LEVELS):
    """Stratified train/val/test split.  Ratios must sum to 1; any split with a
    positive ratio must receive at least one record of each present class."""
    if len(ratios) != 3:
        raise ContractError(f"need exactly three ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must be non-negative and sum to 1, got {ratios}")
    if not records:
        raise ContractError("cannot split an empty corpus")
    stream = PrngState(seed).split("split")
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(binarize_label(r.label7, positive_levels), []).append(i)

    parts: tuple[list[int], ...] = ([], [], [])
    for cls, idxs in sorted(by_class.items()):
        idxs = [idxs[j] for j in stream.permutation(len(idxs))]
        n = len(idxs)
        alloc = [int(math.floor(r * n)) for r in ratios]
        rema = sorted(range(3), key=lambda k: (ratios[k] * n) - alloc[k], reverse=True)
        k = 0
        while sum(alloc) < n:
            alloc[rema[k % 3]] += 1
            k += 1
        for part, r, a in zip(parts, ratios, alloc):
            if r > 0 and a == 0:
                raise ContractError(
                    f"split ratio {r} would receive zero records of class {cls}")
        start = 0
        for part, a in zip(parts, alloc):
            part.extend(idxs[start:start + a])
            start += a
    return tuple([records[i] for i in sorted(p)] for p in parts)


# -- statistics --------------------------------------------------------------------


def corpus_stats(records: list[AdRecord]) -> dict:
    if not records:
        raise ContractError("no records to summarize")
    lengths, uni, bi, tri, chars = [], set(), set(), set(), set()
    img_counts = []
    pos = 0
    for r in records:
        toks = tokenize(r.text)
        lengths.append(len(toks))
        uni.update(toks)
        bi.update(zip(toks, toks[1:]))
        tri.update(zip(toks, toks[1:], toks[2:]))
        chars.update(r.text)
        img_counts.append(len(r.images))
        pos += binarize_label(r.label7)
    lengths = np.array(lengths)
    imgs = np.array(img_counts)
    return {
        "ads": len(records),
        "positive": pos,
        "negative": len(records) - pos,
        "positive_fraction": pos / len(records),
        "length_mean": float(lengths.mean()),
        "length_sd": float(lengths.std()),
        "length_median": float(np.median(lengths)),
        "length_min": int(lengths.min()),
        "length_max": int(lengths.max()),
        "distinct_unigrams": len(uni),
        "distinct_bigrams": len(bi),
        "distinct_trigrams": len(tri),
        "distinct_characters": len(chars),
        "images_total": int(imgs.sum()),
        "images_mean": float(imgs.mean()),
        "images_median": float(np.median(imgs)),
        "images_min": int(imgs.min()),
        "images_max": int(imgs.max()),
    }


def stats_to_text(stats: dict, config_echo: str = "") -> str:
    lines = ["[corpus]"]
    for k in ("ads", "positive", "negative", "positive_fraction"):
        lines.append(f"{k} = {stats[k]}")
    lines.append("")
    lines.append("[text]")
    for k in ("length_mean", "length_sd", "length_median", "length_min", "length_max",
              "distinct_unigrams", "distinct_bigrams", "distinct_trigrams",
              "distinct_characters"):
        lines.append(f"{k} = {stats[k]}")
    lines.append("")
    lines.append("[images]")
    for k in ("images_total", "images_mean", "images_median", "images_min", "images_max"):
        lines.append(f"{k} = {stats[k]}")
    if config_echo:
        lines.append("")
        lines.append(config_echo.rstrip("\n"))
    return "\n".join(lines) + "\n"


# -- persistence --------------------------------------------------------------------


def save_corpus(records: list[AdRecord], path) -> None:
    """One JSON object per line; image paths are stored relative to the file."""
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    lines = []
    for r in records:
        refs = []
        for p in r.images:
            ap = os.path.abspath(p)
            try:
                refs.append(os.path.relpath(ap, base))
            except ValueError:
                refs.append(ap)
        lines.append(json.dumps(
            {"id": r.id, "text": r.text, "images": refs, "label7": r.label7,
             "region": r.region},
            ensure_ascii=False))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_dataset(path, check_images: bool = True) -> list[AdRecord]:
    """Parse a JSONL corpus; resolve image refs against the file's directory."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: record must be an object")
            for fname, ftype in (("id", str), ("text", str), ("images", list),
                                 ("label7", str)):
                if fname not in obj:
                    raise DataError(f"{path}:{lineno}: missing field {fname!r}")
                if not isinstance(obj[fname], ftype):
                    raise DataError(f"{path}:{lineno}: field {fname!r} must be {ftype.__name__}")
            if obj["label7"] not in LABELS7:
                raise DataError(f"{path}:{lineno}: unknown annotation level {obj['label7']!r}")
            imgs = []
            for ref in obj["images"]:
                if not isinstance(ref, str):
                    raise DataError(f"{path}:{lineno}: image refs must be strings")
                ap = ref if os.path.isabs(ref) else os.path.join(base, ref)
                if check_images and not os.path.isfile(ap):
                    raise DataError(f"{path}:{lineno}: image file not found: {ref}")
                imgs.append(ap)
            records.append(AdRecord(id=obj["id"], text=obj["text"], images=imgs,
                                    label7=obj["label7"], region=obj.get("region", "")))
    if not records:
        log.warning("%s: empty corpus", path)
    return records


def save_keywords(path, words=None) -> None:
    words = keyword_list() if words is None else list(words)
    atomic_write_text(path, "\n".join(words) + "\n")


def load_keywords(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        words = [w.strip() for w in f if w.strip()]
    if len(words) != KEYWORD_COUNT or len(set(words)) != KEYWORD_COUNT:
        raise DataError(f"{path}: expected {KEYWORD_COUNT} distinct keywords, got {len(words)}")
    return words


def config_echo_text(cfg: SyntheticConfig) -> str:
    lines = ["[generator]"]
    for f_ in ("ads", "positive_fraction", "length_mean", "length_sd", "length_min",
               "length_cap", "images_mean", "images_max", "image_size", "text_signal",
               "image_signal", "obfuscation_rate", "emoji_rate", "seed"):
        lines.append(f"{f_} = {getattr(cfg, f_)}")
    return "\n".join(lines) + "\n"


__all__ = [
    "LABELS7", "POSITIVE_LEVELS", "NEGATIVE_LEVELS", "REGIONS", "OBFUSCATION_TABLE",
    "KEYWORD_COUNT", "AdRecord", "SyntheticConfig", "binarize_label", "obfuscate",
    "full_variant", "keyword_list", "generate_corpus", "split_corpus", "corpus_stats",
    "stats_to_text", "save_corpus", "load_dataset", "save_keywords", "load_keywords",
    "config_echo_text",
]
