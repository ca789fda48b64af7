"""Text preprocessing and word embeddings.

Tokenization is deliberately minimal: split on Unicode whitespace,
lowercase cased letters, keep emoji and symbol characters as-is, cap the
sequence at 184 tokens.  Embeddings come from a skip-gram model with
negative sampling trained right here; lookups for unknown tokens embed
to the zero vector.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataError
from .prng import PrngState
from .tensor import Tensor, _stable_sigmoid

TRUNCATE_LEN = 184
EMB_HEADER = "htdn-emb v1"


def tokenize(text, max_len: int = TRUNCATE_LEN) -> list[str]:
    """Whitespace-split, lowercase, truncate.  Accepts str or UTF-8 bytes."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"invalid UTF-8 at byte offset {e.start}: {e.reason}") from e
    if not isinstance(text, str):
        raise ContractError(f"tokenize expects str or bytes, got {type(text).__name__}")
    return text.lower().split()[:max_len]


class Vocabulary:
    """Dense token->index map ordered by descending frequency, ties lexicographic."""

    def __init__(self, counts: dict[str, int], min_count: int = 1, max_size: int | None = None):
        items = [(tok, c) for tok, c in counts.items() if c >= min_count]
        items.sort(key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            items = items[:max_size]
        self.tokens = [tok for tok, _ in items]
        self.counts = [c for _, c in items]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.min_count = min_count

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def get(self, tok, default=None):
        return self.index.get(tok, default)


def build_vocab(corpus, min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Count tokens over an iterable of token sequences."""
    counts: dict[str, int] = {}
    for seq in corpus:
        for tok in seq:
            counts[tok] = counts.get(tok, 0) + 1
    return Vocabulary(counts, min_count=min_count, max_size=max_size)


class EmbeddingTable:
    def __init__(self, tokens: list[str], vectors: np.ndarray):
        if len(tokens) != vectors.shape[0]:
            raise ContractError(f"{len(tokens)} tokens vs {vectors.shape[0]} vectors")
        self.tokens = list(tokens)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.dim = int(vectors.shape[1])
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, tok):
        return tok in self.index

    def lookup(self, tok) -> np.ndarray | None:
        i = self.index.get(tok)
        return None if i is None else self.vectors[i]


def embed_sequence(tokens: list[str], table: EmbeddingTable) -> Tensor:
    """Stack per-token vectors into a (t, dim) tensor; unknown tokens -> zeros."""
    if not tokens:
        raise ContractError("embed_sequence needs at least one token")
    out = np.zeros((len(tokens), table.dim), dtype=np.float32)
    for r, tok in enumerate(tokens):
        i = table.index.get(tok)
        if i is not None:
            out[r] = table.vectors[i]
    return Tensor(out)


def embedding_coverage(table: EmbeddingTable, corpus) -> float:
    """Fraction of the corpus's distinct unigrams present in the table."""
    seen: set[str] = set()
    for seq in corpus:
        seen.update(seq)
    if not seen:
        raise ContractError("coverage is undefined on an empty corpus")
    hit = sum(1 for tok in seen if tok in table.index)
    return hit / len(seen)


# -- skip-gram with negative sampling ------------------------------------------


def train_skipgram(corpus, dim: int = 100, window: int = 5, negatives: int = 5,
                   epochs: int = 5, prng: PrngState | None = None,
                   min_count: int = 2, subsample: float = 1e-3,
                   lr: float = 0.025) -> EmbeddingTable:
    """Skip-gram embeddings via SGD with negative sampling.

    Dynamic window (uniform 1..window), frequency subsampling, unigram^0.75
    negative table, linearly decaying learning rate.  Updates are applied
    in fixed minibatch order from a single seeded stream, so the same seed
    and corpus give an identical table.
    """
    if prng is None:
        prng = PrngState(0)
    docs = [list(seq) for seq in corpus]
    vocab = build_vocab(docs, min_count=min_count)
    if len(vocab) == 0:
        raise ContractError("skip-gram needs a non-empty vocabulary")
    v = len(vocab)
    counts = np.asarray(vocab.counts, dtype=np.float64)
    total = counts.sum()

    # keep probability per token id under frequency subsampling
    freq = counts / total
    if subsample > 0:
        keep_p = np.minimum(1.0, np.sqrt(subsample / freq))
    else:
        keep_p = np.ones_like(freq)

    # cumulative negative-sampling distribution, unigram^0.75
    neg_w = counts ** 0.75
    neg_cdf = np.cumsum(neg_w / neg_w.sum())

    ids_docs = [np.array([vocab.index[t] for t in seq if t in vocab.index], dtype=np.int64)
                for seq in docs]
    ids_docs = [d for d in ids_docs if d.size > 0]
    if not ids_docs:
        raise ContractError("no in-vocabulary tokens to train on")

    w_in = (prng.random(size=(v, dim)) - 0.5).astype(np.float32) / dim
    w_out = np.zeros((v, dim), dtype=np.float32)

    total_pairs_seen = 0
    # rough budget for the lr schedule: pairs per epoch is stable in expectation
    est_pairs = max(1, int(sum(d.size for d in ids_docs) * (window + 1) / 2 * 0.8)) * epochs

    batch = 2048
    for _ in range(epochs):
        centers_all, ctx_all = [], []
        for d in ids_docs:
            n = d.size
            if n < 2:
                continue
            keep = prng.random(size=n) < keep_p[d]
            kept = d[keep]
            m = kept.size
            if m < 2:
                continue
            b = prng.integers(1, window + 1, size=m)
            for off in range(1, window + 1):
                sel = b >= off
                right = sel[:-off] if off <= m - 1 else np.zeros(0, dtype=bool)
                if right.size:
                    idx = np.nonzero(right)[0]
                    centers_all.append(kept[idx])
                    ctx_all.append(kept[idx + off])
                    centers_all.append(kept[idx + off])
                    ctx_all.append(kept[idx])
        if not centers_all:
            continue
        centers = np.concatenate(centers_all)
        contexts = np.concatenate(ctx_all)
        order = prng.permutation(centers.size)
        centers, contexts = centers[order], contexts[order]

        for s in range(0, centers.size, batch):
            c = centers[s:s + batch]
            pos = contexts[s:s + batch]
            nb = c.size
            draws = prng.random(size=(nb, negatives))
            negs = np.searchsorted(neg_cdf, draws)
            tgt = np.concatenate([pos[:, None], negs], axis=1)        # (nb, 1+neg)
            labels = np.zeros((nb, 1 + negatives), dtype=np.float32)
            labels[:, 0] = 1.0

            cur_lr = max(lr * (1.0 - total_pairs_seen / est_pairs), lr * 1e-2)
            total_pairs_seen += nb

            vc = w_in[c]                                              # (nb, dim)
            vt = w_out[tgt]                                           # (nb, 1+neg, dim)
            dots = np.einsum("bd,bkd->bk", vc, vt)
            sig = _stable_sigmoid(dots)
            g = ((sig - labels) * cur_lr).astype(np.float32)          # (nb, 1+neg)
            dct = np.einsum("bk,bkd->bd", g, vt)
            dtg = g[:, :, None] * vc[:, None, :]
            np.add.at(w_in, c, -dct)
            np.add.at(w_out, tgt.reshape(-1), -dtg.reshape(-1, dim))

    return EmbeddingTable(vocab.tokens, w_in)


# -- on-disk format --------------------------------------------------------------


def embeddings_to_text(table: EmbeddingTable) -> str:
    lines = [f"{EMB_HEADER} {len(table)} {table.dim}"]
    for tok, vec in zip(table.tokens, table.vectors):
        lines.append(tok + " " + " ".join(f"{x:.8e}" for x in vec))
    return "\n".join(lines) + "\n"


def save_embeddings(path, table: EmbeddingTable) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(embeddings_to_text(table))


def embeddings_from_text(text: str, where: str = "<memory>") -> EmbeddingTable:
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{where}: empty embedding data")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != EMB_HEADER:
        raise DataError(f"{where}: not an embedding file (bad header)")
    try:
        v, dim = int(head[2]), int(head[3])
    except ValueError:
        raise DataError(f"{where}: malformed embedding header") from None
    tokens, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(" ")
        if len(parts) != dim + 1:
            raise DataError(f"{where}:{lineno}: expected {dim + 1} fields, got {len(parts)}")
        tokens.append(parts[0])
        try:
            rows.append(np.array(parts[1:], dtype=np.float32))
        except ValueError:
            raise DataError(f"{where}:{lineno}: non-numeric embedding value") from None
    if len(tokens) != v:
        raise DataError(f"{where}: header claims {v} rows, file has {len(tokens)}")
    return EmbeddingTable(tokens, np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32))


def load_embeddings(path) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as f:
        return embeddings_from_text(f.read(), where=str(path))
