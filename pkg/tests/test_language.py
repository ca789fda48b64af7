"""Text branch: recurrence oracle, masking, gradients, training."""

import numpy as np
import pytest

from gradcheck import check_grads
from htdn import datagen as dg
from htdn.errors import ContractError
from htdn.language_net import (LanguageConfig, LanguageNet, batch_embed,
                               score_records, train_language_unimodal)
from htdn.prng import PrngState
from htdn.tensor import Tensor, bce_with_logits
from htdn.textproc import EmbeddingTable, tokenize


def _tiny_cfg(**kw):
    base = dict(embed_dim=3, hidden_dim=4, repr_dim=3, dropout=0.0,
                max_len=16, lr=0.01, epochs=2, batch_size=4)
    base.update(kw)
    return LanguageConfig(**base)


def _rand_table(tokens, dim, seed=0):
    s = PrngState(seed)
    vecs = s.normal(0.0, 0.5, size=(len(tokens), dim)).astype(np.float32)
    return EmbeddingTable(list(tokens), vecs)


# -- recurrence oracle -------------------------------------------------------


def _ref_states(net, x, mask):
    """Plain numpy restatement of the gate equations, no graph machinery."""
    g = {k: tuple(p.data for p in ps) for k, ps in net.gates.items()}
    B, T, _ = x.shape
    H = net.cfg.hidden_dim
    h = np.zeros((B, H), dtype=x.dtype)
    c = np.zeros((B, H), dtype=x.dtype)
    out = np.zeros((B, T, H), dtype=x.dtype)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    for t in range(T):
        xt, m = x[:, t], mask[:, t:t + 1]
        gi = sig(xt @ g["inp"][0] + h @ g["inp"][1] + g["inp"][2])
        gf = sig(xt @ g["forget"][0] + h @ g["forget"][1] + g["forget"][2])
        go = sig(xt @ g["out"][0] + h @ g["out"][1] + g["out"][2])
        gc = np.tanh(xt @ g["cell"][0] + h @ g["cell"][1] + g["cell"][2])
        c_new = gf * c + gi * gc
        h_new = go * np.tanh(c_new)
        c = m * c_new + (1 - m) * c
        h = m * h_new + (1 - m) * h
        out[:, t] = h
    return out


class TestRecurrence:
    def test_matches_numpy_reference(self):
        net = LanguageNet(_tiny_cfg(embed_dim=2, hidden_dim=5), PrngState(3), dtype=np.float64)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4, 2))
        mask = np.ones((3, 4))
        mask[1, 2:] = 0.0
        mask[2, 1:] = 0.0
        got = net.lstm_states(Tensor(x), mask).data
        want = _ref_states(net, x, mask)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_zero_weights_give_zero_states_and_half_score(self):
        net = LanguageNet(_tiny_cfg(), PrngState(1))
        for p in net.params():
            p.data[:] = 0.0
        x = np.ones((2, 5, 3), dtype=np.float32)
        mask = np.ones((2, 5), dtype=np.float32)
        states = net.lstm_states(Tensor(x), mask)
        assert np.all(states.data == 0.0)
        rep = net.represent(Tensor(x), mask)
        assert np.all(rep.data == 0.0)
        z = net.head_logits(rep)
        assert np.all(z.data == 0.0)  # sigmoid of 0 scores 0.5

    def test_forget_bias_starts_open(self):
        net = LanguageNet(_tiny_cfg(), PrngState(2))
        assert np.all(net.gates["forget"][2].data == 1.0)
        assert np.all(net.gates["inp"][2].data == 0.0)


class TestMasking:
    def test_batch_equals_singles(self):
        cfg = _tiny_cfg(embed_dim=2, hidden_dim=4, repr_dim=3)
        net = LanguageNet(cfg, PrngState(7), dtype=np.float64)
        rng = np.random.default_rng(1)
        lens = [5, 2, 3]
        x = np.zeros((3, 5, 2))
        mask = np.zeros((3, 5))
        for i, L in enumerate(lens):
            x[i, :L] = rng.normal(size=(L, 2))
            mask[i, :L] = 1.0
        batch_rep = net.represent(Tensor(x), mask).data
        for i, L in enumerate(lens):
            solo = net.represent(Tensor(x[i:i + 1, :L]), mask[i:i + 1, :L]).data
            assert np.allclose(batch_rep[i], solo[0], rtol=1e-12, atol=1e-12)

    def test_extra_padding_is_exactly_inert(self):
        net = LanguageNet(_tiny_cfg(), PrngState(4))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 3)).astype(np.float32)
        mask = np.ones((2, 3), dtype=np.float32)
        rep = net.represent(Tensor(x), mask).data
        x_pad = np.concatenate([x, rng.normal(size=(2, 4, 3)).astype(np.float32)], axis=1)
        mask_pad = np.concatenate([mask, np.zeros((2, 4), dtype=np.float32)], axis=1)
        rep_pad = net.represent(Tensor(x_pad), mask_pad).data
        assert np.array_equal(rep, rep_pad)

    def test_zero_length_sequence_rejected(self):
        net = LanguageNet(_tiny_cfg(), PrngState(4))
        x = np.ones((1, 3, 3), dtype=np.float32)
        with pytest.raises(ContractError, match="real token"):
            net.represent(Tensor(x), np.zeros((1, 3), dtype=np.float32))

    def test_mask_shape_checked(self):
        net = LanguageNet(_tiny_cfg(), PrngState(4))
        with pytest.raises(ContractError):
            net.lstm_states(Tensor(np.ones((1, 3, 3), dtype=np.float32)), np.ones((2, 3)))


class TestGradients:
    def test_full_chain_gradcheck(self):
        cfg = _tiny_cfg(embed_dim=3, hidden_dim=4, repr_dim=3)
        net = LanguageNet(cfg, PrngState(11), dtype=np.float64)
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        mask = np.ones((2, 3))
        mask[1, 2] = 0.0
        y = np.array([[1.0], [0.0]])

        def build():
            rep = net.represent(x, mask)
            return bce_with_logits(net.head_logits(rep), y)

        check_grads(build, net.params() + [x], rng=rng)


class TestBatchEmbed:
    def test_known_and_unknown_tokens(self):
        table = _rand_table(["alpha", "beta"], 4)
        x, mask = batch_embed(table, [["alpha", "nope"], ["beta"]], max_len=8)
        assert x.shape == (2, 2, 4) and mask.shape == (2, 2)
        assert np.array_equal(x[0, 0], table.vectors[0])
        assert np.all(x[0, 1] == 0.0)       # unknown token
        assert np.all(x[1, 1] == 0.0)       # padding
        assert mask.tolist() == [[1.0, 1.0], [1.0, 0.0]]

    def test_truncation_applies(self):
        table = _rand_table(["a"], 2)
        x, mask = batch_embed(table, [["a"] * 10], max_len=4)
        assert x.shape == (1, 4, 2)
        assert mask.sum() == 4

    def test_rejects_empty(self):
        table = _rand_table(["a"], 2)
        with pytest.raises(ContractError):
            batch_embed(table, [], max_len=4)
        with pytest.raises(ContractError):
            batch_embed(table, [["a"], []], max_len=4)


# -- training ----------------------------------------------------------------


@pytest.fixture(scope="module")
def short_corpus():
    cfg = dg.SyntheticConfig(ads=48, seed=31, text_signal=1.0, obfuscation_rate=0.0,
                             length_mean=18.0, length_sd=6.0, length_min=7,
                             length_cap=30, positive_fraction=0.5)
    return dg.generate_corpus(cfg)


@pytest.fixture(scope="module")
def short_table(short_corpus):
    vocab = sorted({t for r in short_corpus for t in tokenize(r.text)})
    return _rand_table(vocab, 12, seed=5)


class TestTraining:
    def test_overfits_small_separable_set(self, short_corpus, short_table):
        cfg = _tiny_cfg(embed_dim=12, hidden_dim=12, repr_dim=12, max_len=32,
                        epochs=30, batch_size=16, lr=0.02)
        train = short_corpus[:16]
        net, hist = train_language_unimodal(train, short_table, cfg, PrngState(9))
        s = score_records(net, short_table, train)
        y = np.array([dg.binarize_label(r.label7) for r in train])
        acc = ((s >= 0.5).astype(int) == y).mean()
        assert acc == 1.0
        assert hist["train_loss"][-1] < hist["train_loss"][0]

    def test_stop_fn_ends_training_early(self, short_corpus, short_table):
        cfg = _tiny_cfg(embed_dim=12, hidden_dim=6, repr_dim=6, max_len=32,
                        epochs=20, batch_size=8)
        train = short_corpus[:12]
        _, hist = train_language_unimodal(train, short_table, cfg, PrngState(3),
                                          stop_fn=lambda epoch, h: epoch >= 2)
        assert len(hist["train_loss"]) == 3

    def test_deterministic(self, short_corpus, short_table):
        cfg = _tiny_cfg(embed_dim=12, hidden_dim=6, repr_dim=6, max_len=32,
                        epochs=2, batch_size=8)
        train = short_corpus[:12]
        n1, h1 = train_language_unimodal(train, short_table, cfg, PrngState(17))
        n2, h2 = train_language_unimodal(train, short_table, cfg, PrngState(17))
        assert h1["train_loss"] == h2["train_loss"]
        s1 = score_records(n1, short_table, train)
        s2 = score_records(n2, short_table, train)
        assert np.array_equal(s1, s2)

    def test_best_validation_epoch_wins(self, short_corpus, short_table):
        from htdn.metrics import confusion, weighted_accuracy
        cfg = _tiny_cfg(embed_dim=12, hidden_dim=8, repr_dim=8, max_len=32,
                        epochs=6, batch_size=8, lr=0.02)
        train, val = short_corpus[:24], short_corpus[24:40]
        net, hist = train_language_unimodal(train, short_table, cfg, PrngState(23),
                                            val_records=val)
        s = score_records(net, short_table, val)
        y = np.array([dg.binarize_label(r.label7) for r in val])
        wa = weighted_accuracy(confusion(y, (s >= 0.5).astype(int)))
        assert wa == pytest.approx(max(hist["val_weighted_accuracy"]))

    def test_scores_are_probabilities(self, short_corpus, short_table):
        cfg = _tiny_cfg(embed_dim=12, hidden_dim=6, repr_dim=6, max_len=32, epochs=1)
        net, _ = train_language_unimodal(short_corpus[:8], short_table, cfg, PrngState(2))
        s = score_records(net, short_table, short_corpus[:8])
        assert np.all((s > 0.0) & (s < 1.0))
