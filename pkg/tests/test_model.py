import itertools

import numpy as np
import pytest

from conslt import tensor as T
from conslt.corpus import BOS, EOS, PAD, collate, make_example
from conslt.errors import ConfigError, ContractError, VocabMismatchError
from conslt.gradcheck import max_relative_error
from conslt.model import (ModelConfig, SourceInput, Transformer, beam_decode, beam_search,
                          greedy_decode, greedy_decode_batch, load_model, save_model, sequence_score)
from conslt.train import TrainConfig, TrainState, train_step


def tiny(seed=0, **kw):
    base = dict(src_vocab_size=9, tgt_vocab_size=8, d_model=8, num_heads=2, d_ff=16,
                dropout_rate=0.1, max_positions=16)
    base.update(kw)
    return Transformer(ModelConfig(**base), rng=T.RngState(seed))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(src_vocab_size=5, tgt_vocab_size=5, d_model=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(src_vocab_size=5, tgt_vocab_size=5, dropout_rate=1.0)
    assert ModelConfig.sign2text(100).num_encoder_layers == 3
    assert ModelConfig.gloss2text(50, 60).dropout_rate == 0.3


def test_encode_shapes_and_eval_determinism():
    m = tiny()
    src = SourceInput(token_ids=[4, 5, 6])
    a, b = m.encode(src), m.encode(src)
    assert a.shape == (3, 8)
    assert a.data.tobytes() == b.data.tobytes()


def test_training_passes_differ_with_different_rng():
    m = tiny()
    src = SourceInput(token_ids=[4, 5, 6, 7])
    a = m.encode(src, rng=T.RngState(1), training=True).data
    b = m.encode(src, rng=T.RngState(2), training=True).data
    assert not np.array_equal(a, b)
    mem = m.encode(src)
    h1, _ = m.decode(mem, [BOS, 4, 5], rng=T.RngState(1), training=True)
    h2, _ = m.decode(mem, [BOS, 4, 5], rng=T.RngState(2), training=True)
    assert not np.array_equal(h1.data, h2.data)


def test_over_length_input_names_limit():
    with pytest.raises(ContractError, match="max_positions=16"):
        tiny().encode(SourceInput(token_ids=[4] * 17))


def test_empty_prefix_rejected():
    m = tiny()
    with pytest.raises(ContractError):
        m.decode(m.encode(SourceInput(token_ids=[4])), [])


@pytest.mark.parametrize("norm_style", ["pre", "post"])
def test_causal_invariance(norm_style):
    m = tiny(norm_style=norm_style)
    mem = m.encode(SourceInput(token_ids=[4, 5, 6]))
    prefix = [BOS, 4, 5, 6, 7]
    h, lg = m.decode(mem, prefix)
    assert lg.shape == (5, 8)
    for j in range(1, 5):
        changed = list(prefix)
        changed[j] = 4 if prefix[j] != 4 else 5
        h2, lg2 = m.decode(mem, changed)
        np.testing.assert_array_equal(h2.data[:j], h.data[:j])
        np.testing.assert_array_equal(lg2.data[:j], lg.data[:j])


def test_weight_tying_single_storage():
    m = tiny()
    mem = m.encode(SourceInput(token_ids=[4, 5]))
    h, lg = m.decode(mem, [BOS, 4])
    np.testing.assert_allclose(lg.data, h.data @ m.params["tgt_embedding"].data.T, rtol=1e-12)
    m.params["tgt_embedding"].data[5] += 1.0
    h2, lg2 = m.decode(mem, [BOS])
    np.testing.assert_allclose(lg2.data, h2.data @ m.params["tgt_embedding"].data.T, rtol=1e-12)
    # gradient of the loss reaches the table through both the input lookup and the projection
    m.zero_grad()
    _, lg3 = m.decode(mem, [BOS, 5])
    T.sum_(lg3 * np.eye(8)[[6, 7]]).backward()
    assert np.abs(m.params["tgt_embedding"].grad).sum() > 0


def test_orthonormal_embedding_argmax():
    m = tiny(d_model=8)
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(8, 8)))
    m.params["tgt_embedding"].data[...] = q
    for w in range(8):
        logits = m.project(T.Tensor(q[w][None])).data[0]
        assert logits.argmax() == w


def test_feature_input_path():
    m = Transformer(ModelConfig(tgt_vocab_size=8, src_feature_dim=5, d_model=8, num_heads=2, d_ff=16),
                    rng=T.RngState(0))
    feats = np.random.default_rng(1).normal(size=(6, 5))
    assert m.encode(SourceInput(feature_vectors=feats)).shape == (6, 8)
    assert "src_proj.w" in m.params and "src_embedding" not in m.params
    with pytest.raises(ContractError):
        m.encode(np.ones((1, 3, 4)))
    with pytest.raises(ContractError):
        SourceInput(token_ids=[1], feature_vectors=feats)


@pytest.mark.parametrize("cfg", [dict(), dict(norm_style="post", position_encoding="learned")])
def test_full_model_gradient(cfg):
    m = tiny(d_model=4, num_heads=2, d_ff=6, tgt_vocab_size=6, src_vocab_size=6, dropout_rate=0.0, **cfg)
    src = np.array([[4, 5, 1], [5, 4, 0]])
    mask = src != PAD
    tgt = np.array([[BOS, 4, 5], [BOS, 5, 0]])
    w = np.random.default_rng(2).normal(size=(2, 3, 6))

    def loss():
        mem = m.encode(src, mask)
        _, lg = m.decode(mem, tgt, mask)
        return T.sum_(lg * w)
    # zero-gradient entries (key biases) see only roundoff in the difference quotient
    assert max_relative_error(loss, m.parameters(), floor=1e-5) < 1e-4


# -- decoding -------------------------------------------------------------


def overfit(pair_src, pair_tgt, steps=150):
    m = tiny(dropout_rate=0.0, d_model=16, d_ff=32)
    ex = make_example(pair_src, pair_tgt)
    cfg = TrainConfig(learning_rate=1e-2, enable_cl=False, seed=0)
    state = TrainState.fresh(cfg)
    batch = collate([ex])
    for _ in range(steps):
        train_step(m, batch, cfg, state)
    return m


def test_overfit_single_pair_copies_target():
    m = overfit([4, 5, 6], [7, 4, 6, 5])
    assert greedy_decode(m, [4, 5, 6], 10) == [7, 4, 6, 5]
    assert beam_decode(m, [4, 5, 6], beam_size=3, max_len=10) == [7, 4, 6, 5]


def test_greedy_max_len_and_determinism():
    m = tiny()
    assert len(greedy_decode(m, [4, 5], 1)) <= 1
    assert greedy_decode(m, [4, 5, 6], 6) == greedy_decode(m, [4, 5, 6], 6)


def test_greedy_batch_matches_single():
    m = tiny()
    rng = np.random.default_rng(3)
    srcs = [list(rng.integers(4, 9, size=n)) for n in (1, 3, 5, 2)]
    batch = collate([make_example(s, [4]) for s in srcs])
    seqs, _, _ = greedy_decode_batch(m, batch.src, batch.src_mask, 6)
    assert seqs == [greedy_decode(m, s, 6) for s in srcs]


def test_beam_one_equals_greedy_on_100_inputs():
    m = tiny(seed=5)
    rng = np.random.default_rng(0)
    for _ in range(100):
        src = list(rng.integers(4, 9, size=int(rng.integers(1, 6))))
        assert beam_decode(m, src, beam_size=1, max_len=6) == greedy_decode(m, src, 6)


def test_beam_dominates_greedy():
    m = tiny(seed=6)
    rng = np.random.default_rng(1)
    for _ in range(20):
        src = list(rng.integers(4, 9, size=3))
        g = greedy_decode(m, src, 5)
        _, score = beam_search(m, src, 4, 5)
        g_score = sequence_score(m, src, g, finished=len(g) < 5)
        assert score >= g_score - 1e-12


def test_beam_exhaustive_tiny():
    m = tiny(seed=7, tgt_vocab_size=6)
    V = 6
    content = [t for t in range(V) if t not in (PAD, BOS, EOS)]
    for src in ([4], [5, 6], [8, 4, 7]):
        cands = [([], True)] + [([a], True) for a in content]
        cands += [([a, b], False) for a, b in itertools.product(content, content)]
        best = max(cands, key=lambda c: sequence_score(m, src, c[0], finished=c[1]))
        out, score = beam_search(m, src, V, 2)
        assert out == best[0]
        assert score == pytest.approx(sequence_score(m, src, best[0], finished=best[1]), abs=1e-12)


def test_beam_rejects_zero():
    with pytest.raises(ConfigError):
        beam_decode(tiny(), [4], beam_size=0)


# -- persistence ----------------------------------------------------------


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = tiny(position_encoding="learned")
    save_model(tmp_path / "m.ckpt", m)
    m2, meta = load_model(tmp_path / "m.ckpt")
    assert meta["config"]["position_encoding"] == "learned"
    assert list(m2.params) == list(m.params)
    for k in m.params:
        assert m2.params[k].data.tobytes() == m.params[k].data.tobytes()
    assert (tmp_path / "m.ckpt").read_bytes()[:7] == b"CONSLT1"


def test_checkpoint_shape_mismatch(tmp_path):
    from conslt.checkpoint import load_arrays, save_arrays
    m = tiny()
    save_model(tmp_path / "m.ckpt", m)
    arrays, meta = load_arrays(tmp_path / "m.ckpt")
    meta["config"]["tgt_vocab_size"] = 9
    save_arrays(tmp_path / "bad.ckpt", arrays, meta)
    with pytest.raises(VocabMismatchError):
        load_model(tmp_path / "bad.ckpt")
