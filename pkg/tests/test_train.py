import json
import math

import numpy as np
import pytest

from conslt import tensor as T
from conslt.contrastive import ContrastiveConfig
from conslt.corpus import batch_iter, build_vocab, collate, make_example, make_synthetic_corpus
from conslt.errors import ConfigError, ContractError, NonFiniteLossError
from conslt.model import ModelConfig, Transformer
from conslt.train import (Adam, TrainConfig, TrainState, config_copy, fit, load_train_state, restore,
                          save_train_state, slt_loss, snapshot, step_streams, train_step, write_history)


def toy_data(n=24, task="mapped", seed=3):
    corp = make_synthetic_corpus(task, 12, n, (2, 5), T.RngState(seed))
    pairs = corp.pairs()
    vs, vt = build_vocab([s for s, _ in pairs]), build_vocab([t for _, t in pairs])
    return [make_example(vs.encode(s.split()), vt.encode(t.split())) for s, t in pairs], vs, vt


def toy_model(vs, vt, seed=0):
    cfg = ModelConfig(src_vocab_size=len(vs), tgt_vocab_size=len(vt), d_model=8, num_heads=2, d_ff=16,
                      dropout_rate=0.1, max_positions=16)
    return Transformer(cfg, rng=T.RngState(seed))


def toy_cfg(**kw):
    base = dict(learning_rate=1e-3, batch_size=6, seed=4,
                contrastive=ContrastiveConfig(weight=0.5, num_negatives=4, temperature=0.1))
    base.update(kw)
    return TrainConfig(**base)


def run_steps(cfg, n_steps, data=None):
    examples, vs, vt = data or toy_data()
    model = toy_model(vs, vt)
    state = TrainState.fresh(cfg)
    results = []
    epoch = 0
    while len(results) < n_steps:
        epoch += 1
        for batch in batch_iter(examples, cfg.batch_size, True, T.RngState(cfg.seed).substream(2, epoch)):
            results.append(train_step(model, batch, cfg, state))
            if len(results) == n_steps:
                break
    return model, state, results


# -- losses ---------------------------------------------------------------


def test_slt_uniform_logits():
    loss = slt_loss(T.Tensor(np.zeros((1, 3, 4))), np.array([[0, 1, 2]]), np.ones((1, 3), bool))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-12)


def test_slt_extreme_correct_logits_near_zero():
    logits = np.full((1, 2, 5), -50.0)
    logits[0, 0, 3] = logits[0, 1, 1] = 50.0
    assert slt_loss(T.Tensor(logits), np.array([[3, 1]]), np.ones((1, 2), bool)).item() < 1e-30


def test_slt_label_smoothing_hand_case():
    logits = np.array([[[2.0, 0.5, -1.0]]])
    p = np.exp(logits[0, 0]) / np.exp(logits[0, 0]).sum()
    eps = 0.3
    expected = (1 - eps) * -math.log(p[0]) + eps * -np.log(p).mean()
    got = slt_loss(T.Tensor(logits), np.array([[0]]), np.ones((1, 1), bool), eps).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_slt_masked_average_and_all_pad():
    logits = T.Tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
    full = slt_loss(logits, np.array([[1, 2, 3]]), np.array([[True, True, False]])).item()
    part = slt_loss(T.Tensor(logits.data[:, :2]), np.array([[1, 2]]), np.ones((1, 2), bool)).item()
    assert full == pytest.approx(part, abs=1e-14)
    with pytest.raises(ContractError):
        slt_loss(logits, np.array([[1, 2, 3]]), np.zeros((1, 3), bool))


# -- optimizer ------------------------------------------------------------


def test_adam_first_update_hand_value():
    p = {"w": T.Tensor(np.array(0.0), requires_grad=True)}
    Adam(0.9, 0.998, 1e-8).update(p, {"w": np.array(1.0)}, 0.001)
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert p["w"].data == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)


def test_adam_moment_shapes_mirror_params():
    examples, vs, vt = toy_data()
    _, state, _ = run_steps(toy_cfg(), 2, (examples, vs, vt))
    model = toy_model(vs, vt)
    for name, p in model.params.items():
        assert state.optimizer.m[name].shape == p.shape == state.optimizer.v[name].shape


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(plateau_patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(label_smoothing=1.0)
    c = config_copy(TrainConfig(), learning_rate=0.5, **{"contrastive.weight": 0.0})
    assert c.learning_rate == 0.5 and c.contrastive.weight == 0.0
    assert TrainConfig().contrastive.weight == 0.5


# -- train_step -----------------------------------------------------------


def test_alpha_zero_matches_disabled_cl_bitwise():
    a_model, _, a_res = run_steps(toy_cfg(contrastive=ContrastiveConfig(weight=0.0, num_negatives=4)), 12)
    b_model, _, b_res = run_steps(toy_cfg(enable_cl=False), 12)
    assert [r.total for r in a_res] == [r.total for r in b_res]
    assert all(r.total == r.slt for r in a_res)
    for k in a_model.params:
        assert a_model.params[k].data.tobytes() == b_model.params[k].data.tobytes()


def test_total_is_slt_plus_weighted_cl():
    _, _, res = run_steps(toy_cfg(), 10)
    for r in res:
        assert r.cl != 0
        assert abs(r.total - (r.slt + 0.5 * r.cl)) <= 1e-12


@pytest.mark.parametrize("granularity,similarity", [("sentence", "cosine"), ("token", "cosine"),
                                                     ("sentence", "bidirectional_kl")])
def test_other_contrastive_variants_train(granularity, similarity):
    ccfg = ContrastiveConfig(weight=0.5, num_negatives=3, granularity=granularity, similarity=similarity)
    _, _, res = run_steps(toy_cfg(contrastive=ccfg), 4)
    assert all(math.isfinite(r.total) for r in res)


def test_passes_use_disjoint_streams():
    _, _, res = run_steps(toy_cfg(), 3)
    for r in res:
        assert len(set(r.streams)) == 3
    assert len({r.streams for r in res}) == 3
    p1, p2, _ = step_streams(0, 0)
    assert not np.array_equal(p1.random(4), p2.random(4))


def test_deterministic_loss_curve():
    _, _, a = run_steps(toy_cfg(), 6)
    _, _, b = run_steps(toy_cfg(), 6)
    assert [r.total for r in a] == [r.total for r in b]


def test_nonfinite_loss_aborts_with_snapshot():
    examples, vs, vt = toy_data()
    model = toy_model(vs, vt)
    model.params["enc.0.ff2.b"].data[0] = np.nan
    with pytest.raises(NonFiniteLossError) as err:
        train_step(model, collate(examples[:4]), toy_cfg(), TrainState.fresh(toy_cfg()))
    assert err.value.snapshot["step"] == 0


def test_resume_matches_uninterrupted(tmp_path):
    examples, vs, vt = toy_data()
    cfg = toy_cfg()
    batches = list(batch_iter(examples, cfg.batch_size))
    full = toy_model(vs, vt)
    st = TrainState.fresh(cfg)
    for b in batches:
        train_step(full, b, cfg, st)

    part = toy_model(vs, vt)
    st2 = TrainState.fresh(cfg)
    for b in batches[:2]:
        train_step(part, b, cfg, st2)
    save_train_state(tmp_path / "state.bin", st2)
    saved = snapshot(part)
    resumed = toy_model(vs, vt, seed=99)
    restore(resumed, saved)
    st3 = load_train_state(tmp_path / "state.bin")
    assert st3.step == 2
    for b in batches[2:]:
        train_step(resumed, b, cfg, st3)
    for k in full.params:
        assert resumed.params[k].data.tobytes() == full.params[k].data.tobytes()


# -- fit ------------------------------------------------------------------


def test_frozen_model_early_stops_after_two_epochs():
    examples, vs, vt = toy_data()
    model = toy_model(vs, vt)
    cfg = toy_cfg(learning_rate=0.0, early_stop_patience=1, max_epochs=10)
    res = fit(model, examples[:18], examples[18:], cfg, vt)
    assert res.epochs_run == 2 and len(res.history) == 2


def test_fit_history_fields_and_plateau(tmp_path):
    examples, vs, vt = toy_data()
    model = toy_model(vs, vt)
    cfg = toy_cfg(learning_rate=0.0, plateau_patience=1, early_stop_patience=3, max_epochs=10)
    res = fit(model, examples[:18], examples[18:], cfg, vt)
    assert [h["lr"] for h in res.history] == [0.0] * 4
    write_history(tmp_path / "h.jsonl", res.history)
    rec = json.loads((tmp_path / "h.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"epoch", "train_slt", "train_cl", "lr", "dev_bleu4", "dev_rouge"}


def test_plateau_decays_learning_rate():
    examples, vs, vt = toy_data()
    model = toy_model(vs, vt)
    cfg = toy_cfg(learning_rate=1e-9, plateau_patience=1, early_stop_patience=3, max_epochs=10)
    res = fit(model, examples[:18], examples[18:], cfg, vt)
    lrs = [h["lr"] for h in res.history]
    assert lrs[0] == 1e-9
    assert lrs[-1] < lrs[0]


def test_fit_rejects_empty_split():
    examples, vs, vt = toy_data()
    with pytest.raises(ContractError):
        fit(toy_model(vs, vt), examples, [], toy_cfg(), vt)
