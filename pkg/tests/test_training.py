import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslmtpp import autodiff as ad
from sslmtpp.autodiff import NonFiniteError, Tensor
from sslmtpp.data import make_batch
from sslmtpp.model import SSLMTPPNet
from sslmtpp.training import (Adam, CheckpointError, MissingGradientError, OptimizerState, TrainConfig,
                              TrainingDivergedError, clip_grad_norm, global_norm, load_checkpoint, load_config,
                              optimizer_step, read_history_csv, save_checkpoint, train, write_history_csv)

from helpers import random_sequences

TINY = dict(hidden_dim=4, num_layers=2, marker_embed_dim=2, encoder_dim=3, encoder_layers=2, head_dim=3,
            batch_size=4, epochs=3, lr=0.01)


@pytest.fixture(scope="module")
def tiny_data():
    rng = np.random.default_rng(99)
    labeled = random_sequences(rng, 10, max_len=8)
    unlabeled = random_sequences(rng, 14, max_len=8, labeled=False, prefix="u")
    return labeled, unlabeled


def test_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr, c.batch_size, c.lam, c.unlabeled_ratio, c.clip_norm, c.baseline) == \
        (100, 0.01, 1024, 0.1, 1, 5.0, False)


def test_zero_gradient_leaves_parameters():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    optimizer_step({"p": p}, OptimizerState(), 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_adam_step_has_lr_magnitude():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.ones(1)
    optimizer_step({"p": p}, OptimizerState(), 0.1)
    np.testing.assert_allclose(p.data, [-0.1], rtol=1e-7)


def test_adam_descends_on_square():
    w = Tensor([1.0], requires_grad=True)
    opt = Adam(lr=0.05)
    prev = 1.0
    for _ in range(10):
        w.zero_grad()
        ad.sum(ad.mul(w, w)).backward()
        opt.step({"w": w})
        assert abs(w.data[0]) < prev
        prev = abs(w.data[0])
    assert opt.state.step == 10


def test_missing_gradient_names_parameter():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(MissingGradientError, match="'lstm.0.b'"):
        optimizer_step({"lstm.0.b": p}, OptimizerState(), 0.1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(0.01, 10.0))
def test_clipped_norm_bounded(values, threshold):
    params = {f"p{i}": Tensor([0.0], requires_grad=True) for i in range(len(values))}
    for p, v in zip(params.values(), values):
        p.grad = np.array([v])
    before = global_norm(params)
    assert clip_grad_norm(params, threshold) == before
    after = global_norm(params)
    assert after <= threshold + 1e-9
    if before <= threshold:
        assert after == before


def test_training_is_deterministic(tiny_data):
    cfg = TrainConfig(**TINY, seed=3)
    a = train(*tiny_data, cfg)
    b = train(*tiny_data, cfg)
    for (n, x), y in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert x.tobytes() == y.tobytes(), n
    assert a.history == b.history


def test_history_contract(tiny_data):
    ssl = train(*tiny_data, TrainConfig(**TINY))
    assert len(ssl.history) == 3
    assert all(set(r) == {"epoch", "l_marker", "l_time", "l_recon", "l_total"} for r in ssl.history)
    assert all(np.isfinite(v) for r in ssl.history for v in r.values())
    r = ssl.history[-1]
    assert r["l_total"] == r["l_marker"] + r["l_time"] + r["l_recon"]
    base = train(*tiny_data, TrainConfig(**TINY, baseline=True))
    assert all(set(r) == {"epoch", "l_marker", "l_time", "l_total"} for r in base.history)


def test_baseline_leaves_autoencoder_untouched(tiny_data):
    cfg = TrainConfig(**TINY, baseline=True, seed=5)
    init = SSLMTPPNet(cfg.model_config(), seed=5).autoencoder_parameters()
    result = train(*tiny_data, cfg)
    trained = result.model.autoencoder_parameters()
    for name in init:
        assert trained[name].data.tobytes() == init[name].data.tobytes(), name
    assert result.model.config.lam == 0.0


def test_baseline_matches_model_without_autoencoder(tiny_data):
    base = train(*tiny_data, TrainConfig(**TINY, baseline=True, seed=2, dropout=0.2))
    plain = train(*tiny_data, TrainConfig(**TINY, use_autoencoder=False, seed=2, dropout=0.2))
    sup_a, sup_b = base.model.supervised_parameters(), plain.model.supervised_parameters()
    for name in sup_a:
        assert sup_a[name].data.tobytes() == sup_b[name].data.tobytes(), name
    batch = make_batch(tiny_data[0], base.scaler)
    pa, ga = base.model.predict_proba_batch(batch)
    pb, gb = plain.model.predict_proba_batch(batch)
    assert pa.tobytes() == pb.tobytes() and ga.tobytes() == gb.tobytes()


def test_semi_supervised_updates_autoencoder(tiny_data):
    cfg = TrainConfig(**TINY, seed=5)
    init = SSLMTPPNet(cfg.model_config(), seed=5).autoencoder_parameters()
    trained = train(*tiny_data, cfg).model.autoencoder_parameters()
    assert any(trained[n].data.tobytes() != init[n].data.tobytes() for n in init)


def test_divergence_guard_reports_epoch_and_batch(tiny_data, monkeypatch):
    calls = {"n": 0}
    original = SSLMTPPNet.composite_loss

    def flaky(self, *args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 5:  # epoch 2 (three labeled batches per epoch), second batch
            raise NonFiniteError("log: produced non-finite values")
        return original(self, *args, **kwargs)

    monkeypatch.setattr(SSLMTPPNet, "composite_loss", flaky)
    with pytest.raises(TrainingDivergedError) as err:
        train(*tiny_data, TrainConfig(**TINY))
    assert (err.value.epoch, err.value.batch) == (2, 1)


def test_train_rejects_bad_input(tiny_data):
    labeled, unlabeled = tiny_data
    with pytest.raises(ValueError, match="empty"):
        train([], unlabeled, TrainConfig(**TINY))
    with pytest.raises(ValueError, match="without markers"):
        train(unlabeled, [], TrainConfig(**TINY))


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(lr=0.0), dict(batch_size=0), dict(lam=-1.0),
                                    dict(clip_norm=0.0)])
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs).validate()


def test_config_file(tmp_path):
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"epochs": 7, "lam": 1.0, "hidden_dim": 8}))
    cfg = load_config(f)
    assert (cfg.epochs, cfg.lam, cfg.hidden_dim, cfg.batch_size) == (7, 1.0, 8, 1024)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    f.write_text(json.dumps({"epoch": 7}))
    with pytest.raises(ValueError, match="unknown config keys"):
        load_config(f)
    f.write_text(json.dumps({"epochs": [1]}))
    with pytest.raises(ValueError, match="flat"):
        load_config(f)


def test_baseline_forces_lambda_zero():
    assert TrainConfig(lam=0.5, baseline=True).model_config().lam == 0.0
    assert not TrainConfig(baseline=True).semi_supervised


def test_history_csv_round_trip(tmp_path, tiny_data):
    for baseline in (False, True):
        hist = train(*tiny_data, TrainConfig(**TINY, baseline=baseline)).history
        f = tmp_path / f"h{baseline}.csv"
        write_history_csv(hist, f)
        assert f.read_text().splitlines()[0] == "epoch,l_marker,l_time,l_recon,l_total"
        assert read_history_csv(f) == hist


def test_checkpoint_round_trip(tmp_path, tiny_data):
    cfg = TrainConfig(**TINY, seed=4)
    result = train(*tiny_data, cfg)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_checkpoint(result.model, cfg, result.scaler, a, meta={"protocol": "P-1"})
    ck = load_checkpoint(a)
    save_checkpoint(ck.model, ck.config, ck.scaler, b, meta=ck.meta)
    assert a.read_bytes() == b.read_bytes()
    assert ck.config == cfg and ck.scaler == result.scaler and ck.meta == {"protocol": "P-1"}
    batch = make_batch(tiny_data[0], result.scaler)
    before = result.model.predict_proba_batch(batch)
    after = ck.model.predict_proba_batch(batch)
    assert before[0].tobytes() == after[0].tobytes() and before[1].tobytes() == after[1].tobytes()
    doc = json.loads(a.read_text())
    assert doc["format"] == "sslmtpp-checkpoint"
    entry = doc["params"][0]
    assert set(entry) == {"name", "shape", "values"} and len(entry["values"]) == int(np.prod(entry["shape"]))


def test_checkpoint_wrong_hidden_dim(tmp_path, tiny_data):
    cfg = TrainConfig(**TINY)
    result = train(*tiny_data, cfg)
    f = tmp_path / "c.json"
    save_checkpoint(result.model, cfg, result.scaler, f)
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_checkpoint(f, expected=replace(cfg, hidden_dim=5))
    with pytest.raises(CheckpointError, match="config mismatch"):
        load_checkpoint(f, expected=replace(cfg, lam=0.5))
    assert load_checkpoint(f, expected=replace(cfg, epochs=50)).model is not None


def test_corrupt_checkpoint(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(f)
    f.write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(f)
    f.write_text('{"format": "sslmtpp-checkpoint", "config": {}, "scaler": {"mean": 0, "std": 1}, '
                 '"params": [{"name": "lstm.0.b", "shape": [3], "values": [1.0]}]}')
    with pytest.raises(CheckpointError, match="holds 1 values"):
        load_checkpoint(f)
