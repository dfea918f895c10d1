import math

import numpy as np
import pytest

import mimic


def softmax_attention(q, keys, values):
    scores = keys @ q / math.sqrt(q.size)
    w = np.exp(scores - scores.max())
    return (w / w.sum()) @ values


def test_standard_attention_matches_numpy():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=4), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(mimic.standard_attention(q, k, v), softmax_attention(q, k, v), atol=1e-12)


def test_decomposition_recovers_full_context_attention():
    rng = np.random.default_rng(1)
    for _ in range(20):
        dh, ld, lq = rng.integers(1, 9), rng.integers(1, 7), rng.integers(1, 5)
        q = rng.normal(size=dh)
        kd, vd = rng.normal(size=(ld, dh)), rng.normal(size=(ld, dh))
        k, v = rng.normal(size=(lq, dh)), rng.normal(size=(lq, dh))
        r = mimic.decompose(q, kd, vd, k, v)
        full = softmax_attention(q, np.vstack([kd, k]), np.vstack([vd, v]))
        np.testing.assert_allclose(r["combined"], full, atol=1e-9)
        assert 0.0 < r["mu"] < 1.0
        assert r["mu"] == pytest.approx(mimic.mu(q, kd, k), abs=1e-15)


def test_mu_is_zero_without_demonstrations():
    q, k = np.ones(3), np.eye(3)
    assert mimic.mu(q, np.zeros((0, 3)), k) == 0.0


def test_config_roundtrip_and_errors():
    desk = mimic.desk_config()
    assert mimic.normalize_config(desk) == desk
    partial = mimic.normalize_config({"seed": 3})
    assert partial["seed"] == 3 and partial["train"] == desk["train"]
    assert mimic.config_hash(partial) != mimic.config_hash(desk)
    with pytest.raises(mimic.ConfigError):
        mimic.normalize_config({"sede": 3})
    with pytest.raises(ValueError):
        mimic.normalize_config({"train": {"lr": "fast"}})


def test_model_forward_and_save(tmp_path):
    cfg = dict(mimic.desk_config()["model"], n_layers=1, d_model=8, n_heads=2, vocab_size=12, max_len=16)
    model = mimic.Model(cfg)
    logits = model.logits([2, 3, 0, 4])
    assert logits.shape == (4, 12)
    assert np.all(np.isfinite(logits))
    hidden = model.hidden_states([2, 3])
    assert len(hidden) == 1 and hidden[0].shape == (2, 8)
    path = str(tmp_path / "base.json")
    model.save(path)
    again = mimic.Model.load(path)
    assert again.checksum == model.checksum
    np.testing.assert_array_equal(again.logits([2, 3, 0, 4]), logits)
    assert model.config["d_model"] == 8


def test_verify_reports_a_corrupted_op():
    assert mimic.verify(seed=1)["passed"]
    report = mimic.verify(seed=1, corrupt_op="softmax_rows")
    assert not report["passed"]
