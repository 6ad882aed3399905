"""Network architecture, gradient check, training loop, serialization,
and dataset generation."""

import numpy as np
import pytest

from volblend import neural as vn
from volblend.errors import FormatError, ValidationError


def toy_instances(rng, n=40, n_coords=12, latent=2):
    """Low-dimensional synthetic instances with a learnable mapping."""
    basis = rng.normal(size=(latent, n_coords))
    instances = []
    for i in range(n):
        z = rng.normal(size=latent)
        neutral = rng.normal(size=n_coords) * 5 + 50
        delta = z @ basis
        target = 0.3 * np.tanh(delta) + 0.05 * z[0] * np.ones(n_coords)
        instances.append(vn.DatasetInstance(
            neutral=neutral, linear_delta=delta, target_delta=target,
            identity=i % 10, weights=np.zeros(3)))
    return instances


# ---------------------------------------------------------------------------
# architecture and inference


def test_forward_shapes_and_determinism():
    model = vn.NeuralModel(30, hidden=16, token=8)
    rng = np.random.default_rng(0)
    neutral = rng.normal(size=30)
    delta = rng.normal(size=30)
    a = vn.infer(model, neutral, delta)
    b = vn.infer(model, neutral, delta)
    assert (a == b).all()
    assert a.shape == (30,)


def test_inference_batch_composition_invariance():
    model = vn.NeuralModel(18, hidden=8, token=4)
    rng = np.random.default_rng(1)
    deltas = rng.normal(size=(5, 18)).astype(np.float32)
    neutrals = rng.normal(size=(5, 18)).astype(np.float32)
    batched = model.predict_correction(deltas, neutrals)
    for i in range(5):
        single = model.predict_correction(deltas[i], neutrals[i])
        assert (batched[i] == single).all()


def test_input_audit_hook_sees_delta_and_neutral():
    model = vn.NeuralModel(6, hidden=4, token=2)
    seen = []
    model.input_audit_hook = lambda d, n: seen.append((d.copy(), n.copy()))
    neutral = np.arange(6.0) + 10
    delta = np.full(6, 0.25)
    vn.infer(model, neutral, delta)
    assert len(seen) == 1
    # the network receives the difference vector, never the absolute
    # expression surface
    assert np.allclose(seen[0][0], delta)
    assert np.allclose(seen[0][1], neutral)


def test_infer_size_mismatch():
    model = vn.NeuralModel(9, hidden=4, token=2)
    with pytest.raises(ValidationError, match="coordinates"):
        vn.infer(model, np.zeros(9), np.zeros(12))


# ---------------------------------------------------------------------------
# learning-rate schedule


def test_lr_schedule_exact():
    cfg = vn.TrainingConfig(steps=20000, lr_start=1e-4, lr_end=5e-5)
    for step in (0, 1, 137, 9999, 20000):
        expected = 1e-4 + (5e-5 - 1e-4) * step / 20000
        assert abs(cfg.learning_rate(step) - expected) < 1e-12


def test_config_defaults_follow_production_recipe():
    cfg = vn.TrainingConfig()
    assert cfg.lr_start == 1e-4
    assert cfg.lr_end == 5e-5
    assert cfg.batch_size == 128
    assert cfg.train_fraction == 0.9


# ---------------------------------------------------------------------------
# gradients


def test_parameter_gradients_match_central_finite_differences():
    # tiny network in float64 so the comparison is meaningful
    model = vn.NeuralModel(3, hidden=1, token=1,
                           rng=np.random.default_rng(3), dtype=np.float64)
    rng = np.random.default_rng(4)
    xd = rng.normal(size=(4, 3))
    xn = rng.normal(size=(4, 3))
    y = rng.normal(size=(4, 3))

    _, grads = vn.loss_and_gradients(model, xd, xn, y)
    h = 1e-5
    for name, p in model.params.items():
        flat = p.reshape(-1)
        g_flat = grads[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp, _ = vn.loss_and_gradients(model, xd, xn, y)
            flat[k] = orig - h
            lm, _ = vn.loss_and_gradients(model, xd, xn, y)
            flat[k] = orig
            fd = (lp - lm) / (2 * h)
            # relative with the usual floor: near-zero entries sit at the
            # finite-difference cancellation noise level
            denom = max(abs(fd), abs(g_flat[k]), 1e-5)
            assert abs(fd - g_flat[k]) / denom < 1e-4, (name, k, fd, g_flat[k])


# ---------------------------------------------------------------------------
# training


def test_training_memorizes_identical_instances():
    rng = np.random.default_rng(5)
    inst = toy_instances(rng, n=1, n_coords=10)[0]
    data = [inst] * 8
    cfg = vn.TrainingConfig(steps=800, batch_size=8, hidden=32, token=8,
                            lr_start=3e-3, lr_end=1e-3, seed=1, log_every=100)
    result = vn.train(data, cfg)
    assert result.log[-1]["loss"] < 1e-6


def test_training_loss_decreases_10x():
    rng = np.random.default_rng(6)
    data = toy_instances(rng, n=60, n_coords=12)
    cfg = vn.TrainingConfig(steps=1500, batch_size=16, hidden=32, token=8,
                            lr_start=2e-3, lr_end=1e-3, seed=2, log_every=50)
    result = vn.train(data, cfg)
    assert result.log[-1]["loss"] <= result.log[0]["loss"] / 10.0


def test_training_deterministic_for_fixed_seed():
    rng = np.random.default_rng(7)
    data = toy_instances(rng, n=20, n_coords=8)
    cfg = vn.TrainingConfig(steps=60, batch_size=8, hidden=8, token=4, seed=3,
                            log_every=10)
    r1 = vn.train(data, cfg)
    r2 = vn.train(data, cfg)
    losses1 = [row["loss"] for row in r1.log]
    losses2 = [row["loss"] for row in r2.log]
    assert losses1 == losses2
    for k in r1.model.params:
        assert (r1.model.params[k] == r2.model.params[k]).all()


def test_training_resumes_bit_compatibly(tmp_path):
    rng = np.random.default_rng(8)
    data = toy_instances(rng, n=20, n_coords=8)
    cfg = vn.TrainingConfig(steps=80, batch_size=8, hidden=8, token=4, seed=4,
                            log_every=20)
    full = vn.train(data, cfg)

    # same run with a mid-flight checkpoint, then resume from it
    vn.train(data, cfg, checkpoint_path=str(tmp_path / "ckpt_{step}.pkl"),
             checkpoint_every=40)
    model, config, state = vn.load_checkpoint(tmp_path / "ckpt_40.pkl")
    assert state["step"] == 40
    assert vn.config_hash(config) == vn.config_hash(cfg)
    resumed = vn.train(data, cfg, model=model, resume_state=state)
    for k in full.model.params:
        assert (full.model.params[k] == resumed.model.params[k]).all(), k


def test_trained_model_beats_zero_network():
    rng = np.random.default_rng(9)
    data = toy_instances(rng, n=80, n_coords=12)
    train_set, test_set = data[:64], data[64:]
    cfg = vn.TrainingConfig(steps=2000, batch_size=16, hidden=32, token=8,
                            lr_start=2e-3, lr_end=5e-4, seed=5, log_every=100)
    result = vn.train(train_set, cfg)
    trained = vn.evaluate(result.model, test_set)
    baseline = vn.evaluate(None, test_set)
    assert np.isclose(baseline["mean_error_mm"], baseline["baseline_mean_error_mm"])
    assert trained["mean_error_mm"] < baseline["mean_error_mm"]


def test_training_rejects_empty_and_bad_lr():
    with pytest.raises(ValidationError, match="empty"):
        vn.train([], vn.TrainingConfig())
    with pytest.raises(ValidationError, match="lr_end"):
        vn.TrainingConfig(lr_start=1e-5, lr_end=1e-4).validate()


# ---------------------------------------------------------------------------
# serialization


def test_model_file_round_trip(tmp_path):
    model = vn.NeuralModel(24, hidden=8, token=4, rng=np.random.default_rng(11))
    rng = np.random.default_rng(12)
    model.set_normalization(rng.normal(size=(10, 24)), rng.normal(size=(10, 24)))
    path = tmp_path / "model.vbsn"
    vn.save_model(model, path)
    back = vn.load_model(path)
    for k in model.params:
        assert (back.params[k] == model.params[k]).all()
    x = rng.normal(size=24)
    n = rng.normal(size=24)
    assert (vn.infer(model, n, x) == vn.infer(back, n, x)).all()


def test_model_bad_magic(tmp_path):
    path = tmp_path / "bad.vbsn"
    path.write_bytes(b"XXXXX" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        vn.load_model(path)


def test_metrics_and_log_csv(tmp_path):
    rng = np.random.default_rng(13)
    data = toy_instances(rng, n=10, n_coords=6)
    metrics = vn.evaluate(None, data)
    mpath = tmp_path / "metrics.csv"
    vn.write_metrics_csv(mpath, metrics, header_comment="cfg abc")
    text = mpath.read_text()
    assert "mean_error_mm" in text and text.startswith("#")
    lpath = tmp_path / "log.csv"
    vn.write_training_log_csv(lpath, [{"step": 0, "loss": 1.0, "lr": 1e-4}])
    assert lpath.read_text().splitlines()[0] == "step,loss,lr"


# ---------------------------------------------------------------------------
# dataset split


def test_identity_disjoint_split():
    rng = np.random.default_rng(14)
    data = toy_instances(rng, n=50, n_coords=6)
    ds = vn.Dataset(instances=data, n_coords=6,
                    identities=np.unique([i.identity for i in data]))
    train_set, test_set = ds.split(np.random.default_rng(0), 0.8)
    train_ids = {i.identity for i in train_set}
    test_ids = {i.identity for i in test_set}
    assert not train_ids & test_ids
    assert len(train_set) + len(test_set) == len(data)


@pytest.mark.slow
def test_generate_dataset_smoke(tissue_level0, regressor_level0):
    ds = vn.generate_dataset(tissue_level0, regressor_level0,
                             n_identities=3, expressions_per_identity=2,
                             seed=11, level=0)
    assert len(ds.instances) == 6
    assert ds.n_coords == tissue_level0.skin.n_vertices * 3
    # zero-weight instances land at the rest fixed point
    for inst in ds.instances:
        if (inst.weights == 0).all():
            n = len(inst.neutral) // 3
            assert np.linalg.norm(inst.target_delta) <= 1e-3 * np.sqrt(n)
