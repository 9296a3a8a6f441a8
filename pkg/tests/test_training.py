import json
import math

import numpy as np
import pytest

from dawnfm.core import make_rng
from dawnfm.data import sample_duathlon_prior
from dawnfm.errors import ConfigError, FormatError, TrainingError
from dawnfm.model import ModelConfig, VelocityModel
from dawnfm.operators import GaussianBlurOperator, SumOperator
from dawnfm.training import (Adam, TrainBatch, TrainConfig, Trainer, compute_loss, cosine_lr,
                             load_checkpoint, load_model, make_batch, save_checkpoint)


class ExactVelocity:
    """Stub that returns x1 - x0 for the batch it was built from."""

    def __init__(self, batch, noise=True):
        self.batch = batch
        self.config = ModelConfig.default_for((2,), "mlp", noise_conditioning=noise)

    def forward(self, x_t, bt, t, sigma=None, record=True):
        return self.batch.x1 - self.batch.x0


def toy_model(**kw):
    return VelocityModel(ModelConfig.default_for((2,), "mlp", embed_dim=8, hidden=(6, 5), **kw))


def toy_batch(rng, n=4, p=3.0):
    op = SumOperator()
    x1 = rng.standard_normal((n, 2))
    x0 = rng.standard_normal((n, 2))
    t = rng.uniform(size=n)
    b = op.apply(x1) + 0.1 * rng.standard_normal((n, 1))
    return TrainBatch(x1, x0, t, b, np.full(n, p / 100))


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1)
    with pytest.raises(ConfigError):
        TrainConfig(p_low=5, p_high=5)
    with pytest.raises(ConfigError):
        TrainConfig(p_high=25)
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-6, lr_min=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_cosine_schedule():
    cfg = TrainConfig(lr_init=1e-3, lr_min=1e-5, max_epochs=50)
    assert cosine_lr(0, cfg) == pytest.approx(1e-3, rel=1e-15)
    assert cosine_lr(50, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert cosine_lr(25, cfg) == pytest.approx(0.5 * (1e-3 + 1e-5), rel=1e-12)
    lrs = [cosine_lr(e, cfg) for e in range(51)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_adam_first_step():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.25])}
    opt = Adam(p)
    opt.step(p, g, 0.1)
    # bias-corrected first step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, 2.0])}
    opt = Adam(p)
    for _ in range(3):
        opt.step(p, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, 2.0])


def test_exact_velocity_zero_loss(rng):
    op = SumOperator()
    x1, x0 = rng.standard_normal((2, 6, 2))
    batch = TrainBatch(x1, x0, rng.uniform(size=6), op.apply(x1), np.zeros(6))
    loss, _ = compute_loss(ExactVelocity(batch), op, batch, grad=False)
    assert max(loss.total, loss.velocity_term, loss.misfit_term) < 1e-12


def test_loss_identity_and_alpha_zero(rng):
    m = toy_model()
    batch = toy_batch(rng)
    a, _ = compute_loss(m, SumOperator(), batch, alpha=2.5, grad=False)
    assert a.total == a.velocity_term + 2.5 * a.misfit_term
    assert a.velocity_term >= 0 and a.misfit_term >= 0
    z, _ = compute_loss(m, SumOperator(), batch, alpha=0.0, grad=False)
    assert z.total == z.velocity_term


def test_loss_formula(rng):
    m = toy_model()
    op = SumOperator()
    batch = toy_batch(rng)
    loss, _ = compute_loss(m, op, batch, grad=False)
    t = batch.t[:, None]
    x_t = (1 - t) * batch.x0 + t * batch.x1
    v = m.forward(x_t, op.adjoint(batch.b), batch.t, batch.noise_level, record=False)
    l1 = np.mean((v + batch.x0 - batch.x1) ** 2)
    b_theta = x_t.sum(axis=1, keepdims=True) + (1 - t) * v.sum(axis=1, keepdims=True)
    l2 = np.mean((b_theta - batch.b) ** 2)
    assert loss.velocity_term == pytest.approx(l1, rel=1e-13)
    assert loss.misfit_term == pytest.approx(l2, rel=1e-13)


def _full_loss_fd(m, op, batch, alpha, names, h=1e-6):
    _, grads = compute_loss(m, op, batch, alpha)
    worst = 0.0
    for name, idx in names:
        p = m.params[name]
        old = p[idx]
        p[idx] = old + h
        fp = compute_loss(m, op, batch, alpha, grad=False)[0].total
        p[idx] = old - h
        fm = compute_loss(m, op, batch, alpha, grad=False)[0].total
        p[idx] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, abs(num - grads[name][idx]) / max(abs(num), abs(grads[name][idx]), 1e-7))
    return worst


@pytest.mark.parametrize("noise", [True, False])
def test_full_loss_gradient_mlp(noise, rng):
    m = toy_model(noise_conditioning=noise)
    batch = toy_batch(rng)
    names = [(k, idx) for k, v in m.params.items() for idx in np.ndindex(v.shape)]
    assert _full_loss_fd(m, SumOperator(), batch, 1.0, names) < 1e-4


def test_full_loss_gradient_unet_blur(rng):
    m = VelocityModel(ModelConfig.default_for((1, 8, 8), embed_dim=8))
    op = GaussianBlurOperator(8, 2.0, 2.0)
    x1 = rng.uniform(size=(2, 1, 8, 8))
    batch = TrainBatch(x1, rng.standard_normal(x1.shape), np.array([0.2, 0.7]),
                       op.apply(x1) + 0.01 * rng.standard_normal(x1.shape), np.array([0.01, 0.1]))
    keys = list(m.params)
    names = []
    for _ in range(40):
        k = keys[rng.integers(len(keys))]
        names.append((k, tuple(rng.integers(s) for s in m.params[k].shape)))
    assert _full_loss_fd(m, op, batch, 1.0, names) < 1e-4


def test_nan_raises_training_error(rng):
    m = toy_model()
    m.params["mlp.out.b"][0] = np.nan
    with pytest.raises(TrainingError):
        compute_loss(m, SumOperator(), toy_batch(rng))


def test_make_batch_pairs_share_draws():
    op = GaussianBlurOperator(8)
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    b = make_batch(x, op, TrainConfig(p_low=1.0, p_high=9.0), make_rng(5))
    assert b.x1.shape == (6, 1, 8, 8)
    np.testing.assert_array_equal(b.x0[:3], -b.x0[3:])
    np.testing.assert_array_equal(b.t[:3], b.t[3:])
    np.testing.assert_array_equal(b.b[:3], b.b[3:])
    np.testing.assert_array_equal(b.noise_level[:3], b.noise_level[3:])
    assert np.all((b.noise_level >= 0.01) & (b.noise_level <= 0.09))
    assert np.all((b.t >= 0) & (b.t <= 1))


def _toy_trainer(epochs=4, seed=3):
    data = sample_duathlon_prior(make_rng(1), 64)
    cfg = TrainConfig(lr_init=1e-3, max_epochs=epochs, batch_size=16, seed=seed, reference_range=6.0)
    return Trainer(toy_model(), SumOperator(), data, cfg)


def test_runs_are_deterministic():
    a = _toy_trainer().run()
    b = _toy_trainer().run()
    assert a == b


def test_zero_lr_freezes_parameters():
    tr = _toy_trainer()
    before = {k: v.copy() for k, v in tr.model.params.items()}
    tr.lr_override = 0.0
    tr.train_epoch()
    for k in before:
        np.testing.assert_array_equal(before[k], tr.model.params[k])


def test_checkpoint_roundtrip_and_resume(tmp_path):
    full = _toy_trainer(epochs=6)
    full.run()
    half = _toy_trainer(epochs=6)
    half.run(3)
    save_checkpoint(tmp_path / "ck", half)
    m = load_model(tmp_path / "ck")
    for k, v in half.model.params.items():
        assert np.array_equal(m.params[k], v)
    resumed = load_checkpoint(tmp_path / "ck", SumOperator(), half.dataset)
    resumed.run()
    assert resumed.history == full.history
    assert resumed.step_losses == full.step_losses
    for k in full.model.params:
        assert np.array_equal(resumed.model.params[k], full.model.params[k])


def test_checkpoint_errors(tmp_path):
    tr = _toy_trainer(epochs=1)
    ck = save_checkpoint(tmp_path / "ck", tr)
    manifest = json.loads((ck / "manifest.json").read_text())
    entry = manifest["tensors"][0]
    # corrupt one tensor file
    f = ck / entry["file"]
    blob = bytearray(f.read_bytes())
    blob[-1] ^= 0xFF
    f.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match=entry["name"]):
        load_model(ck)
    f.unlink()
    with pytest.raises(FormatError, match="missing"):
        load_model(ck)
    manifest["version"] = 99
    (ck / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="version"):
        load_model(ck)
    with pytest.raises(FormatError):
        load_model(tmp_path / "nowhere")


def test_duathlon_velocity_term_halves():
    data = sample_duathlon_prior(make_rng(0, 11), 8192)
    ref = float(np.ptp(data.sum(axis=1)))
    cfg = TrainConfig(lr_init=2e-3, lr_min=1e-5, max_epochs=150, batch_size=128, seed=0,
                      reference_range=ref)
    tr = Trainer(VelocityModel(ModelConfig.default_for((2,), "mlp")), SumOperator(), data, cfg)
    tr.run(32)  # 64 steps per epoch, 2048 steps
    s = np.asarray(tr.step_losses[:2000])
    ma = np.convolve(s, np.ones(10) / 10, mode="valid")
    assert ma[-1] <= 0.5 * ma[0]
    assert math.isfinite(ma[-1])
