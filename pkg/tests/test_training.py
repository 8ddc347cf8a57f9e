import math

import numpy as np
import pytest

from couda import autodiff as ad
from couda.autodiff import ConfigError, ShapeError, Tensor
from couda.data import ShiftSpec, make_bundle
from couda.model import Architecture, build_model
from couda.training import (
    AdamState,
    CurveLog,
    NumericalError,
    TrainConfig,
    compute_losses,
    ensemble_predict,
    infer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)


@pytest.fixture
def bundle():
    return make_bundle(ShiftSpec(per_class=40, translation=(1.0, 0.0)), 0.2, 0.0, 3)


def fresh(bundle, cfg):
    return build_model(Architecture(bundle.dim, bundle.n_classes), cfg.seed, cfg.eps_init)


def same_params(a, b):
    return all(np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1)
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError, match="least_squares"):
        TrainConfig(domain_loss_kind="wasserstein")
    with pytest.raises(ConfigError, match="average"):
        TrainConfig(ensemble="vote")


def test_adam_zero_learning_rate_is_noop():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    before = p.data.copy()
    opt = AdamState([p], 0.0)
    for _ in range(3):
        opt.step({p: np.ones((2, 3))})
    assert np.array_equal(p.data, before)
    assert opt.m[0].shape == p.shape


def test_adam_first_step_moves_by_learning_rate():
    # bias correction makes the first step lr * sign(g)
    p = Tensor(np.zeros((1, 3)), requires_grad=True)
    AdamState([p], 0.01).step({p: np.array([[2.0, -0.5, 0.0]])})
    np.testing.assert_allclose(p.data, [[-0.01, 0.01, 0.0]], rtol=1e-6)


def test_dry_run_leaves_parameters(bundle):
    cfg = TrainConfig(steps=5, seed=1)
    model = fresh(bundle, cfg)
    reference = fresh(bundle, cfg)
    _, curves = train(model, bundle, cfg, dry_run=True)
    assert same_params(model, reference)
    assert len(curves.rows) == 1


def test_two_runs_identical(bundle, tmp_path):
    cfg = TrainConfig(steps=60, log_every=10, seed=4)
    out = []
    for name in ("a", "b"):
        model, curves = train(fresh(bundle, cfg), bundle, cfg)
        save_checkpoint(model, tmp_path / f"{name}.ckpt")
        out.append((curves.to_csv(), (tmp_path / f"{name}.ckpt").read_bytes()))
    assert out[0] == out[1]


def test_eps_mismatch_rejected(bundle):
    model = build_model(Architecture(bundle.dim, 3), 0, eps_init=0.5)
    with pytest.raises(ConfigError, match="eps"):
        train(model, bundle, TrainConfig(steps=1))


def test_class_count_mismatch(bundle):
    with pytest.raises(ShapeError):
        train(build_model(Architecture(bundle.dim, 4), 0), bundle, TrainConfig(steps=1))


def test_classification_loss_descends():
    bundle = make_bundle(ShiftSpec(per_class=100), 0.2, 0.0, 5)
    cfg = TrainConfig(steps=1500, log_every=25, seed=5)
    _, curves = train(fresh(bundle, cfg), bundle, cfg)
    lc = curves.column("classification_loss")
    assert lc[-10:].mean() < lc[3]  # row 3 is step 100


def test_alpha_zero_discriminator_untouched(bundle):
    cfg = TrainConfig(alpha=0.0, eta=0.0, transfer_weighting=False, steps=20, seed=2)
    model = fresh(bundle, cfg)
    before = [p.data.copy() for p in model.group("discriminator")]
    train(model, bundle, cfg)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.group("discriminator")))
    with ad.new_tape():
        losses = compute_losses(model, bundle.source_x[:8], bundle.source_z[:8], bundle.target_x[:8], cfg)
        grads = ad.backward(losses.total, model.parameters())
    assert not any(np.any(grads[p]) for p in model.group("discriminator"))


def test_classifier_gets_no_domain_gradient(small_model, batches):
    xs, zs, xt = batches
    with ad.new_tape():
        losses = compute_losses(small_model, xs, zs, xt, TrainConfig(eta=0.0))
        grads = ad.backward(losses.domain, small_model.parameters())
    for p in small_model.group("peer1.classifier") + small_model.group("peer2.classifier"):
        assert not np.any(grads[p])


def test_identity_transition_when_noise_layer_off(small_model, batches):
    xs, zs, xt = batches
    cfg = TrainConfig(use_noise_layer=False)
    with ad.new_tape():
        losses = compute_losses(small_model, xs, zs, xt, cfg)
        grads = ad.backward(losses.total, small_model.parameters())
    assert not any(np.any(grads[p]) for p in small_model.group("noise"))


def test_nan_aborts_with_step(bundle):
    cfg = TrainConfig(steps=3, seed=0)
    model = fresh(bundle, cfg)
    model.peers[0].extractor.weights[0].data[:] = np.nan
    with pytest.raises(NumericalError) as err:
        train(model, bundle, cfg)
    assert err.value.step == 1


def test_ensemble_agreeing_peers():
    rng = np.random.default_rng(0)
    y = rng.exponential(size=(20, 4))
    y /= y.sum(axis=1, keepdims=True)
    for mode in ("average", "maximum"):
        np.testing.assert_allclose(ensemble_predict(y, y, mode), y, rtol=0, atol=1e-15)


def test_ensemble_hand_average():
    out = ensemble_predict(np.array([[0.8, 0.2]]), np.array([[0.4, 0.6]]))
    np.testing.assert_allclose(out, [[0.6, 0.4]], rtol=0, atol=1e-15)
    assert out.argmax() == 0
    mx = ensemble_predict(np.array([[0.8, 0.2]]), np.array([[0.4, 0.6]]), "maximum")
    np.testing.assert_allclose(mx, [[0.8 / 1.4, 0.6 / 1.4]], rtol=1e-15)


def test_average_rows_sum_to_one(small_model):
    probs, labels = infer(small_model, np.random.default_rng(1).normal(size=(200, 4)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.array_equal(labels, probs.argmax(axis=1))


def test_checkpoint_round_trip(small_model, tmp_path):
    x = np.random.default_rng(2).normal(size=(10, 4))
    path = tmp_path / "m.ckpt"
    save_checkpoint(small_model, path)
    back = model_from_checkpoint(path)
    assert np.array_equal(infer(back, x)[0], infer(small_model, x)[0])
    assert same_params(back, small_model)


def test_checkpoint_keeps_init_biases(tmp_path):
    model = build_model(Architecture(2, 3), 0, eps_init=0.8)
    save_checkpoint(model, tmp_path / "m.ckpt")
    b = model_from_checkpoint(tmp_path / "m.ckpt").noise_layer.bias.data
    np.testing.assert_allclose(np.diag(b), math.log(0.2), rtol=0, atol=1e-12)
    np.testing.assert_allclose(b[0, 1], math.log(0.4), rtol=0, atol=1e-12)


def test_checkpoint_class_mismatch(small_model, tmp_path):
    save_checkpoint(small_model, tmp_path / "m.ckpt")
    other = build_model(Architecture(4, 5, (8, 16), (16, 16)), 0)
    with pytest.raises(ShapeError, match="n_classes"):
        load_checkpoint(other, tmp_path / "m.ckpt")


def test_curve_log_round_trip(tmp_path):
    log = CurveLog()
    log.append(50, dict(domain_loss=0.5, classification_loss=1 / 3, diversity_loss=0.1, mean_lambda=1.2))
    log.save(tmp_path / "c.csv")
    assert CurveLog.load(tmp_path / "c.csv").rows == log.rows
