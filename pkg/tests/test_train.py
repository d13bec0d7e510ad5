import json

import numpy as np
import pytest

from yoloam import tensor as T
from yoloam.data import collate, synth_shapes
from yoloam.detector import Detections, ModelConfig, build, load_checkpoint
from yoloam.losses import LossWeights
from yoloam.metrics import evaluate
from yoloam.train import SGD, TrainConfig, Trainer, evaluate_model, predict_samples, train_step

SMALL = ModelConfig("nano-desk", input_size=64)

# fixed-batch probe: four synthetic images, default momentum, lr reduced so
# momentum overshoot cannot produce late upticks
PROBE_LR = 2e-3
PROBE_STEPS = 50


def small_trainer(seed=0, epochs=2, **kw):
    data = synth_shapes(3, 4, size=64)
    cfg = TrainConfig(epochs=epochs, batch=2, seed=seed, eval_every=1, **kw)
    return Trainer(build(SMALL, seed=seed), cfg, data, data)


def param(name, value, requires_grad=True):
    p = T.Tensor(np.asarray(value, dtype=np.float64), requires_grad=requires_grad)
    return name, p


def test_sgd_momentum_by_hand():
    name, p = param("b", [1.0])
    opt = SGD([(name, p)], lr=0.1, momentum=0.9, weight_decay=0.5)
    for expected in (0.8, 0.42):
        p.grad = np.array([2.0])
        opt.step()
        assert abs(p.data[0] - expected) < 1e-12  # rank-1 parameters are not decayed


def test_sgd_weight_decay_on_matrices_only():
    _, w = param("w", np.ones((2, 2)))
    _, b = param("b", np.ones(2))
    opt = SGD([("w", w), ("b", b)], lr=1.0, momentum=0.0, weight_decay=0.1)
    w.grad, b.grad = np.zeros((2, 2)), np.zeros(2)
    opt.step()
    np.testing.assert_allclose(w.data, 0.9)
    np.testing.assert_array_equal(b.data, 1.0)
    opt.zero_grad()
    assert w.grad is None and b.grad is None
    opt.step()  # parameters without gradients are skipped
    np.testing.assert_allclose(w.data, 0.9)


def test_sgd_state_roundtrip():
    _, w = param("w", np.ones((2, 2)))
    opt = SGD([("w", w)], momentum=0.9)
    w.grad = np.ones((2, 2))
    opt.step()
    other = SGD([("w", w)], momentum=0.9)
    other.load_state_dict(opt.state_dict())
    np.testing.assert_array_equal(other.velocity["w"], opt.velocity["w"])


def test_lr_schedule():
    cfg = TrainConfig(epochs=10, lr0=0.1, warmup_epochs=2)
    assert cfg.lr_at(0, 0, 4) == 0.0
    assert abs(cfg.lr_at(1, 0, 4) - 0.05) < 1e-12
    assert cfg.lr_at(5, 0, 4) == 0.1
    cos = TrainConfig(epochs=10, lr0=0.1, cosine=True, lrf=0.01)
    assert cos.lr_at(0, 0, 1) == pytest.approx(0.1)
    assert cos.lr_at(5, 0, 1) == pytest.approx(0.1 * (0.01 + 0.99 * 0.5))
    assert TrainConfig().lr_at(99, 0, 1) == 1e-2  # constant by default


def test_defaults_match_training_setup():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.momentum, cfg.weight_decay, cfg.epochs, cfg.batch) == (1e-2, 0.937, 5e-4, 100, 16)


def test_equal_seeds_give_identical_logs():
    a, b = small_trainer(seed=5), small_trainer(seed=5)
    la, lb = a.fit(), b.fit()
    assert json.dumps(la) == json.dumps(lb)
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert json.dumps(small_trainer(seed=6).fit()) != json.dumps(la)


def test_records_have_no_wall_clock_fields():
    (rec,) = small_trainer(epochs=1).fit()
    assert set(rec) == {"epoch", "lr", "loss", "box", "cls", "dfl", "val_map50", "val_map50_95"}


def test_resume_reproduces_unbroken_run(tmp_path):
    full = small_trainer(epochs=3)
    full_log = full.fit()

    first = small_trainer(epochs=2)
    first.fit(checkpoint_dir=tmp_path)
    model, meta, optim = load_checkpoint(tmp_path / "last.npz")
    resumed = Trainer(model, TrainConfig(epochs=3, batch=2, seed=0), first.train_set, first.val_set)
    resumed.restore(meta, optim)
    assert resumed.epoch == 2
    resumed.fit()
    assert json.dumps(resumed.history[-1]) == json.dumps(full_log[-1])
    for (_, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_checkpoint_gives_identical_eval_report(tmp_path):
    tr = small_trainer(epochs=1)
    tr.fit(checkpoint_dir=tmp_path)
    a = evaluate_model(tr.model, tr.val_set)
    model, _, _ = load_checkpoint(tmp_path / "last.npz")
    b = evaluate_model(model, tr.val_set)
    assert a.to_text() == b.to_text()
    assert (tmp_path / "best.npz").exists()


def test_eval_on_own_predictions_is_perfect():
    model = build(SMALL, seed=1)
    samples = synth_shapes(4, 3, size=64)
    dets = predict_samples(model, samples, conf=0.001)
    assert sum(len(d) for d in dets) > 0
    gts = [np.concatenate([d.classes[:, None], d.boxes], axis=1) for d in dets]
    assert evaluate(dets, gts, SMALL.num_classes).map50 == 1.0


def test_predict_restores_training_mode_and_is_deterministic():
    model = build(SMALL)
    samples = synth_shapes(0, 2, size=64)
    a, b = predict_samples(model, samples, 0.01), predict_samples(model, samples, 0.01)
    assert model.training
    for u, v in zip(a, b):
        assert isinstance(u, Detections) and np.array_equal(u.boxes, v.boxes)


def test_target_map_and_patience_stop_early():
    assert len(small_trainer(epochs=5, target_map50=0.0).fit()) == 1
    # with lr 0 the model stays at its initial mAP, so the second evaluation is stale
    log = small_trainer(epochs=6, patience=1, lr0=0.0).fit()
    assert len(log) == 2


def test_fixed_batch_loss_strictly_decreases():
    model = build(ModelConfig("nano-desk"), seed=0)
    opt = SGD(model.named_parameters(), PROBE_LR, 0.937, 5e-4)
    images, gts = collate(synth_shapes(1, 4))
    losses = [train_step(model, opt, images, gts, LossWeights())["loss"] for _ in range(PROBE_STEPS)]
    assert np.all(np.diff(losses) < 0), losses
    assert losses[-1] < 0.5 * losses[0]
