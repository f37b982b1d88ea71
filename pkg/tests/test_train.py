import json

import numpy as np
import pytest

from quotconv import autograd as ag
from quotconv import layers as ly
from quotconv import rotgroup as rg
from quotconv import train as tr
from quotconv.autograd import Tensor

SYM = rg.build_solid_symmetry("icosa")

TINY_BLOCKS = [
    {"type": "conv", "channels": 4, "radius": 0.45},
    {"type": "bn"},
    {"type": "relu"},
]


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_uniform_logits():
    for k in (2, 5, 60):
        logits = Tensor(np.zeros((3, k)))
        loss = tr.cross_entropy(logits, np.zeros(3, dtype=int))
        assert abs(loss.item() - np.log(k)) < 1e-12


def test_cross_entropy_perfect_logits_vanishes():
    logits = np.zeros((2, 4))
    logits[0, 1] = logits[1, 3] = 50.0
    loss = tr.cross_entropy(Tensor(logits), np.array([1, 3]))
    assert loss.item() < 1e-12


def test_cross_entropy_matches_naive_oracle():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 7))
    labels = rng.integers(0, 7, size=5)
    loss = tr.cross_entropy(Tensor(logits), labels).item()
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    want = -np.log(probs[np.arange(5), labels]).mean()
    assert abs(loss - want) < 1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    labels = np.array([0, 5, 2, 2])

    report = ag.grad_check(lambda: tr.cross_entropy(logits, labels), [logits], step=1e-5)
    assert report.passed(1e-6)


def test_bce_logit_zero_target_one():
    loss = tr.binary_cross_entropy(Tensor(np.zeros((1, 1))), np.ones((1, 1)))
    assert abs(loss.item() - np.log(2.0)) < 1e-15


def test_bce_large_logit_is_stable():
    loss = tr.binary_cross_entropy(Tensor(np.full((1, 1), 20.0)), np.ones((1, 1)))
    assert 0.0 < loss.item() < 3e-9
    big = tr.binary_cross_entropy(Tensor(np.full((1, 1), 500.0)), np.zeros((1, 1)))
    assert np.isfinite(big.item()) and abs(big.item() - 500.0) < 1e-9


def test_bce_matches_naive_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4))
    t = (rng.uniform(size=(3, 4)) < 0.5).astype(float)
    loss = tr.binary_cross_entropy(Tensor(x), t).item()
    s = 1.0 / (1.0 + np.exp(-x))
    want = -(t * np.log(s) + (1 - t) * np.log(1 - s)).mean()
    assert abs(loss - want) < 1e-12


def test_bce_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    t = (rng.uniform(size=(3, 5)) < 0.3).astype(float)
    report = ag.grad_check(lambda: tr.binary_cross_entropy(x, t), [x], step=1e-5)
    assert report.passed(1e-6)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_without_momentum_is_plain_gradient_descent():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = tr.SGD([p], lr=0.1, momentum=0.0)
    tr.sgd_step([p], [np.array([0.5, -0.5])], opt)
    assert np.allclose(p.data, [0.95, -1.95])


def test_sgd_zero_gradient_leaves_params():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = tr.SGD([p], lr=0.1, momentum=0.9)
    tr.sgd_step([p], [np.zeros(1)], opt)
    assert p.data[0] == 3.0


def test_sgd_two_steps_on_quadratic_match_hand_recurrence():
    # f(x) = 0.5 x^2, grad = x; v_{t+1} = mu v_t - lr x_t; x_{t+1} = x_t + v_{t+1}
    x0, lr, mu = 2.0, 0.1, 0.9
    p = Tensor(np.array([x0]), requires_grad=True)
    opt = tr.SGD([p], lr=lr, momentum=mu)
    v = 0.0
    x = x0
    for _ in range(2):
        tr.sgd_step([p], [np.array([x])], opt)
        v = mu * v - lr * x
        x = x + v
        assert abs(p.data[0] - x) < 1e-15


def test_sgd_skips_params_without_grad():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = tr.SGD([p], lr=0.5)
    opt.step()
    assert p.data[0] == 1.0


# ---------------------------------------------------------------------------
# data generation


def test_rotpair_samples_are_exact_rotations():
    rng = np.random.default_rng(4)
    spec = tr.TaskSpec(points=32, noise=0.01, shapes=("cube",))
    first, second, labels = tr.make_rotpair_samples(rng, SYM, spec, 5)
    for p1, p2, g in zip(first, second, labels):
        assert np.abs(p2 - p1 @ SYM.group.elements[g].T).max() < 1e-12


def test_shapecls_samples_labels_in_range():
    rng = np.random.default_rng(5)
    spec = tr.TaskSpec(task="shapecls", points=32, noise=0.0,
                       shapes=("cube", "torus", "cylinder"))
    clouds, labels, rotations = tr.make_shapecls_samples(rng, SYM, spec, 8)
    assert set(labels) <= {0, 1, 2}
    assert all(0 <= g < 60 for g in rotations)
    assert len(clouds) == 8


def test_sample_generation_deterministic():
    spec = tr.TaskSpec(points=24, noise=0.01)
    a = tr.make_rotpair_samples(np.random.default_rng(6), SYM, spec, 3)
    b = tr.make_rotpair_samples(np.random.default_rng(6), SYM, spec, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a[0], b[0]))
    assert np.array_equal(a[2], b[2])


# ---------------------------------------------------------------------------
# model plumbing


def _tiny_spec(task="rotpair"):
    return tr.TaskSpec(task=task, shapes=("cube", "tetra"), samples_per_epoch=4,
                       val_samples=4, points=24, noise=0.01, seed=11)


def _tiny_optim(epochs=1):
    return tr.OptimSpec(lr=0.01, batch=2, epochs=epochs, hidden=6)


def test_backbone_descriptor_shape_and_batching():
    rng = np.random.default_rng(7)
    backbone = ly.Backbone(SYM, TINY_BLOCKS, rng)
    positions = [rng.uniform(-0.5, 0.5, size=(10, 3)) for _ in range(3)]
    desc = tr.backbone_descriptor(backbone, positions)
    assert desc.shape == (3, 12, 4)
    # in eval mode (running stats) batching is per-sample independent
    backbone.set_training(False)
    desc_eval = tr.backbone_descriptor(backbone, positions)
    solo = tr.backbone_descriptor(backbone, positions[:1])
    assert np.abs(desc_eval.data[0] - solo.data[0]).max() < 1e-12


def test_descriptor_rejects_ragged_batches():
    rng = np.random.default_rng(8)
    backbone = ly.Backbone(SYM, TINY_BLOCKS, rng)
    with pytest.raises(ag.ShapeMismatch):
        tr.backbone_descriptor(backbone, [np.zeros((4, 3)), np.zeros((5, 3))])


def test_checkpoint_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(9)
    spec = _tiny_spec()
    model = tr.build_model(SYM, TINY_BLOCKS, "rotpair", spec, _tiny_optim(), rng)
    model.backbone.blocks[1][1].running_mean[:] = rng.standard_normal(4)
    prefix = str(tmp_path / "ckpt")
    tr.save_checkpoint(prefix, model, extra={"note": 1})
    model2 = tr.build_model(SYM, TINY_BLOCKS, "rotpair", spec, _tiny_optim(),
                            np.random.default_rng(10))
    extra = tr.load_checkpoint(prefix, model2)
    assert extra == {"note": 1}
    for (n1, t1), (n2, t2) in zip(model.named_params(), model2.named_params()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data)
    assert np.array_equal(model.backbone.blocks[1][1].running_mean,
                          model2.backbone.blocks[1][1].running_mean)


def test_missing_checkpoint_raises(tmp_path):
    model = tr.build_model(SYM, TINY_BLOCKS, "rotpair", _tiny_spec(), _tiny_optim(),
                           np.random.default_rng(11))
    with pytest.raises(tr.CheckpointMissing):
        tr.load_checkpoint(str(tmp_path / "nope"), model)


def test_diverged_on_nonfinite_loss():
    with pytest.raises(tr.Diverged):
        tr._check_finite(float("nan"))


# ---------------------------------------------------------------------------
# tiny end-to-end training runs (determinism + metric files)


def test_rotpair_tiny_run_deterministic(tmp_path):
    paths = []
    for run in range(2):
        path = tmp_path / f"metrics_{run}.jsonl"
        tr.run_rotpair_training(SYM, TINY_BLOCKS, _tiny_spec(), _tiny_optim(2),
                                metrics_path=str(path))
        paths.append(path)
    lines0 = paths[0].read_text().splitlines()
    lines1 = paths[1].read_text().splitlines()
    assert len(lines0) == 2
    for a, b in zip(lines0, lines1):
        ra, rb = json.loads(a), json.loads(b)
        ra.pop("wall_seconds"), rb.pop("wall_seconds")
        assert ra == rb


def test_shapecls_tiny_run_writes_metrics(tmp_path):
    path = tmp_path / "metrics.jsonl"
    result = tr.run_shapecls_training(SYM, TINY_BLOCKS, _tiny_spec("shapecls"),
                                      _tiny_optim(1), metrics_path=str(path))
    record = json.loads(path.read_text().splitlines()[0])
    assert set(record) == {"epoch", "train_loss", "val_acc", "wall_seconds"}
    assert 0.0 <= result["final_val_acc"] <= 1.0


def test_shapecls_needs_two_classes():
    spec = _tiny_spec("shapecls")
    spec.shapes = ("cube",)
    with pytest.raises(ValueError):
        tr.run_shapecls_training(SYM, TINY_BLOCKS, spec, _tiny_optim(1))


def test_eval_checkpoint_replays_final_val_acc(tmp_path):
    prefix = str(tmp_path / "model")
    spec = _tiny_spec()
    optim = _tiny_optim(2)
    result = tr.run_rotpair_training(SYM, TINY_BLOCKS, spec, optim,
                                     checkpoint_prefix=prefix)
    replay = tr.evaluate_checkpoint(SYM, TINY_BLOCKS, spec, optim, prefix)
    assert replay["val_acc"] == result["final_val_acc"]


def test_classification_loss_invariant_under_group_rotation():
    # The class-logit cross entropy must not change when the input cloud is
    # rotated by a group element (scores are maximized over rotations).
    rng = np.random.default_rng(12)
    spec = _tiny_spec("shapecls")
    model = tr.build_model(SYM, TINY_BLOCKS, "shapecls", spec, _tiny_optim(), rng)
    model.set_training(False)
    clouds, labels, _ = tr.make_shapecls_samples(np.random.default_rng(13), SYM,
                                                 spec, 3)
    def ce_loss(cs):
        f = tr.backbone_descriptor(model.backbone, cs)
        return tr.cross_entropy(model.head.class_logits(f), labels).item()

    base = ce_loss(clouds)
    for g in np.random.default_rng(14).integers(0, 60, size=3):
        rot = SYM.group.elements[int(g)]
        assert abs(ce_loss([c @ rot.T for c in clouds]) - base) < 1e-9
