import math

import numpy as np
import pytest

from conftest import rand_params
from fpgrow.errors import ConfigError, ConvergenceError, PlanError, StructureError
from fpgrow.growth import FreezeMask, GrowthPlan, grow_model
from fpgrow.linalg import Rng
from fpgrow.tasks import TaskSpec
from fpgrow.training import (
    Adam, RunLog, TrainConfig, accuracy, convergence_step, finetune, layer_scores, pretrain,
    select_layers, sweep_n_layers,
)
from fpgrow.transformer import ModelConfig, ModelParams, greedy_decode


def scalar_adam(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    theta = list(theta)
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta


class _Toy:
    """Three-parameter quadratic packed into a ModelParams-like container."""

    def __init__(self, x):
        self.tensors = {"t": np.array(x, dtype=np.float64)}

    def items(self):
        return self.tensors.items()

    def __getitem__(self, k):
        return self.tensors[k]


def toy_grad(theta):
    a, b, c = theta
    return [2 * (a - 1) + b, a + 4 * (b + 2) * (b + 2) * (b + 2), 2 * c * math.cos(c)]


def test_adam_matches_scalar_reference():
    start = [0.3, -1.0, 2.0]
    ref = scalar_adam(start, toy_grad, 200, lr=1e-2)
    p = _Toy(start)
    opt = Adam(p, lr=1e-2)
    for _ in range(200):
        opt.step(p, {"t": np.array(toy_grad(list(p["t"])))})
    assert np.allclose(p["t"], ref, rtol=0, atol=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"steps": 5, "momentum": 0.9})
    c = TrainConfig(steps=7)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_runlog_csv_round_trip():
    log = RunLog()
    log.add(0, 0.0, 1.0, 2.5)
    log.add(10, 0.5, None, 1.25)
    text = log.to_csv()
    assert text.splitlines()[0] == "step,new_acc,old_acc,train_loss"
    assert "\r" not in text and text.endswith("\n")
    back = RunLog.from_csv(text)
    assert back.records == log.records
    with pytest.raises(ValueError):
        log.add(10, 0, 0, 0)


@pytest.fixture(scope="module")
def copy_task():
    return TaskSpec("copy_reverse", 16, 8)


@pytest.fixture(scope="module")
def pretrained(copy_task):
    mc = ModelConfig.uniform(2, 32, 64, 4, 20, 16, seed=0)
    cfg = TrainConfig(steps=3000, eval_every=100, loss_span="full")
    return pretrain(cfg, copy_task, mc)


def test_pretrain_reaches_threshold(pretrained, copy_task):
    params, log = pretrained
    assert log.final["new_acc"] >= 0.95
    assert log.final["step"] <= 3000
    assert accuracy(params, __import__("fpgrow.tasks", fromlist=["eval_set"]).eval_set(copy_task)) >= 0.95


def test_teacher_forced_accuracy_equals_greedy(pretrained, copy_task):
    from fpgrow.tasks import eval_set
    params, _ = pretrained
    ev = eval_set(copy_task)
    L = copy_task.answer_length
    prompt = ev.tokens[:, : ev.tokens.shape[1] - L + 1]
    dec = greedy_decode(params, prompt, L)
    answers = np.concatenate([ev.tokens, ev.targets[:, -1:]], axis=1)[:, -L:]
    greedy_acc = float(np.mean(np.all(dec[:, -L:] == answers, axis=1)))
    assert greedy_acc == accuracy(params, ev)


def test_pretrain_deterministic(copy_task):
    mc = ModelConfig.uniform(1, 16, 32, 2, 20, 16, seed=4)
    cfg = TrainConfig(steps=20, eval_every=10, target_accuracy=0.0)
    a, la = pretrain(cfg, copy_task, mc)
    b, lb = pretrain(cfg, copy_task, mc)
    assert a.bit_equal(b) and la.to_csv() == lb.to_csv()


def test_pretrain_convergence_error(copy_task):
    mc = ModelConfig.uniform(1, 16, 32, 2, 20, 16)
    with pytest.raises(ConvergenceError) as ei:
        pretrain(TrainConfig(steps=3, eval_every=3), copy_task, mc)
    assert 0.0 <= ei.value.final_accuracy < 0.95


def test_full_freeze_finetune_is_noop(pretrained, copy_task):
    params, _ = pretrained
    new = TaskSpec("modular_arith", 8, 8, alphabet_offset=12)
    mask = FreezeMask.uniform(params, trainable=False)
    out, log = finetune(params, mask, TrainConfig(steps=20, eval_every=10), new, copy_task)
    assert out.bit_equal(params)
    assert len(set(log.column("new_acc"))) == 1
    assert len(set(log.column("old_acc"))) == 1


def test_finetune_mask_mismatch(pretrained, copy_task):
    params, _ = pretrained
    g, mask, _ = grow_model(params, GrowthPlan(2), Rng(0))
    with pytest.raises(StructureError):
        finetune(params, mask, TrainConfig(steps=1), copy_task)


def test_gfreeze_frozen_bits_stable_through_training(pretrained, copy_task):
    params, _ = pretrained
    g, mask, _ = grow_model(params, GrowthPlan(2), Rng(0))
    before = mask.frozen_digest(g)
    new = TaskSpec("modular_arith", 8, 8, alphabet_offset=12)
    out, _ = finetune(g, mask, TrainConfig(steps=40, eval_every=20), new, copy_task)
    assert mask.frozen_digest(out) == before
    assert mask.frozen_digest(g) == before


def test_select_layers_ties_and_single_perturbation():
    cfg = ModelConfig.uniform(5, 8, 16, 2, 10, 6)
    a = rand_params(cfg, 0)
    assert select_layers(a, a, 3) == [0, 1, 2]
    b = a.copy()
    b.tensors["layers.3.mlp.w1"][0, 0] += 1.0
    assert select_layers(a, b, 1) == [3]
    with pytest.raises(PlanError):
        select_layers(a, a, 6)
    with pytest.raises(StructureError):
        select_layers(a, rand_params(ModelConfig.uniform(5, 8, 17, 2, 10, 6), 0), 1)


def test_select_layers_norm_oracle():
    cfg = ModelConfig.uniform(4, 8, 16, 2, 10, 6)
    a = rand_params(cfg, 0)
    b = a.copy()
    mags = [0.3, 2.0, 0.7, 1.1]
    r = Rng(5)
    for i, m in enumerate(mags):
        for t in ("mlp.w1", "mlp.b2"):
            name = f"layers.{i}.{t}"
            b.tensors[name] = b.tensors[name] + m * r.child(name).normal(b[name].shape)
    hand = []
    for i in range(4):
        sq = sum(float(np.sum((b[f"layers.{i}.{t}"] - a[f"layers.{i}.{t}"]) ** 2))
                 for t in ("mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"))
        hand.append(math.sqrt(sq))
    assert np.allclose(layer_scores(a, b), hand, rtol=1e-12)
    assert select_layers(a, b, 4) == sorted(range(4), key=lambda i: -hand[i])


def test_sweep_errors_and_full_set(pretrained, copy_task):
    params, _ = pretrained
    new = TaskSpec("modular_arith", 8, 8, alphabet_offset=12)
    cfg = TrainConfig(steps=20, eval_every=10)
    with pytest.raises(PlanError):
        sweep_n_layers(params, [0], GrowthPlan(), new, copy_task, cfg)
    with pytest.raises(PlanError):
        sweep_n_layers(params, [3], GrowthPlan(), new, copy_task, cfg)
    logs, ranking = sweep_n_layers(params, [2], GrowthPlan(), new, copy_task, cfg)
    assert logs[0].tag["layers"] == [0, 1]
    assert sorted(ranking) == [0, 1]
    g, m, _ = grow_model(params, GrowthPlan(2, "all"), Rng(cfg.seed).child("grow.2"))
    _, ref = finetune(g, m, cfg, new, copy_task)
    assert logs[0].to_csv() == ref.to_csv()


def test_convergence_step():
    steps = list(range(0, 1001, 100))
    losses = [10.0 / (1 + s / 100) for s in steps[:6]] + [10.0 / 6] * 5
    assert convergence_step(steps, losses, window=200) == 700
    assert convergence_step([0, 100], [3.0, 1.0], window=200) == 100


def test_sweep_accuracy_non_decreasing_in_n(pretrained, copy_task):
    params, _ = pretrained
    new = TaskSpec("modular_arith", 16, 8, op="shift", shift=5)
    cfg = TrainConfig(steps=300, eval_every=100)
    logs, _ = sweep_n_layers(params, [1, 2], GrowthPlan(), new, copy_task, cfg)
    accs = [log.final["new_acc"] for log in logs]
    assert accs[1] >= accs[0] - 0.03, accs
