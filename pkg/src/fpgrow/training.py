"""Masked Adam fine-tuning, pre-training on synthetic tasks, and layer selection."""

import csv
import io
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ConvergenceError, PlanError, StructureError
from .growth import FreezeMask, GrowthPlan, grow_model
from .linalg import Rng
from .tasks import TrainStream, eval_set
from .transformer import MLP_TENSORS, forward, init_params, log_softmax, loss_and_grads

RUNLOG_COLUMNS = ("step", "new_acc", "old_acc", "train_loss")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 1000
    eval_every: int = 100
    seed: int = 0
    loss_span: str = "answer"
    target_accuracy: float = 0.95
    dtype: str = "float32"
    checkpoint_every: int = 0
    init_tok_scale: float = 1.0
    init_pos_scale: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.loss_span not in ("answer", "full"):
            raise ConfigError("loss_span must be 'answer' or 'full'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    """Adam with bias correction; only mask-trainable coordinates are ever written."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, mask=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.mask = mask
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            idx = (tuple(slice(None) for _ in p.shape) if self.mask is None
                   else self.mask.trainable_index(name, p.shape))
            if idx is None:
                continue
            g = grads[name][idx]
            m = self.m[name]
            v = self.v[name]
            m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * g
            v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * (g * g)
            mhat = m[idx] / c1
            vhat = v[idx] / c2
            p[idx] -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


@dataclass
class RunLog:
    records: list = field(default_factory=list)  # dicts keyed by RUNLOG_COLUMNS
    tag: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)  # [(step, ModelParams)]

    def add(self, step, new_acc, old_acc, train_loss):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("RunLog steps must increase")
        self.records.append({"step": int(step), "new_acc": new_acc,
                             "old_acc": old_acc, "train_loss": train_loss})

    @property
    def final(self):
        return self.records[-1]

    def column(self, name):
        return [r[name] for r in self.records]

    def at_step(self, step):
        for r in self.records:
            if r["step"] == step:
                return r
        raise KeyError(step)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RUNLOG_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r[c]) for c in RUNLOG_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != RUNLOG_COLUMNS:
            raise ValueError(f"RunLog CSV header must be {','.join(RUNLOG_COLUMNS)}")
        log = cls()
        for row in rows[1:]:
            step, new, old, loss = row
            log.add(int(step), _parse(new), _parse(old), _parse(loss))
        return log


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _parse(s):
    return None if s == "" else float(s)


def accuracy(params, batch, chunk=128):
    """Exact-match accuracy of greedy decoding on the answer span.

    Scored with one teacher-forced pass: greedy decoding reproduces the target
    span iff the argmax is correct at every answer position, because until the
    first miss the decoded prefix equals the teacher-forced one.
    """
    correct = 0
    n = len(batch)
    for s in range(0, n, chunk):
        logits, _ = forward(params, batch.tokens[s:s + chunk])
        pred = logits.argmax(axis=-1)
        w = batch.weights[s:s + chunk] > 0
        ok = np.where(w, pred == batch.targets[s:s + chunk], True).all(axis=1)
        correct += int(ok.sum())
    return correct / n


def eval_loss(params, batch, chunk=128):
    total = 0.0
    count = 0.0
    for s in range(0, len(batch), chunk):
        logits, _ = forward(params, batch.tokens[s:s + chunk])
        lsm = log_softmax(logits.astype(np.float64))
        nll = -np.take_along_axis(lsm, batch.targets[s:s + chunk, :, None], axis=-1)[..., 0]
        w = batch.weights[s:s + chunk]
        total += float((nll * w).sum())
        count += float(w.sum())
    return total / count


def _train(params, mask, config, task, task_old, stop_at_target=False, stream_offset=0):
    train = TrainStream(task, config.batch_size, config.loss_span, seed_offset=config.seed + stream_offset)
    ev_new = eval_set(task)
    ev_old = eval_set(task_old) if task_old is not None else None
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps, mask)
    log = RunLog()

    def record(step, losses):
        new_acc = accuracy(params, ev_new)
        old_acc = accuracy(params, ev_old) if ev_old is not None else None
        log.add(step, new_acc, old_acc, float(np.mean(losses)))
        return new_acc

    batch = train.next()
    loss, grads = loss_and_grads(params, batch, mask)
    record(0, [loss])
    losses = []
    for step in range(1, config.steps + 1):
        if step > 1:
            batch = train.next()
            loss, grads = loss_and_grads(params, batch, mask)
        losses.append(loss)
        opt.step(params, grads)
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            log.checkpoints.append((step, params.copy()))
        if step % config.eval_every == 0 or step == config.steps:
            acc = record(step, losses)
            losses = []
            if stop_at_target and acc >= config.target_accuracy:
                break
    return params, log


def pretrain(config, task_old, model_config):
    """Train a fresh model on ``task_old`` until it reaches ``config.target_accuracy``."""
    if model_config.vocab_size < task_old.vocab_needed:
        raise ConfigError(f"vocab_size {model_config.vocab_size} < {task_old.vocab_needed} needed")
    if model_config.max_seq_len < task_old.sequence_length - 1:
        raise ConfigError("max_seq_len too short for the task")
    params = init_params(model_config, Rng(model_config.seed).child("init"), dtype=np.dtype(config.dtype),
                         tok_scale=config.init_tok_scale, pos_scale=config.init_pos_scale)
    params, log = _train(params, None, config, task_old, None, stop_at_target=True)
    final = log.final["new_acc"]
    if final < config.target_accuracy:
        raise ConvergenceError(
            f"pretraining reached accuracy {final:.3f} < target {config.target_accuracy}", final)
    return params, log


def finetune(params, mask, config, task_new, task_old=None):
    """Adam on ``task_new`` with optional freeze mask; the input params are not modified."""
    if mask is not None:
        mask.validate(params)
    params = params.astype(np.dtype(config.dtype)) if params.dtype != np.dtype(config.dtype) else params.copy()
    return _train(params, mask, config, task_new, task_old)


def layer_scores(before, after):
    """Frobenius norm of the MLP weight change of every layer."""
    if before.config.shapes() != after.config.shapes():
        raise StructureError("before/after parameter shapes differ")
    scores = []
    for i in range(before.config.n_layers):
        sq = 0.0
        for t in MLP_TENSORS:
            d = after.layer(i, t).astype(np.float64) - before.layer(i, t).astype(np.float64)
            sq += float(np.sum(d * d))
        scores.append(math.sqrt(sq))
    return scores


def select_layers(before, after, top_n):
    """Indices of the ``top_n`` layers with the largest MLP update, ties to lower index."""
    n = before.config.n_layers
    if not 0 <= top_n <= n:
        raise PlanError(f"top_n must be in [0, {n}], got {top_n}")
    scores = layer_scores(before, after)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return order[:top_n]


def preliminary_steps(config, fraction=0.1):
    return max(1, int(round(config.steps * fraction)))


def sweep_n_layers(base_params, n_values, plan, task_new, task_old, config, rng=None,
                   preliminary_fraction=0.1):
    """One grown fine-tuning run per N using the top-N layers of a short SFT run.

    Returns ``(logs, selected)`` where ``logs[i].tag`` carries the N and layer set.
    """
    n_layers = base_params.config.n_layers
    for n in n_values:
        if n < 1:
            raise PlanError("growth requires a non-empty layer set (N >= 1)")
        if n > n_layers:
            raise PlanError(f"N={n} exceeds the {n_layers} model layers")
    rng = rng or Rng(config.seed)
    pre_cfg = TrainConfig(**{**config.to_dict(), "steps": preliminary_steps(config, preliminary_fraction),
                             "checkpoint_every": 0})
    probe, _ = finetune(base_params, None, pre_cfg, task_new, None)
    ranking = select_layers(base_params, probe, n_layers)
    logs = []
    for n in n_values:
        layers = sorted(ranking[:n])
        p = GrowthPlan(plan.k, tuple(layers), plan.strategy, plan.initializer, plan.noise_scale)
        grown, mask, receipt = grow_model(base_params, p, rng.child(f"grow.{n}"))
        _, log = finetune(grown, mask, config, task_new, task_old)
        log.tag = {"n": n, "layers": layers, "trainable_params": receipt.trainable_params}
        logs.append(log)
    return logs, ranking


def convergence_step(steps, losses, window=200, rel_improvement=0.01):
    """First step whose loss improved by less than ``rel_improvement`` over the previous ``window`` steps."""
    for s, l in zip(steps, losses):
        past = [l0 for s0, l0 in zip(steps, losses) if s0 <= s - window]
        if past:
            ref = past[-1]
            if ref - l < rel_improvement * abs(ref):
                return s
    return steps[-1]
