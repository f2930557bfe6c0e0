"""Effective-rank traces of up-projection updates and the function-vector pipeline."""

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import InputError, StructureError, ZeroVectorError
from .linalg import EFFECTIVE_RANK_FORMULA, effective_rank_from_singular_values, singular_values
from .tasks import zero_shot_tokens
from .transformer import forward, softmax


@dataclass
class RankTrace:
    """Effective rank of W1_t - W1_{t-1} per (interval, layer); NaN marks a zero update."""

    values: np.ndarray
    zero_update: np.ndarray
    steps: list

    @property
    def shape(self):
        return self.values.shape

    def to_csv(self):
        n_layers = self.values.shape[1]
        lines = [",".join(["interval"] + [f"layer_{i}" for i in range(n_layers)])]
        for t, row in enumerate(self.values):
            cells = ["ZERO" if z else repr(float(v)) for v, z in zip(row, self.zero_update[t])]
            lines.append(",".join([str(t)] + cells))
        return "\n".join(lines) + "\n"

    def sidecar(self):
        return {
            "tool_version": __version__,
            "formula": EFFECTIVE_RANK_FORMULA,
            "tensor": "mlp.w1",
            "steps": [int(s) for s in self.steps],
            "intervals": [[int(a), int(b)] for a, b in zip(self.steps[:-1], self.steps[1:])],
        }


def rank_trace(checkpoints, steps=None):
    if len(checkpoints) < 2:
        raise InputError("rank_trace needs at least two checkpoints")
    shapes = checkpoints[0].config.shapes()
    for c in checkpoints[1:]:
        if c.config.shapes() != shapes:
            raise StructureError("checkpoint shapes drift between checkpoints")
    steps = list(range(len(checkpoints))) if steps is None else list(steps)
    if len(steps) != len(checkpoints):
        raise InputError("one step label per checkpoint")
    n_layers = checkpoints[0].config.n_layers
    T = len(checkpoints) - 1
    values = np.full((T, n_layers), np.nan)
    zero = np.zeros((T, n_layers), dtype=bool)
    for t in range(T):
        for n in range(n_layers):
            d = (checkpoints[t + 1].layer(n, "mlp.w1").astype(np.float64)
                 - checkpoints[t].layer(n, "mlp.w1").astype(np.float64))
            s = singular_values(d)
            if not s[0] > 0:
                zero[t, n] = True
                continue
            values[t, n] = effective_rank_from_singular_values(s)
    return RankTrace(values, zero, steps)


def _stack_prompts(prompts):
    toks = [p.tokens() for p in prompts]
    if len({len(t) for t in toks}) != 1:
        raise InputError("all prompts in a set must have the same length")
    return np.stack(toks)


def head_activations(model, prompts):
    """Residual-space output of every head at the final position, shape (P, L, H, h)."""
    model = _as64(model)
    _, tr = forward(model, _stack_prompts(prompts), capture=True)
    return np.stack([c[:, :, -1, :] for c in tr.head_out], axis=1)


def mean_clean_activations(model, prompts):
    """Mean over clean prompts of each head's final-position contribution, shape (L, H, h)."""
    if not prompts:
        raise InputError("no prompts given")
    if any(p.corrupted for p in prompts):
        raise InputError("mean_clean_activations takes clean prompts only")
    return head_activations(model, prompts).mean(axis=0)


def _as64(model):
    return model if model.dtype == np.float64 else model.astype(np.float64)


def answer_probability(model, prompts, patch=None, inject=None):
    """Probability of each prompt's (first) answer token at the final position."""
    model = _as64(model)
    logits, _ = forward(model, _stack_prompts(prompts), patch=patch, inject=inject)
    probs = softmax(logits[:, -1, :])
    ans = np.array([p.answer[0] for p in prompts])
    return probs[np.arange(len(prompts)), ans]


def causal_indirect_effect(model, clean_means, corrupted_prompts, head):
    """Mean gain in answer probability from patching one head with its clean mean."""
    l, j = head
    cfg = model.config
    if not (0 <= l < cfg.n_layers and 0 <= j < cfg.n_heads):
        raise InputError(f"head {head} out of range")
    if not corrupted_prompts:
        raise InputError("no corrupted prompts given")
    base = answer_probability(model, corrupted_prompts)
    patched = answer_probability(model, corrupted_prompts, patch={(l, j): clean_means[l, j]})
    return float(np.mean(patched - base))


def cie_scores(model, clean_means, corrupted_prompts):
    cfg = model.config
    base = answer_probability(model, corrupted_prompts)
    out = np.zeros((cfg.n_layers, cfg.n_heads))
    for l in range(cfg.n_layers):
        for j in range(cfg.n_heads):
            patched = answer_probability(model, corrupted_prompts, patch={(l, j): clean_means[l, j]})
            out[l, j] = np.mean(patched - base)
    return out


def rank_heads(scores):
    """(layer, head) pairs by descending score, ties to lower layer then lower head."""
    L, H = scores.shape
    return sorted(((l, j) for l in range(L) for j in range(H)), key=lambda lj: (-scores[lj], lj))


@dataclass
class FunctionVector:
    task: str
    heads: list  # [(layer, head, cie)] in rank order
    vector: np.ndarray
    k_top: int = field(init=False)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        self.k_top = len(self.heads)

    @property
    def head_set(self):
        return {(l, j) for l, j, _ in self.heads}

    def to_dict(self):
        return {
            "tool_version": __version__,
            "task": self.task,
            "k_top": self.k_top,
            "hidden_dim": int(self.vector.shape[0]),
            "heads": [{"layer": int(l), "head": int(j), "cie": float(c)} for l, j, c in self.heads],
            "vector_b64": base64.b64encode(self.vector.astype("<f8").tobytes()).decode("ascii"),
        }

    @classmethod
    def from_dict(cls, d):
        vec = np.frombuffer(base64.b64decode(d["vector_b64"]), dtype="<f8").copy()
        if vec.shape[0] != d["hidden_dim"]:
            raise StructureError("vector length does not match hidden_dim")
        heads = [(h["layer"], h["head"], h["cie"]) for h in d["heads"]]
        if len(heads) != d["k_top"]:
            raise StructureError("head list length does not match k_top")
        return cls(d["task"], heads, vec)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def build_function_vector(model, prompts, k_top=10, corrupted=None, rng=None, task=""):
    """Causal heads by CIE and the sum of their clean mean activations."""
    cfg = model.config
    total = cfg.n_layers * cfg.n_heads
    if not 1 <= k_top <= total:
        raise InputError(f"k_top must be in [1, {total}], got {k_top}")
    means = mean_clean_activations(model, prompts)
    if corrupted is None:
        if rng is None:
            raise InputError("need corrupted prompts or an rng to make them")
        corrupted = [p.corrupt(rng.child(i).gen) for i, p in enumerate(prompts)]
    scores = cie_scores(model, means, corrupted)
    top = rank_heads(scores)[:k_top]
    vec = np.zeros(cfg.hidden_dim)
    for l, j in sorted(top):
        vec = vec + means[l, j]
    return FunctionVector(task, [(l, j, float(scores[l, j])) for l, j in top], vec)


def fv_similarity(fv_base, fv_tuned):
    """(number of shared causal heads, cosine similarity of the vectors)."""
    a, b = fv_base.vector, fv_tuned.vector
    if a.shape != b.shape:
        raise StructureError("function vectors have different dimensions")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVectorError("cosine of a zero function vector")
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return len(fv_base.head_set & fv_tuned.head_set), cos


def fv_intervention(model, prompts, fv, layer):
    """Zero-shot accuracy without and with the FV added at ``layer``'s attention output."""
    model = _as64(model)
    toks = np.stack([zero_shot_tokens(p) for p in prompts])
    ans = np.array([p.answer[0] for p in prompts])
    base, _ = forward(model, toks)
    inj, _ = forward(model, toks, inject={layer: fv.vector})
    return float(np.mean(base[:, -1].argmax(-1) == ans)), float(np.mean(inj[:, -1].argmax(-1) == ans))
