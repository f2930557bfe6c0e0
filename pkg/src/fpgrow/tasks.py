"""Synthetic integer-token tasks used as stand-ins for real benchmarks.

Token layout: ids 0..3 are per-task separators, task alphabets start at
``alphabet_offset``. Sequence formats (answer spans marked with |..|)::

    copy_reverse   x1 .. xL SEP |y1 .. yL|     y = reversed x
    modular_arith  x1 .. xL SEP |y1 .. yL|     op=prefix_sum: y_t = (y_{t-1} + x_{L+1-t}) mod m
                                               op=shift:      y_t = (x_{L+1-t} + shift) mod m
    modular_arith  SEP x0 |y1 .. yL|           op=progression: y_t = (y_{t-1} + shift) mod m, y_0 = x0
    modular_arith  SEP x1 |y1| .. xL |yL|      op=pointwise:   y_t = (x_t + shift) mod m
    kv_recall      SEP k1 v1 .. kn vn kq |vq|
    assoc_mapping  SEP x1 f(x1) .. xn f(xn) xq |f(xq)|   f drawn from a fixed family

Train and eval instances are separated by a hash partition of the token
sequence, so the two sets can never share an instance.
"""

import zlib
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, InputError
from .linalg import Rng
from .transformer import Batch

COPY_REVERSE = "copy_reverse"
MODULAR_ARITH = "modular_arith"
KV_RECALL = "kv_recall"
ASSOC_MAPPING = "assoc_mapping"
KINDS = (COPY_REVERSE, MODULAR_ARITH, KV_RECALL, ASSOC_MAPPING)
SEPARATOR = {COPY_REVERSE: 0, MODULAR_ARITH: 1, KV_RECALL: 2, ASSOC_MAPPING: 3}
N_SPECIAL = 4
EVAL_BUCKETS = 8
ARITH_OPS = ("prefix_sum", "shift", "progression", "pointwise")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    alphabet_size: int
    seq_len: int
    alphabet_offset: int = N_SPECIAL
    op: str = "prefix_sum"
    shift: int = 1
    n_maps: int = 2
    map_seed: int = 0
    train_seed: int = 1
    eval_seed: int = 2
    n_eval: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.alphabet_size < 2 or self.seq_len < 1:
            raise ConfigError("alphabet_size must be >= 2 and seq_len >= 1")
        if self.op not in ARITH_OPS:
            raise ConfigError(f"unknown modular_arith op {self.op!r}")
        if self.alphabet_offset < N_SPECIAL:
            raise ConfigError(f"alphabet_offset must be >= {N_SPECIAL}")
        if self.kind in (KV_RECALL, ASSOC_MAPPING):
            if self.seq_len < 2:
                raise ConfigError("in-context tasks need at least 2 demonstrations")
            if self.seq_len + 1 > self.alphabet_size:
                raise ConfigError("in-context tasks draw distinct inputs: seq_len + 1 <= alphabet_size")

    @property
    def vocab_needed(self):
        return self.alphabet_offset + self.alphabet_size

    @property
    def sequence_length(self):
        """Length of the full sequence (model input is one shorter)."""
        if self.kind == MODULAR_ARITH and self.op == "progression":
            return self.seq_len + 2
        if self.kind == MODULAR_ARITH and self.op == "pointwise":
            return 2 * self.seq_len + 1
        if self.kind in (COPY_REVERSE, MODULAR_ARITH):
            return 2 * self.seq_len + 1
        return 2 * self.seq_len + 3

    @property
    def answer_length(self):
        return self.seq_len if self.kind in (COPY_REVERSE, MODULAR_ARITH) else 1

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)

    def maps(self):
        """The family of permutations used by assoc_mapping, shape (n_maps, alphabet_size)."""
        r = Rng(self.map_seed).child("maps")
        return np.stack([r.child(i).permutation(self.alphabet_size) for i in range(self.n_maps)])


def _bucket(seq):
    return zlib.crc32(np.asarray(seq, dtype=np.int64).tobytes()) % EVAL_BUCKETS


def _one(spec, r, maps, map_index=None):
    A, L, off = spec.alphabet_size, spec.seq_len, spec.alphabet_offset
    sep = SEPARATOR[spec.kind]
    if spec.kind == COPY_REVERSE:
        x = r.integers(0, A, size=L)
        return np.concatenate([x + off, [sep], x[::-1] + off])
    if spec.kind == MODULAR_ARITH:
        x = r.integers(0, A, size=L)
        if spec.op == "prefix_sum":
            y = np.cumsum(x[::-1]) % A
        elif spec.op == "shift":
            y = (x[::-1] + spec.shift) % A
        elif spec.op == "pointwise":
            y = (x + spec.shift) % A
            return np.concatenate([[sep], np.stack([x, y], axis=1).reshape(-1) + off])
        else:
            x0 = r.integers(0, A)
            y = (x0 + spec.shift * np.arange(1, L + 1)) % A
            return np.concatenate([[sep, x0 + off], y + off])
        return np.concatenate([x + off, [sep], y + off])
    keys = r.permutation(A)[: L + 1]
    if spec.kind == KV_RECALL:
        vals = r.integers(0, A, size=L)
        q = r.integers(0, L)
        body = np.stack([keys[:L], vals], axis=1).reshape(-1)
        return np.concatenate([[sep], body + off, [keys[q] + off, vals[q] + off]])
    c = r.integers(0, spec.n_maps) if map_index is None else map_index
    f = maps[c]
    body = np.stack([keys[:L], f[keys[:L]]], axis=1).reshape(-1)
    return np.concatenate([[sep], body + off, [keys[L] + off, f[keys[L]] + off]])


def sample_sequences(spec, n, rng, split="train", map_index=None):
    """Draw ``n`` full sequences from one side of the train/eval partition."""
    if split not in ("train", "eval"):
        raise InputError(f"split must be train or eval, got {split!r}")
    maps = spec.maps() if spec.kind == ASSOC_MAPPING else None
    out = []
    while len(out) < n:
        s = _one(spec, rng, maps, map_index)
        is_eval = _bucket(s) == 0
        if is_eval == (split == "eval"):
            out.append(s)
    return np.stack(out).astype(np.int64)


def answer_mask(spec, n):
    """Weights over model-input positions that predict the answer span."""
    w = np.zeros((n, spec.sequence_length - 1))
    if spec.kind == MODULAR_ARITH and spec.op == "pointwise":
        # targets y_t sit at sequence index 2t, predicted from input index 2t - 1
        w[:, 1::2] = 1.0
    else:
        w[:, -spec.answer_length:] = 1.0
    return w


def to_batch(spec, seqs, loss_span="answer"):
    seqs = np.asarray(seqs)
    if loss_span == "answer":
        w = answer_mask(spec, len(seqs))
    elif loss_span == "full":
        w = np.ones((len(seqs), seqs.shape[1] - 1))
    else:
        raise ConfigError(f"loss_span must be 'answer' or 'full', got {loss_span!r}")
    return Batch(seqs[:, :-1], seqs[:, 1:], w)


class TrainStream:
    """Deterministic stream of training batches for one task."""

    def __init__(self, spec, batch_size, loss_span="answer", seed_offset=0):
        self.spec = spec
        self.batch_size = batch_size
        self.loss_span = loss_span
        self.rng = Rng(spec.train_seed).child("train").child(seed_offset)

    def next(self):
        seqs = sample_sequences(self.spec, self.batch_size, self.rng.gen, "train")
        return to_batch(self.spec, seqs, self.loss_span)


def eval_set(spec):
    seqs = sample_sequences(spec, spec.n_eval, Rng(spec.eval_seed).child("eval").gen, "eval")
    return to_batch(spec, seqs, "answer")


@dataclass
class IclPrompt:
    """In-context prompt: demonstrations, a query and its answer."""

    demos: list  # [(input_tokens, output_tokens)]
    query: np.ndarray
    answer: np.ndarray
    separator: int
    corrupted: bool = False

    def __post_init__(self):
        if len(self.demos) < 2:
            raise InputError("an ICL prompt needs at least 2 demonstrations")

    def tokens(self):
        parts = [[self.separator]]
        for x, y in self.demos:
            parts.append(x)
            parts.append(y)
        parts.append(self.query)
        return np.concatenate([np.asarray(p, dtype=np.int64) for p in parts])

    def corrupt(self, rng):
        """Label-deranged copy: no demonstration keeps its own output."""
        n = len(self.demos)
        perm = derangement(n, rng)
        demos = [(self.demos[i][0], self.demos[perm[i]][1]) for i in range(n)]
        return IclPrompt(demos, self.query, self.answer, self.separator, corrupted=True)


def derangement(n, rng):
    """Uniform random permutation with no fixed point (rejection sampling)."""
    if n < 2:
        raise InputError("derangement needs n >= 2")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def icl_prompts(spec, n, seed=0, map_index=0, split="eval"):
    """Clean in-context prompts for one task (one fixed map for assoc_mapping)."""
    if spec.kind not in (KV_RECALL, ASSOC_MAPPING):
        raise InputError(f"{spec.kind} is not an in-context task")
    seqs = sample_sequences(spec, n, Rng(seed).child("icl").gen,
                            split, map_index if spec.kind == ASSOC_MAPPING else None)
    sep = SEPARATOR[spec.kind]
    prompts = []
    for s in seqs:
        body = s[1:-2].reshape(-1, 2)
        demos = [(body[i, :1], body[i, 1:]) for i in range(len(body))]
        prompts.append(IclPrompt(demos, s[-2:-1], s[-1:], sep))
    return prompts


def zero_shot_tokens(prompt):
    """Separator and query only, no demonstrations."""
    return np.concatenate([[prompt.separator], prompt.query]).astype(np.int64)
