"""Minimal decoder-only transformer with post-LN blocks and a hand-written backward pass.

Each layer computes ``x = LN1(x + MHA(x))`` then ``x = LN2(x + MLP(x))`` where
``MLP(x) = ReLU(x @ w1 + b1) @ w2 + b2``. Attention is causal, positions are
learned absolute embeddings and the output head is untied from the token
embedding.

Per-head attention outputs are kept in residual space (``z_j @ wo_j``) and
summed explicitly, so patching a head or reading its contribution uses the
exact same arithmetic as the unpatched forward pass.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, InputError, NumericError, StructureError

LN_EPS = 1e-5

_LAYER_TENSORS = (
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "ln1.g", "ln1.b",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
    "ln2.g", "ln2.b",
)
MLP_TENSORS = ("mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden_dim: int
    mlp_dims: tuple
    n_heads: int
    head_dim: int
    vocab_size: int
    max_seq_len: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp_dims", tuple(int(p) for p in self.mlp_dims))
        if self.n_layers < 1:
            raise StructureError("n_layers must be >= 1")
        if self.n_heads * self.head_dim != self.hidden_dim:
            raise StructureError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} != hidden_dim {self.hidden_dim}"
            )
        if len(self.mlp_dims) != self.n_layers:
            raise StructureError(f"need {self.n_layers} mlp dims, got {len(self.mlp_dims)}")
        if min(self.mlp_dims) < 1:
            raise StructureError("every mlp dim must be >= 1")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise StructureError("vocab_size and max_seq_len must be >= 1")

    @classmethod
    def uniform(cls, n_layers, hidden_dim, mlp_dim, n_heads, vocab_size, max_seq_len, seed=0):
        return cls(
            n_layers=n_layers,
            hidden_dim=hidden_dim,
            mlp_dims=(mlp_dim,) * n_layers,
            n_heads=n_heads,
            head_dim=hidden_dim // n_heads,
            vocab_size=vocab_size,
            max_seq_len=max_seq_len,
            seed=seed,
        )

    def with_mlp_dims(self, mlp_dims):
        return replace(self, mlp_dims=tuple(mlp_dims))

    def to_dict(self):
        return {
            "n_layers": self.n_layers,
            "hidden_dim": self.hidden_dim,
            "mlp_dims": list(self.mlp_dims),
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "mlp_dim" in d:
            if "mlp_dims" in d:
                raise StructureError("give mlp_dim or mlp_dims, not both")
            d["mlp_dims"] = [d.pop("mlp_dim")] * int(d["n_layers"])
        if "head_dim" not in d and "n_heads" in d and "hidden_dim" in d:
            d["head_dim"] = int(d["hidden_dim"]) // int(d["n_heads"])
        allowed = {"n_layers", "hidden_dim", "mlp_dims", "n_heads", "head_dim",
                   "vocab_size", "max_seq_len", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise StructureError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def shapes(self):
        """Ordered mapping of tensor name to shape."""
        h, V, S = self.hidden_dim, self.vocab_size, self.max_seq_len
        out = {"embed.tok": (V, h), "embed.pos": (S, h)}
        for i, p in enumerate(self.mlp_dims):
            pre = f"layers.{i}."
            for n in ("wq", "wk", "wv", "wo"):
                out[pre + "attn." + n] = (h, h)
                out[pre + "attn.b" + n[1]] = (h,)
            out[pre + "ln1.g"] = (h,)
            out[pre + "ln1.b"] = (h,)
            out[pre + "mlp.w1"] = (h, p)
            out[pre + "mlp.b1"] = (p,)
            out[pre + "mlp.w2"] = (p, h)
            out[pre + "mlp.b2"] = (h,)
            out[pre + "ln2.g"] = (h,)
            out[pre + "ln2.b"] = (h,)
        out["final_ln.g"] = (h,)
        out["final_ln.b"] = (h,)
        out["head.w"] = (h, V)
        out["head.b"] = (V,)
        ordered = {}
        for name in _canonical_order(self.n_layers):
            ordered[name] = out[name]
        return ordered

    def param_count(self):
        return int(sum(int(np.prod(s)) for s in self.shapes().values()))


def _canonical_order(n_layers):
    names = ["embed.tok", "embed.pos"]
    for i in range(n_layers):
        names.extend(f"layers.{i}.{t}" for t in _LAYER_TENSORS)
    names.extend(["final_ln.g", "final_ln.b", "head.w", "head.b"])
    return names


@dataclass
class MlpWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        h, p = np.shape(self.w1)
        if np.shape(self.b1) != (p,) or np.shape(self.w2) != (p, h) or np.shape(self.b2) != (h,):
            raise DimensionError(
                f"inconsistent MLP shapes w1={np.shape(self.w1)} b1={np.shape(self.b1)} "
                f"w2={np.shape(self.w2)} b2={np.shape(self.b2)}"
            )

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    @property
    def mlp_dim(self):
        return self.w1.shape[1]


def mlp_forward(w, x):
    """``ReLU(x @ w1 + b1) @ w2 + b2`` for ``x`` of shape (..., h)."""
    x = np.asarray(x)
    if x.shape[-1] != w.hidden_dim:
        raise DimensionError(f"input width {x.shape[-1]} != hidden_dim {w.hidden_dim}")
    return np.maximum(x @ w.w1 + w.b1, 0.0) @ w.w2 + w.b2


class ModelParams:
    """All weights of a model, addressable by name or by (layer, tensor)."""

    def __init__(self, config, tensors):
        self.config = config
        shapes = config.shapes()
        if list(tensors) != list(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            if missing or extra:
                raise StructureError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            tensors = {k: tensors[k] for k in shapes}
        for name, shape in shapes.items():
            if tuple(tensors[name].shape) != shape:
                raise StructureError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def layer(self, i, tensor):
        return self.tensors[f"layers.{i}.{tensor}"]

    @property
    def dtype(self):
        return self.tensors["embed.tok"].dtype

    def mlp(self, i):
        return MlpWeights(*(self.layer(i, t) for t in MLP_TENSORS))

    def with_mlp(self, i, w):
        dims = list(self.config.mlp_dims)
        dims[i] = w.mlp_dim
        tensors = dict(self.tensors)
        for t, arr in zip(MLP_TENSORS, (w.w1, w.b1, w.w2, w.b2)):
            tensors[f"layers.{i}.{t}"] = np.asarray(arr, dtype=self.dtype)
        return ModelParams(self.config.with_mlp_dims(dims), tensors)

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self):
        return ModelParams(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def num_params(self):
        return int(sum(v.size for v in self.tensors.values()))

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def bit_equal(self, other):
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init_params(config, rng, dtype=np.float32, tok_scale=1.0, pos_scale=1.0):
    """Random initialization: N(0, 1/fan_in) matrices, N(0, scale^2) embeddings."""
    tensors = {}
    emb_scale = {"embed.tok": tok_scale, "embed.pos": pos_scale}
    for name, shape in config.shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if name in emb_scale:
            arr = rng.child(name).normal(shape, emb_scale[name])
        elif leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = rng.child(name).normal(shape, 1.0 / np.sqrt(shape[0]))
        tensors[name] = np.asarray(arr, dtype=dtype)
    return ModelParams(config, tensors)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _split_heads(t, H, d):
    B, s, _ = t.shape
    return t.reshape(B, s, H, d).transpose(0, 2, 1, 3)


@dataclass
class ForwardTrace:
    """Activations recorded during a forward pass.

    ``layers[i]`` holds the per-layer caches; ``head_out[i]`` is the
    residual-space contribution of every head, shape (B, H, s, h).
    """

    tokens: np.ndarray
    resid_in: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    head_out: list = field(default_factory=list)
    final_in: np.ndarray = None
    final_cache: tuple = None
    final_out: np.ndarray = None


def _check_tokens(config, tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise InputError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("tokens must be integers")
    if tokens.shape[1] < 1 or tokens.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {tokens.shape[1]} outside [1, {config.max_seq_len}]")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise InputError(f"token id outside [0, {config.vocab_size})")
    return tokens


def forward(params, tokens, capture=False, patch=None, inject=None, position=-1):
    """Logits for a batch of token sequences.

    ``tokens`` is (s,) or (B, s). ``patch`` maps (layer, head) to a residual-space
    vector (h,) or (B, h) that replaces that head's contribution at ``position``.
    ``inject`` maps a layer to a vector added to that layer's attention output at
    ``position``. Returns ``(logits, trace)``; ``trace`` is None unless ``capture``.
    """
    cfg = params.config
    tokens = _check_tokens(cfg, tokens)
    B, s = tokens.shape
    H, d = cfg.n_heads, cfg.head_dim
    P = params.tensors
    dt = params.dtype
    scale = dt.type(1.0 / np.sqrt(d))
    causal = np.triu(np.ones((s, s), dtype=bool), k=1)
    neg = dt.type(-np.inf)
    patch = patch or {}
    inject = inject or {}
    for (l, j) in patch:
        if not (0 <= l < cfg.n_layers and 0 <= j < H):
            raise InputError(f"head ({l}, {j}) out of range")

    x = P["embed.tok"][tokens] + P["embed.pos"][:s]
    trace = ForwardTrace(tokens=tokens) if capture else None
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        q = _split_heads(x @ P[pre + "attn.wq"] + P[pre + "attn.bq"], H, d)
        k = _split_heads(x @ P[pre + "attn.wk"] + P[pre + "attn.bk"], H, d)
        v = _split_heads(x @ P[pre + "attn.wv"] + P[pre + "attn.bv"], H, d)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(causal, neg, scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        z = att @ v  # (B, H, s, d)
        wo_h = P[pre + "attn.wo"].reshape(H, d, cfg.hidden_dim)
        contrib = z @ wo_h  # (B, H, s, h)
        for (l, j), vec in patch.items():
            if l == i:
                contrib[:, j, position, :] = vec
        attn_out = contrib.sum(axis=1) + P[pre + "attn.bo"]
        if i in inject:
            attn_out[:, position, :] += np.asarray(inject[i], dtype=dt)
        r1 = x + attn_out
        x1, ln1 = _layer_norm(r1, P[pre + "ln1.g"], P[pre + "ln1.b"])
        hpre = x1 @ P[pre + "mlp.w1"] + P[pre + "mlp.b1"]
        hact = np.maximum(hpre, 0)
        m = hact @ P[pre + "mlp.w2"] + P[pre + "mlp.b2"]
        r2 = x1 + m
        x2, ln2 = _layer_norm(r2, P[pre + "ln2.g"], P[pre + "ln2.b"])
        if capture:
            trace.resid_in.append(x)
            trace.head_out.append(contrib)
            trace.layers.append(dict(q=q, k=k, v=v, att=att, z=z, x1=x1, ln1=ln1,
                                     hpre=hpre, hact=hact, ln2=ln2))
        x = x2
    xf, lnf = _layer_norm(x, P["final_ln.g"], P["final_ln.b"])
    logits = xf @ P["head.w"] + P["head.b"]
    if capture:
        trace.final_in = x
        trace.final_cache = lnf
        trace.final_out = xf
    return logits, trace


def logits_from_trace(params, trace):
    """Recompute logits from the cached last-layer output."""
    xf, _ = _layer_norm(trace.final_in, params["final_ln.g"], params["final_ln.b"])
    return xf @ params["head.w"] + params["head.b"]


def log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class Batch:
    """Token inputs with per-position targets; ``weights`` selects scored positions."""

    tokens: np.ndarray
    targets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.targets = np.asarray(self.targets)
        self.weights = np.asarray(self.weights)
        if not (self.tokens.shape == self.targets.shape == self.weights.shape):
            raise InputError("tokens, targets and weights must share a shape")

    def __len__(self):
        return self.tokens.shape[0]


def loss_and_grads(params, batch, mask=None):
    """Mean cross-entropy over weighted positions and its gradient.

    The gradient is returned as a ModelParams-shaped object. With a freeze
    ``mask`` every frozen coordinate of the gradient is exactly zero.
    """
    if len(batch) == 0:
        raise InputError("empty batch")
    cfg = params.config
    P = params.tensors
    H, d, h = cfg.n_heads, cfg.head_dim, cfg.hidden_dim
    logits, tr = forward(params, batch.tokens, capture=True)
    dt = logits.dtype
    B, s, V = logits.shape
    lsm = log_softmax(logits)
    w = batch.weights.astype(dt)
    total = w.sum()
    if total <= 0:
        raise InputError("batch has no scored positions")
    nll = -np.take_along_axis(lsm, batch.targets[..., None], axis=-1)[..., 0]
    per_example = (nll * w).sum(axis=1)
    loss = float(per_example.sum() / total)
    if not np.isfinite(loss):
        bad = int(np.flatnonzero(~np.isfinite(per_example))[0]) if not np.all(np.isfinite(per_example)) else 0
        raise NumericError(f"non-finite loss in batch element {bad}", batch_index=bad)

    g = {name: None for name in P}
    dlogits = np.exp(lsm)
    np.put_along_axis(dlogits, batch.targets[..., None],
                      np.take_along_axis(dlogits, batch.targets[..., None], axis=-1) - 1, axis=-1)
    dlogits *= (w / total)[..., None]

    xf = tr.final_out
    g["head.w"] = xf.reshape(-1, h).T @ dlogits.reshape(-1, V)
    g["head.b"] = dlogits.sum(axis=(0, 1))
    dxf = dlogits @ P["head.w"].T
    dx, g["final_ln.g"], g["final_ln.b"] = _layer_norm_back(dxf, P["final_ln.g"], tr.final_cache)

    scale = dt.type(1.0 / np.sqrt(d))
    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        c = tr.layers[i]
        # LN2 and MLP
        dr2, g[pre + "ln2.g"], g[pre + "ln2.b"] = _layer_norm_back(dx, P[pre + "ln2.g"], c["ln2"])
        p = P[pre + "mlp.w1"].shape[1]
        g[pre + "mlp.w2"] = c["hact"].reshape(-1, p).T @ dr2.reshape(-1, h)
        g[pre + "mlp.b2"] = dr2.sum(axis=(0, 1))
        dhact = dr2 @ P[pre + "mlp.w2"].T
        dhpre = dhact * (c["hpre"] > 0)
        g[pre + "mlp.w1"] = c["x1"].reshape(-1, h).T @ dhpre.reshape(-1, p)
        g[pre + "mlp.b1"] = dhpre.sum(axis=(0, 1))
        dx1 = dr2 + dhpre @ P[pre + "mlp.w1"].T
        # LN1 and attention
        dr1, g[pre + "ln1.g"], g[pre + "ln1.b"] = _layer_norm_back(dx1, P[pre + "ln1.g"], c["ln1"])
        x_in = tr.resid_in[i]
        g[pre + "attn.bo"] = dr1.sum(axis=(0, 1))
        z = c["z"]
        zc = z.transpose(0, 2, 1, 3).reshape(B, s, h)
        g[pre + "attn.wo"] = zc.reshape(-1, h).T @ dr1.reshape(-1, h)
        dz = _split_heads(dr1 @ P[pre + "attn.wo"].T, H, d)
        att = c["att"]
        datt = dz @ c["v"].transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dz
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        dxin = dr1.copy()
        for nm, dproj in (("q", dq), ("k", dk), ("v", dv)):
            flat = dproj.transpose(0, 2, 1, 3).reshape(B, s, h)
            g[pre + f"attn.w{nm}"] = x_in.reshape(-1, h).T @ flat.reshape(-1, h)
            g[pre + f"attn.b{nm}"] = flat.sum(axis=(0, 1))
            dxin += flat @ P[pre + f"attn.w{nm}"].T
        dx = dxin
    dE = np.zeros_like(P["embed.tok"])
    np.add.at(dE, batch.tokens.reshape(-1), dx.reshape(-1, h))
    g["embed.tok"] = dE
    dPos = np.zeros_like(P["embed.pos"])
    dPos[:s] = dx.sum(axis=0)
    g["embed.pos"] = dPos
    grads = ModelParams(cfg, {k: np.asarray(v, dtype=dt) for k, v in g.items()})
    if mask is not None:
        mask.apply(grads)
    return loss, grads


def greedy_decode(params, prompt, n_new):
    """Extend ``prompt`` (B, s) by ``n_new`` argmax tokens."""
    seq = _check_tokens(params.config, prompt).copy()
    for _ in range(n_new):
        logits, _ = forward(params, seq)
        nxt = logits[:, -1, :].argmax(axis=-1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return seq
