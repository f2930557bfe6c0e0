"""Function-preserving MLP expansion and the freeze masks that go with it.

Growing layer ``n`` by a factor ``k`` replaces its MLP with::

    w1' = [w1 w1 ... w1]           (h, k*p)
    b1' = [b1 b1 ... b1]           (k*p,)
    w2' = [w2/k; w2/k; ...; w2/k]  (k*p, h)
    b2' = b2

Every hidden unit appears k times with the same pre-activation, so the k
copies of ``ReLU(.) @ (w2/k)`` sum back to the original output.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError, StructureError
from .linalg import hconcat, vstack
from .transformer import MLP_TENSORS, MlpWeights, forward

GFREEZE = "gfreeze"
GTRAIN = "gtrain"
DUPLICATE = "duplicate"
ZERO_INIT = "zero"
STRATEGIES = (GFREEZE, GTRAIN)
INITIALIZERS = (DUPLICATE, ZERO_INIT)


@dataclass(frozen=True)
class GrowthPlan:
    k: int = 2
    layers: object = "all"  # "all" or a tuple of layer indices
    strategy: str = GFREEZE
    initializer: str = DUPLICATE
    noise_scale: float = 0.0

    def __post_init__(self):
        if isinstance(self.layers, str):
            if self.layers != "all":
                raise PlanError(f"layers must be 'all' or a list of indices, got {self.layers!r}")
        else:
            object.__setattr__(self, "layers", tuple(sorted(set(int(i) for i in self.layers))))
            if not self.layers:
                raise PlanError("growth plan has an empty layer set")
        if not isinstance(self.k, (int, np.integer)) or isinstance(self.k, bool):
            raise PlanError(f"k must be an integer, got {self.k!r}")
        if self.k < 2:
            raise PlanError(f"expansion factor k must be >= 2, got {self.k}")
        if self.strategy not in STRATEGIES:
            raise PlanError(f"unknown strategy {self.strategy!r}")
        if self.initializer not in INITIALIZERS:
            raise PlanError(f"unknown initializer {self.initializer!r}")
        if not self.noise_scale >= 0:
            raise PlanError("noise_scale must be >= 0")

    def layer_indices(self, n_layers):
        idx = tuple(range(n_layers)) if self.layers == "all" else self.layers
        bad = [i for i in idx if not 0 <= i < n_layers]
        if bad:
            raise PlanError(f"layer indices {bad} out of range for {n_layers} layers")
        return idx

    def to_dict(self):
        return {
            "k": int(self.k),
            "layers": self.layers if self.layers == "all" else list(self.layers),
            "strategy": self.strategy,
            "initializer": self.initializer,
            "noise_scale": float(self.noise_scale),
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {"k", "layers", "strategy", "initializer", "noise_scale"}
        unknown = set(d) - allowed
        if unknown:
            raise PlanError(f"unknown growth plan keys: {sorted(unknown)}")
        return cls(**d)


def expand_mlp(w, k, initializer=DUPLICATE, noise_scale=0.0, rng=None):
    """Return the k-fold widened copy of ``w``; the input is not modified."""
    if k < 2:
        raise PlanError(f"expansion factor k must be >= 2, got {k}")
    h, p = w.w1.shape
    dt = w.w1.dtype
    if initializer == DUPLICATE:
        blocks = [w.w1]
        for c in range(1, k):
            block = w.w1.copy()
            if noise_scale > 0:
                if rng is None:
                    raise PlanError("noise_scale > 0 needs an rng")
                block = block + rng.child(f"noise.{c}").normal((h, p), noise_scale, dtype=dt)
            blocks.append(block)
        w1 = hconcat(blocks)
        b1 = np.tile(w.b1, k)
        w2 = vstack([w.w2 / dt.type(k)] * k)
    elif initializer == ZERO_INIT:
        if rng is None:
            raise PlanError("zero initializer needs an rng for the new up-projection columns")
        new = rng.child("zero_init").normal((h, (k - 1) * p), 0.02 / np.sqrt(h), dtype=dt)
        w1 = hconcat([w.w1, new])
        b1 = np.concatenate([w.b1, np.zeros((k - 1) * p, dtype=dt)])
        w2 = vstack([w.w2, np.zeros(((k - 1) * p, h), dtype=dt)])
    else:
        raise PlanError(f"unknown initializer {initializer!r}")
    return MlpWeights(w1.astype(dt), b1.astype(dt), w2.astype(dt), w.b2.copy())


@dataclass(frozen=True)
class Region:
    """Trainable part of one tensor: nothing, everything, or ``[start, stop)`` along ``axis``."""

    kind: str
    axis: int = 0
    start: int = 0
    stop: int = 0

    def index(self, shape):
        if self.kind == "frozen":
            return None
        if self.kind == "full":
            return tuple(slice(None) for _ in shape)
        idx = [slice(None)] * len(shape)
        idx[self.axis] = slice(self.start, self.stop)
        return tuple(idx)

    def count(self, shape):
        if self.kind == "frozen":
            return 0
        if self.kind == "full":
            return int(np.prod(shape))
        return int(np.prod(shape)) // shape[self.axis] * (self.stop - self.start)

    def to_dict(self):
        if self.kind == "slice":
            return {"kind": "slice", "axis": self.axis, "start": self.start, "stop": self.stop}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d):
        kind = d.get("kind")
        if kind in ("frozen", "full"):
            return cls(kind)
        if kind == "slice":
            return cls("slice", int(d["axis"]), int(d["start"]), int(d["stop"]))
        raise StructureError(f"bad mask region {d!r}")


FROZEN = Region("frozen")
FULL = Region("full")


@dataclass
class FreezeMask:
    """Per-tensor trainability map covering every tensor of a model exactly once."""

    regions: dict

    @classmethod
    def uniform(cls, params, trainable):
        r = FULL if trainable else FROZEN
        return cls({name: r for name in params})

    def validate(self, params):
        if set(self.regions) != set(params.tensors):
            missing = sorted(set(params.tensors) - set(self.regions))
            extra = sorted(set(self.regions) - set(params.tensors))
            raise StructureError(f"mask does not match params: missing={missing} extra={extra}")
        for name, r in self.regions.items():
            shape = params[name].shape
            if r.kind == "slice":
                if not 0 <= r.axis < len(shape) or not 0 <= r.start <= r.stop <= shape[r.axis]:
                    raise StructureError(f"{name}: slice {r} outside shape {shape}")
            elif r.kind not in ("frozen", "full"):
                raise StructureError(f"{name}: bad region kind {r.kind!r}")

    def trainable_index(self, name, shape):
        return self.regions[name].index(shape)

    def boolean(self, name, shape):
        m = np.zeros(shape, dtype=bool)
        idx = self.trainable_index(name, shape)
        if idx is not None:
            m[idx] = True
        return m

    def apply(self, grads):
        """Zero the frozen coordinates of ``grads`` in place."""
        for name, r in self.regions.items():
            g = grads.tensors[name]
            if r.kind == "frozen":
                g[...] = 0
            elif r.kind == "slice":
                keep = g[r.index(g.shape)].copy()
                g[...] = 0
                g[r.index(g.shape)] = keep
        return grads

    def trainable_count(self, params):
        return int(sum(r.count(params[n].shape) for n, r in self.regions.items()))

    def frozen_values(self, params):
        """Concatenated bytes of every frozen coordinate, in tensor order."""
        chunks = []
        for name in params:
            arr = params[name]
            chunks.append(np.ascontiguousarray(arr[~self.boolean(name, arr.shape)]).tobytes())
        return b"".join(chunks)

    def frozen_digest(self, params):
        return hashlib.sha256(self.frozen_values(params)).hexdigest()

    def to_dict(self):
        return {name: r.to_dict() for name, r in self.regions.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({name: Region.from_dict(r) for name, r in d.items()})

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class GrowthReceipt:
    original_params: int
    added_params: int
    trainable_params: int
    trainable_fraction: float
    layers: list = field(default_factory=list)  # [{"layer", "mlp_dim_before", "mlp_dim_after"}]

    def to_dict(self):
        return {
            "original_params": self.original_params,
            "added_params": self.added_params,
            "total_params": self.original_params + self.added_params,
            "trainable_params": self.trainable_params,
            "trainable_fraction": self.trainable_fraction,
            "layers": self.layers,
        }


def grown_config(config, plan):
    """Config after applying ``plan``; only the grown MLP widths change."""
    layers = plan.layer_indices(config.n_layers)
    return config.with_mlp_dims([p * plan.k if i in layers else p for i, p in enumerate(config.mlp_dims)])


def plan_mask(config, plan):
    """Freeze mask over the grown model's tensors, built from shapes alone."""
    grown = grown_config(config, plan)
    regions = {name: FROZEN for name in grown.shapes()}
    for i in plan.layer_indices(config.n_layers):
        p, kp = config.mlp_dims[i], grown.mlp_dims[i]
        pre = f"layers.{i}.mlp."
        if plan.strategy == GFREEZE:
            regions[pre + "w1"] = Region("slice", 1, p, kp)
            regions[pre + "b1"] = Region("slice", 0, p, kp)
            regions[pre + "w2"] = Region("slice", 0, p, kp)
        else:
            regions[pre + "w1"] = FULL
            regions[pre + "b1"] = FULL
    return FreezeMask(regions)


def plan_receipt(config, plan):
    """Parameter accounting for ``plan`` without materialising any weights.

    Works for configs far too large to allocate.
    """
    grown = grown_config(config, plan)
    shapes = grown.shapes()
    mask = plan_mask(config, plan)
    original = config.param_count()
    trainable = int(sum(r.count(shapes[n]) for n, r in mask.regions.items()))
    return GrowthReceipt(
        original_params=original,
        added_params=grown.param_count() - original,
        trainable_params=trainable,
        trainable_fraction=trainable / original,
        layers=[{"layer": i, "mlp_dim_before": config.mlp_dims[i], "mlp_dim_after": grown.mlp_dims[i]}
                for i in plan.layer_indices(config.n_layers)],
    )


def grow_model(params, plan, rng):
    """Apply ``plan`` to a copy of ``params``; returns (grown, mask, receipt)."""
    grown = params.copy()
    for i in plan.layer_indices(params.config.n_layers):
        grown = grown.with_mlp(i, expand_mlp(params.mlp(i), plan.k, plan.initializer,
                                             plan.noise_scale, rng.child(f"layer.{i}")))
    mask = plan_mask(params.config, plan)
    mask.validate(grown)
    receipt = plan_receipt(params.config, plan)
    if receipt.trainable_params != mask.trainable_count(grown) or \
            receipt.original_params + receipt.added_params != grown.num_params():
        raise StructureError("receipt does not match the grown model")
    return grown, mask, receipt


def expected_added_params(config, plan):
    """Closed-form parameter count a plan adds: (k-1)(h*p + p + p*h) per grown layer."""
    h = config.hidden_dim
    return sum((plan.k - 1) * (2 * h * config.mlp_dims[i] + config.mlp_dims[i])
               for i in plan.layer_indices(config.n_layers))


@dataclass
class VerificationReport:
    n_samples: int
    seq_len: int
    tol: float
    max_abs_dev: float
    max_rel_dev: float
    dtype: str
    grown_layers: list

    @property
    def passed(self):
        return self.max_abs_dev <= self.tol

    def to_dict(self):
        return {
            "status": "PASS" if self.passed else "FAIL",
            "n_samples": self.n_samples,
            "seq_len": self.seq_len,
            "tol": self.tol,
            "max_abs_dev": self.max_abs_dev,
            "max_rel_dev": self.max_rel_dev,
            "dtype": self.dtype,
            "grown_layers": self.grown_layers,
        }


def default_tolerance(dtype):
    return 1e-12 if np.dtype(dtype) == np.float64 else 1e-5


def check_growth_compatible(original, grown):
    a, b = original.config, grown.config
    same = (a.n_layers, a.hidden_dim, a.n_heads, a.head_dim, a.vocab_size, a.max_seq_len) == (
        b.n_layers, b.hidden_dim, b.n_heads, b.head_dim, b.vocab_size, b.max_seq_len)
    if not same:
        raise StructureError("configs differ beyond MLP dimensions")
    if original.dtype != grown.dtype:
        raise StructureError(f"dtype mismatch {original.dtype} vs {grown.dtype}")
    return [i for i, (p, q) in enumerate(zip(a.mlp_dims, b.mlp_dims)) if p != q]


def verify_preservation(original, grown, n_samples, seq_len, rng, tol=None, batch_size=25):
    """Compare logits of ``original`` and ``grown`` on random token sequences."""
    changed = check_growth_compatible(original, grown)
    for name in original:
        if not any(name.startswith(f"layers.{i}.mlp.") for i in changed):
            if original[name].shape != grown[name].shape:
                raise StructureError(f"{name} changed shape outside grown MLPs")
    if tol is None:
        tol = default_tolerance(original.dtype)
    cfg = original.config
    tokens = rng.child("verify").integers(0, cfg.vocab_size, size=(n_samples, seq_len))
    max_abs = 0.0
    max_rel = 0.0
    for start in range(0, n_samples, batch_size):
        chunk = tokens[start:start + batch_size]
        la, _ = forward(original, chunk)
        lb, _ = forward(grown, chunk)
        diff = np.abs(la.astype(np.float64) - lb.astype(np.float64))
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.abs(la.astype(np.float64)), np.finfo(np.float64).tiny)
        max_rel = max(max_rel, float((diff / denom).max()))
    return VerificationReport(n_samples, seq_len, float(tol), max_abs, max_rel, str(original.dtype), changed)
