"""Experiment configuration: one strict JSON document per run."""

import json

from .errors import ConfigError, FpgrowError
from .growth import GrowthPlan
from .tasks import TaskSpec
from .training import TrainConfig
from .transformer import ModelConfig

SCHEMA_VERSION = 1
_TOP_KEYS = {"schema_version", "model", "tasks", "pretrain", "train", "growth", "paths"}
_TASK_KEYS = {"old", "new", "icl"}
_PATH_KEYS = {"out_dir", "base_checkpoint"}


class ExperimentConfig:
    """Model, tasks, optimizer settings, optional growth plan and output paths.

    ``tasks`` maps role names (``old``, ``new``, ``icl``) to ``TaskSpec``.
    Unknown keys at any level raise ``ConfigError``.
    """

    def __init__(self, model, tasks, train, pretrain=None, growth=None, paths=None):
        self.model = model
        self.tasks = dict(tasks)
        self.train = train
        self.pretrain = pretrain or train
        self.growth = growth
        self.paths = dict(paths or {})

    def task(self, role):
        if role not in self.tasks:
            raise ConfigError(f"experiment config has no {role!r} task")
        return self.tasks[role]

    def path(self, key, default=None):
        v = self.paths.get(key, default)
        if v is None:
            raise ConfigError(f"experiment config is missing paths.{key}")
        return v

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "tasks": {k: v.to_dict() for k, v in sorted(self.tasks.items())},
            "pretrain": self.pretrain.to_dict(),
            "train": self.train.to_dict(),
            "growth": self.growth.to_dict() if self.growth is not None else None,
            "paths": dict(sorted(self.paths.items())),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        _no_unknown(d, _TOP_KEYS, "")
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
        for key in ("model", "tasks", "train"):
            if key not in d:
                raise ConfigError(f"experiment config is missing {key!r}")
        _no_unknown(d["tasks"], _TASK_KEYS, "tasks.")
        _no_unknown(d.get("paths") or {}, _PATH_KEYS, "paths.")
        try:
            model = ModelConfig.from_dict(d["model"])
            tasks = {k: TaskSpec.from_dict(v) for k, v in d["tasks"].items()}
            train = TrainConfig.from_dict(d["train"])
            pre = TrainConfig.from_dict(d["pretrain"]) if d.get("pretrain") is not None else None
            growth = GrowthPlan.from_dict(d["growth"]) if d.get("growth") is not None else None
        except FpgrowError as e:
            raise ConfigError(str(e)) from e
        except TypeError as e:
            raise ConfigError(f"bad config value: {e}") from e
        for role, t in tasks.items():
            if t.vocab_needed > model.vocab_size:
                raise ConfigError(f"task {role!r} needs vocab {t.vocab_needed} > {model.vocab_size}")
            if t.sequence_length - 1 > model.max_seq_len:
                raise ConfigError(f"task {role!r} needs max_seq_len >= {t.sequence_length - 1}")
        return cls(model, tasks, train, pre, growth, d.get("paths"))

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except ValueError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as f:
                return cls.from_json(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read {path}: {e}") from e


def _no_unknown(d, allowed, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(prefix + k for k in unknown)}")
