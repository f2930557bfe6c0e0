"""Command-line interface.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 verification
failure, 3 numeric failure. Errors are reported as one JSON object on stderr.
"""

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import FunctionVector, build_function_vector, fv_similarity, rank_trace
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import ConfigError, FpgrowError, InputError
from .growth import FreezeMask, GrowthPlan, grow_model, verify_preservation
from .linalg import Rng
from .tasks import TaskSpec, icl_prompts
from .training import TrainConfig, finetune, layer_scores, pretrain, select_layers, sweep_n_layers

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_VERIFY_FAILED = 2
EXIT_NUMERIC = 3


class UsageError(FpgrowError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj):
    return json.dumps({"tool_version": __version__, **obj}, sort_keys=True, indent=2) + "\n"


def _emit(obj, out=None):
    text = _dump(obj)
    if out:
        atomic_write(out, text)
    sys.stdout.write(text)


def _rel(path, record):
    """``path`` relative to the directory of the JSON record that names it."""
    return os.path.relpath(path, os.path.dirname(os.path.abspath(record)))


def _layers_arg(s):
    if s == "all":
        return "all"
    try:
        return tuple(int(x) for x in s.split(",") if x != "")
    except ValueError:
        raise UsageError(f"--layers must be 'all' or comma-separated integers, got {s!r}")


def _ints_arg(s):
    try:
        return [int(x) for x in s.split(",") if x != ""]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {s!r}")


def _checkpoint_meta(role, step=None, lineage=None, mask=None, extra=None):
    meta = {"tool_version": __version__, "role": role, "lineage": list(lineage or []),
            "mask": mask.to_dict() if mask is not None else None}
    if step is not None:
        meta["step"] = int(step)
    meta.update(extra or {})
    return meta


def _mask_from_meta(meta):
    d = meta.get("mask")
    return FreezeMask.from_dict(d) if d else None


def cmd_grow(args):
    plan = GrowthPlan(args.k, _layers_arg(args.layers), args.strategy, args.init, args.noise)
    params, meta = load_checkpoint(args.inp)
    grown, mask, receipt = grow_model(params, plan, Rng(args.seed).child("grow"))
    entry = {"plan": plan.to_dict(), "seed": args.seed,
             "mlp_dims_before": list(params.config.mlp_dims),
             "mlp_dims_after": list(grown.config.mlp_dims)}
    lineage = list(meta.get("lineage") or []) + [entry]
    save_checkpoint(grown, _checkpoint_meta("grown", meta.get("step"), lineage, mask), args.out)
    mask_path = args.mask_out or args.out + ".mask.json"
    atomic_write(mask_path, _dump({"mask": mask.to_dict()}))
    receipt_path = args.receipt_out or args.out + ".receipt.json"
    _emit({"receipt": receipt.to_dict(), "checkpoint": _rel(args.out, receipt_path),
           "mask": _rel(mask_path, receipt_path)}, receipt_path)
    return EXIT_OK


def cmd_verify(args):
    original, _ = load_checkpoint(args.original)
    grown, meta = load_checkpoint(args.grown)
    report = verify_preservation(original, grown, args.samples, args.seq_len, Rng(args.seed), args.tol)
    expected = _expected_grown_layers(original, meta)
    out = report.to_dict()
    if expected is not None and expected != report.grown_layers:
        out["status"] = "FAIL"
        out["lineage_error"] = f"lineage expects grown layers {expected}, shapes show {report.grown_layers}"
    _emit({"report": out})
    return EXIT_OK if out["status"] == "PASS" else EXIT_VERIFY_FAILED


def _expected_grown_layers(original, meta):
    lineage = meta.get("lineage") or []
    dims = list(original.config.mlp_dims)
    for entry in lineage:
        if entry["mlp_dims_before"] == dims:
            dims = entry["mlp_dims_after"]
    if not lineage:
        return None
    return [i for i, (a, b) in enumerate(zip(original.config.mlp_dims, dims)) if a != b]


def cmd_check_frozen(args):
    before, _ = load_checkpoint(args.before)
    after, meta = load_checkpoint(args.after)
    if args.mask:
        with open(args.mask, encoding="utf-8") as f:
            mask = FreezeMask.from_dict(json.load(f)["mask"])
    else:
        mask = _mask_from_meta(meta)
        if mask is None:
            raise InputError("no --mask given and the checkpoint carries no mask")
    mask.validate(before)
    mask.validate(after)
    a, b = mask.frozen_digest(before), mask.frozen_digest(after)
    ok = a == b and mask.frozen_values(before) == mask.frozen_values(after)
    _emit({"status": "PASS" if ok else "FAIL", "frozen_digest_before": a, "frozen_digest_after": b,
           "frozen_params": before.num_params() - mask.trainable_count(before)})
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def _out_dir(cfg, args):
    d = args.out_dir or cfg.path("out_dir")
    os.makedirs(d, exist_ok=True)
    return d


def cmd_pretrain(args):
    cfg = ExperimentConfig.load(args.config)
    out = _out_dir(cfg, args)
    params, log = pretrain(cfg.pretrain, cfg.task("old"), cfg.model)
    ckpt = args.out or os.path.join(out, "base.fpgx")
    save_checkpoint(params, _checkpoint_meta("pretrained", log.final["step"]), ckpt)
    atomic_write(os.path.join(out, "pretrain.csv"), log.to_csv())
    _emit({"checkpoint": ckpt, "final": log.final})
    return EXIT_OK


def cmd_finetune(args):
    cfg = ExperimentConfig.load(args.config)
    out = _out_dir(cfg, args)
    src = args.inp or cfg.path("base_checkpoint")
    params, meta = load_checkpoint(src)
    mask = None if args.no_mask else _mask_from_meta(meta)
    tc = cfg.train
    if args.checkpoint_every is not None:
        tc = TrainConfig.from_dict({**tc.to_dict(), "checkpoint_every": args.checkpoint_every})
    old = cfg.tasks.get("old")
    tuned, log = finetune(params, mask, tc, cfg.task("new"), old)
    name = args.name or ("sft" if mask is None else "grown")
    lineage = meta.get("lineage") or []
    ckpt = args.out or os.path.join(out, f"{name}.fpgx")
    base_step = int(meta.get("step") or 0)
    save_checkpoint(tuned, _checkpoint_meta("finetuned", base_step + tc.steps, lineage, mask), ckpt)
    atomic_write(os.path.join(out, f"{name}.csv"), log.to_csv())
    if log.checkpoints:
        cdir = os.path.join(out, f"{name}_checkpoints")
        save_checkpoint(params.astype(np.dtype(tc.dtype)),
                        _checkpoint_meta("finetune-snapshot", 0, lineage, mask), os.path.join(cdir, "step_00000000.fpgx"))
        for step, p in log.checkpoints:
            save_checkpoint(p, _checkpoint_meta("finetune-snapshot", step, lineage, mask),
                            os.path.join(cdir, f"step_{step:08d}.fpgx"))
    _emit({"checkpoint": ckpt, "runlog": os.path.join(out, f"{name}.csv"), "final": log.final,
           "trainable_params": mask.trainable_count(params) if mask is not None else params.num_params()})
    return EXIT_OK


def cmd_select_layers(args):
    before, _ = load_checkpoint(args.before)
    after, _ = load_checkpoint(args.after)
    layers = select_layers(before, after, args.top)
    _emit({"layers": layers, "scores": layer_scores(before, after)})
    return EXIT_OK


def cmd_sweep(args):
    cfg = ExperimentConfig.load(args.config)
    out = _out_dir(cfg, args)
    base, _ = load_checkpoint(args.inp or cfg.path("base_checkpoint"))
    plan = cfg.growth or GrowthPlan()
    logs, ranking = sweep_n_layers(base, _ints_arg(args.n), plan, cfg.task("new"), cfg.tasks.get("old"),
                                   cfg.train, Rng(args.seed).child("sweep"))
    runs = []
    for log in logs:
        path = os.path.join(out, f"sweep_n{log.tag['n']}.csv")
        atomic_write(path, log.to_csv())
        runs.append({**log.tag, "runlog": os.path.basename(path), "final": log.final})
    _emit({"ranking": ranking, "runs": runs}, os.path.join(out, "sweep.json"))
    return EXIT_OK


def cmd_analyze_rank(args):
    paths = sorted(glob.glob(os.path.join(args.checkpoints, "*.fpgx")))
    if len(paths) < 2:
        raise InputError(f"need at least two .fpgx checkpoints in {args.checkpoints}")
    loaded = [load_checkpoint(p) for p in paths]
    steps = [m.get("step", i) for i, (_, m) in enumerate(loaded)]
    order = sorted(range(len(loaded)), key=lambda i: (steps[i], paths[i]))
    trace = rank_trace([loaded[i][0] for i in order], [steps[i] for i in order])
    atomic_write(args.out, trace.to_csv())
    side = {**trace.sidecar(), "checkpoints": [os.path.basename(paths[i]) for i in order]}
    atomic_write(args.out + ".json", json.dumps(side, sort_keys=True, indent=2) + "\n")
    _emit({"grid": args.out, "sidecar": args.out + ".json", "shape": list(trace.shape)})
    return EXIT_OK


def _load_task(path):
    try:
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read task file {path}: {e}") from e
    return TaskSpec.from_dict(d.get("task", d) if isinstance(d, dict) else d)


def cmd_fv(args):
    model, _ = load_checkpoint(args.model)
    spec = _load_task(args.task)
    prompts = icl_prompts(spec, args.prompts, seed=args.seed)
    fv = build_function_vector(model, prompts, args.k_top, rng=Rng(args.seed).child("corrupt"),
                               task=spec.kind)
    atomic_write(args.out, fv.to_json())
    _emit({"fv": args.out, "heads": fv.to_dict()["heads"]})
    return EXIT_OK


def cmd_fv_compare(args):
    fvs = []
    for p in (args.a, args.b):
        try:
            with open(p, encoding="utf-8") as f:
                fvs.append(FunctionVector.from_dict(json.load(f)))
        except (OSError, ValueError, KeyError) as e:
            raise InputError(f"cannot read function vector {p}: {e}") from e
    overlap, cos = fv_similarity(*fvs)
    _emit({"overlap": overlap, "k_top": fvs[0].k_top, "cosine": cos})
    return EXIT_OK


def build_parser():
    p = _Parser(prog="fpgrow", description="Function-preserving MLP growth toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("grow", help="expand MLP layers of a checkpoint")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--layers", default="all")
    g.add_argument("--strategy", default="gfreeze", choices=("gfreeze", "gtrain"))
    g.add_argument("--init", default="duplicate", choices=("duplicate", "zero"))
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mask-out")
    g.add_argument("--receipt-out")
    g.set_defaults(func=cmd_grow)

    v = sub.add_parser("verify", help="check that a grown model preserves the original's logits")
    v.add_argument("--original", required=True)
    v.add_argument("--grown", required=True)
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--seq-len", type=int, default=8)
    v.add_argument("--tol", type=float, default=None)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    c = sub.add_parser("check-frozen", help="confirm frozen coordinates are bit-identical")
    c.add_argument("--before", required=True)
    c.add_argument("--after", required=True)
    c.add_argument("--mask")
    c.set_defaults(func=cmd_check_frozen)

    for name, fn in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        t = sub.add_parser(name)
        t.add_argument("--config", required=True)
        t.add_argument("--out")
        t.add_argument("--out-dir")
        t.set_defaults(func=fn)
        if name == "finetune":
            t.add_argument("--in", dest="inp")
            t.add_argument("--no-mask", action="store_true", help="ignore the checkpoint's mask (plain SFT)")
            t.add_argument("--name")
            t.add_argument("--checkpoint-every", type=int)

    s = sub.add_parser("select-layers")
    s.add_argument("--before", required=True)
    s.add_argument("--after", required=True)
    s.add_argument("--top", type=int, required=True)
    s.set_defaults(func=cmd_select_layers)

    w = sub.add_parser("sweep")
    w.add_argument("--config", required=True)
    w.add_argument("--n", required=True)
    w.add_argument("--in", dest="inp")
    w.add_argument("--out-dir")
    w.add_argument("--seed", type=int, default=0)
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("analyze-rank")
    r.add_argument("--checkpoints", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_analyze_rank)

    f = sub.add_parser("fv")
    f.add_argument("--model", required=True)
    f.add_argument("--task", required=True)
    f.add_argument("--k-top", type=int, default=10)
    f.add_argument("--prompts", type=int, default=32)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fv)

    fc = sub.add_parser("fv-compare")
    fc.add_argument("--a", required=True)
    fc.add_argument("--b", required=True)
    fc.set_defaults(func=cmd_fv_compare)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except FpgrowError as e:
        code = EXIT_INVALID if isinstance(e, UsageError) else e.exit_code
        err = {"tool_version": __version__, "error": type(e).__name__, "message": str(e), "exit_code": code}
        if getattr(e, "batch_index", None) is not None:
            err["batch_index"] = e.batch_index
        if getattr(e, "final_accuracy", None) is not None:
            err["final_accuracy"] = e.final_accuracy
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return code
    except OSError as e:
        err = {"tool_version": __version__, "error": type(e).__name__, "message": str(e),
               "exit_code": EXIT_INVALID}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
