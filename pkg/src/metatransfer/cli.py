"""Command-line interface.

Settings are resolved as: profile defaults, then ``--config`` file, then
``--set key=value`` flags, then dedicated flags such as ``--variant``.
Every command writes a JSON run manifest; ``replay`` re-runs one.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from typing import Optional


from . import checkpoint, config, harness
from .episodes import ClassGeometry, generate_synthetic, load_dataset, make_rng, save_dataset, splits_path
from .fsutil import atomic_write_text, file_hash
from .meta import MetaLearner, meta_test, meta_train, save_learner
from .pretrain import load_checkpoint, pretrain, save_checkpoint

log = logging.getLogger("metatransfer")

MANIFEST_VERSION = 1
U64 = (1 << 64) - 1

PRECEDENCE = (
    "settings precedence (later wins): --profile defaults < --config file < --set key=value < dedicated flags"
)


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _kv(text: str) -> tuple:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _resolve(args, extra: Optional[dict] = None) -> config.RunConfig:
    if getattr(args, "resolved", None):
        values = dict(args.resolved)
        profile = values.pop("profile")
        return config.RunConfig(values, profile).validate()
    overrides = dict(args.set or [])
    overrides.update(extra or {})
    return config.load(args.config, args.profile, overrides)


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise CommandError(f"{what} not found: {path}")


class Manifest:
    """Collects what a run read, wrote and measured; written once at the end."""

    def __init__(self, command: str, args):
        self.data = {
            "manifest_version": MANIFEST_VERSION,
            "command": command,
            "args": {k: v for k, v in vars(args).items() if k not in ("func", "resolved", "set", "config")},
            "output_args": list(OUTPUT_ARGS.get(command, ())),
            "config": None,
            "inputs": {},
            "outputs": {},
            "timings": {},
            "summary": {},
        }
        self._t = {}

    def set_config(self, run: config.RunConfig) -> None:
        self.data["config"] = run.as_dict()

    def input(self, path: str) -> None:
        self.data["inputs"][path] = file_hash(path)

    def output(self, path: str) -> None:
        self.data["outputs"][path] = file_hash(path)

    def start(self, phase: str) -> None:
        self._t[phase] = time.perf_counter()

    def stop(self, phase: str) -> None:
        self.data["timings"][phase] = round(time.perf_counter() - self._t.pop(phase), 3)

    def write(self, path: str) -> None:
        atomic_write_text(path, json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def _manifest_path(args, default_base: str) -> str:
    return args.manifest or default_base + ".manifest.json"


def _ht_modes(text: str) -> tuple:
    return {"on": (True,), "off": (False,), "both": (False, True)}[text]


def _variants(text: str) -> list:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> dict:
    run = _resolve(args, {k: str(v) for k, v in (("data.classes", args.classes),
                                                  ("data.samples_per_class", args.samples_per_class))
                          if v is not None})
    man = Manifest("gen-data", args)
    man.set_config(run)
    man.start("generate")
    ds = generate_synthetic(
        num_classes=run["data.classes"],
        samples_per_class=run["data.samples_per_class"],
        C=run["data.channels"],
        H=run["data.height"],
        W=run["data.width"],
        class_geometry=ClassGeometry(),
        rng=make_rng(args.seed, "data"),
    )
    man.stop("generate")
    save_dataset(ds, args.out)
    man.output(args.out)
    man.output(splits_path(args.out))
    man.data["summary"] = {
        "samples": len(ds),
        "classes": {k: len(v) for k, v in ds.meta_split.items()},
        "image_shape": list(ds.image_shape),
    }
    man.write(_manifest_path(args, args.out))
    print(f"wrote {len(ds)} samples, splits "
          + " ".join(f"{k}={len(v)}" for k, v in ds.meta_split.items()) + f" -> {args.out}")
    return man.data


def cmd_pretrain(args) -> dict:
    _require(args.data, "dataset")
    run = _resolve(args)
    man = Manifest("pretrain", args)
    man.set_config(run)
    man.input(args.data)
    ds = load_dataset(args.data)
    cfg = run.pretrain_config()
    man.start("pretrain")
    model = pretrain(ds, cfg, args.seed)
    man.stop("pretrain")
    save_checkpoint(model, args.out)
    man.output(args.out)
    metrics = args.metrics or args.out + ".metrics.csv"
    atomic_write_text(metrics, _csv_text(["iteration", "lr", "loss", "acc"], model.curve))
    man.output(metrics)
    if args.figure:
        from .plotting import pretrain_figure

        pretrain_figure(model.curve, args.figure, window=max(1, min(100, len(model.curve) // 10)))
        man.output(args.figure)
    last = model.curve[-1]
    man.data["summary"] = {"final_loss": last[2], "final_acc": last[3], "iterations": len(model.curve)}
    man.write(_manifest_path(args, args.out))
    print(f"pretrained {len(model.curve)} iterations, final loss {last[2]:.4f} acc {last[3]:.3f} -> {args.out}")
    return man.data


def _sidecar(path: str) -> str:
    return path + ".json"


def cmd_meta_train(args) -> dict:
    _require(args.data, "dataset")
    _require(args.pretrained, "pretrained checkpoint")
    run = _resolve(args, {"meta.variant": args.variant, "curriculum.enabled": args.ht})
    man = Manifest("meta-train", args)
    man.set_config(run)
    man.input(args.data)
    man.input(args.pretrained)
    ds = load_dataset(args.data)
    extractor = load_checkpoint(args.pretrained, bn_eps=run["pretrain.bn_eps"]).extractor
    mcfg = run.meta_config()
    ccfg = run.curriculum_config()
    man.start("meta-train")
    result = meta_train(
        ds,
        extractor,
        mcfg,
        ccfg,
        args.seed,
        harness.meta_batches_for(run, mcfg),
        val_every=run["run.val_every"],
        val_tasks=harness.validation_tasks(ds, run, mcfg, args.seed),
    )
    man.stop("meta-train")
    save_learner(result.best, args.out)
    man.output(args.out)
    side = {
        "data": os.path.abspath(args.data),
        "data_hash": file_hash(args.data),
        "seed": args.seed,
        "best_iteration": result.best_iteration,
        "config": run.as_dict(),
    }
    atomic_write_text(_sidecar(args.out), json.dumps(side, indent=2, sort_keys=True) + "\n")
    man.output(_sidecar(args.out))
    metrics = args.metrics or args.out + ".metrics.csv"
    atomic_write_text(metrics, _csv_text(
        ["iteration", "phase", "task_idx", "test_loss", "mean_acc", "hardest_class"], result.metrics))
    man.output(metrics)
    curve = args.curve or args.out + ".val.csv"
    atomic_write_text(curve, _csv_text(["iteration", "val_acc"], result.curve))
    man.output(curve)
    runlog = args.run_log or args.out + ".log"
    atomic_write_text(runlog, "".join(line + "\n" for line in result.run_log))
    man.output(runlog)
    man.data["summary"] = {
        "best_iteration": result.best_iteration,
        "best_val_acc": max((a for _, a in result.curve), default=None),
        "hard_phases": len(result.hard_phases),
        "tasks": len(result.metrics),
    }
    man.write(_manifest_path(args, args.out))
    print(f"meta-trained {mcfg.variant.meta_op}/{run['meta.variant']} ht={'on' if ccfg.enabled else 'off'}: "
          f"{len(result.metrics)} tasks, best val {man.data['summary']['best_val_acc']} "
          f"at {result.best_iteration} -> {args.out}")
    return man.data


def cmd_meta_test(args) -> dict:
    _require(args.ckpt, "checkpoint")
    _require(_sidecar(args.ckpt), "checkpoint sidecar")
    with open(_sidecar(args.ckpt), "r", encoding="utf-8") as fh:
        side = json.load(fh)
    data = args.data or side["data"]
    _require(data, "dataset")
    args.resolved = side["config"]
    run = _resolve(args)
    man = Manifest("meta-test", args)
    man.set_config(run)
    man.input(args.ckpt)
    man.input(data)
    ds = load_dataset(data)
    mcfg = run.meta_config()
    learner = MetaLearner.from_state(checkpoint.read(args.ckpt), mcfg)
    man.start("meta-test")
    tasks = harness.test_tasks(ds, run, mcfg, args.seed, count=args.tasks)
    res = meta_test(tasks, learner, args.seed)
    man.stop("meta-test")
    out = args.out or args.ckpt + ".test.csv"
    atomic_write_text(out, _csv_text(["task", "acc"], list(enumerate(res["per_task"]))))
    man.output(out)
    man.data["summary"] = {"mean_acc": res["mean_acc"], "ci95": res["ci95"], "tasks": len(tasks)}
    man.write(_manifest_path(args, out))
    print(f"meta-test over {len(tasks)} tasks: {100 * res['mean_acc']:.2f} ± {100 * res['ci95']:.2f}%")
    return man.data


def _table(rows) -> str:
    head = ("variant", "ht", "1shot_acc", "ci")
    body = [(v, "on" if ht else "off", f"{100 * a:.2f}", f"{100 * c:.2f}") for v, ht, a, c in rows]
    widths = [max(len(r[i]) for r in [head] + body) for i in range(4)]
    fmt = "  ".join("{:<%d}" % w if i < 2 else "{:>%d}" % w for i, w in enumerate(widths))
    lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*r) for r in body]
    return "\n".join(lines) + "\n"


def cmd_bench(args) -> dict:
    _require(args.data, "dataset")
    _require(args.pretrained, "pretrained checkpoint")
    run = _resolve(args)
    man = Manifest("bench", args)
    man.set_config(run)
    man.input(args.data)
    man.input(args.pretrained)
    ds = load_dataset(args.data)
    extractor = load_checkpoint(args.pretrained, bn_eps=run["pretrain.bn_eps"]).extractor
    rows = []
    for v in _variants(args.variants):
        for ht in _ht_modes(args.ht):
            phase = f"{v}{'+ht' if ht else ''}"
            man.start(phase)
            r = harness.run_variant(ds, extractor, run, v, ht, args.seed)
            man.stop(phase)
            rows.append((v, ht, r.acc, r.ci))
    atomic_write_text(args.out, _csv_text(["variant", "ht", "1shot_acc", "ci"],
                                          [(v, int(ht), a, c) for v, ht, a, c in rows]))
    man.output(args.out)
    table = _table(rows)
    if args.table:
        atomic_write_text(args.table, table)
        man.output(args.table)
    if args.figure:
        from .plotting import bench_figure

        bench_figure(rows, args.figure)
        man.output(args.figure)
    man.data["summary"] = {f"{v}{'+ht' if ht else ''}": {"acc": a, "ci": c} for v, ht, a, c in rows}
    man.write(_manifest_path(args, args.out))
    sys.stdout.write(table)
    return man.data


def cmd_eval_convergence(args) -> dict:
    _require(args.data, "dataset")
    _require(args.pretrained, "pretrained checkpoint")
    run = _resolve(args)
    man = Manifest("eval-convergence", args)
    man.set_config(run)
    man.input(args.data)
    man.input(args.pretrained)
    ds = load_dataset(args.data)
    extractor = load_checkpoint(args.pretrained, bn_eps=run["pretrain.bn_eps"]).extractor

    hook = None
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)

        def hook(v, ht, n, learner, acc):
            save_learner(learner, os.path.join(args.checkpoint_dir, f"{v}{'_ht' if ht else ''}_{n:06d}.mtlc"))

    man.start("convergence")
    rows = harness.convergence(ds, extractor, run, _variants(args.variants), _ht_modes(args.ht), args.seed, hook)
    man.stop("convergence")
    atomic_write_text(args.out, _csv_text(["iteration", "variant", "ht", "val_acc"],
                                          [(n, v, int(ht), a) for n, v, ht, a in rows]))
    man.output(args.out)
    if args.figure:
        from .plotting import convergence_figure

        convergence_figure(rows, args.figure)
        man.output(args.figure)
    final = {}
    for n, v, ht, a in rows:
        final[f"{v}{'+ht' if ht else ''}"] = a
    man.data["summary"] = {"final_val_acc": final}
    man.write(_manifest_path(args, args.out))
    for key, acc in final.items():
        print(f"{key}: final val acc {100 * acc:.2f}%")
    return man.data


def cmd_replay(args) -> dict:
    """Re-run a manifest with outputs redirected into ``--out-dir``."""
    _require(args.manifest_file, "manifest")
    with open(args.manifest_file, "r", encoding="utf-8") as fh:
        stored = json.load(fh)
    command = stored.get("command")
    if command not in COMMANDS or command == "replay":
        raise CommandError(f"manifest names unknown command {command!r}")
    os.makedirs(args.out_dir, exist_ok=True)
    ns = argparse.Namespace(**stored["args"])
    for key in stored.get("output_args", []):
        old = getattr(ns, key, None)
        if old:
            setattr(ns, key, os.path.join(args.out_dir, os.path.basename(old)))
    ns.resolved = stored["config"]
    ns.set, ns.config = None, None
    if command == "meta-test":
        # the checkpoint sidecar supplies the config
        ns.resolved = None
    return COMMANDS[command](ns)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "bench": cmd_bench,
    "eval-convergence": cmd_eval_convergence,
    "replay": cmd_replay,
}

OUTPUT_ARGS = {
    "gen-data": ("out", "manifest"),
    "pretrain": ("out", "metrics", "figure", "manifest"),
    "meta-train": ("out", "metrics", "curve", "run_log", "manifest"),
    "meta-test": ("out", "manifest"),
    "bench": ("out", "table", "figure", "manifest"),
    "eval-convergence": ("out", "figure", "checkpoint_dir", "manifest"),
}


# ---------------------------------------------------------------- parser


def _common(p, seed=True) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--profile", choices=config.PROFILES, help="defaults profile (default: quickstart)")
    p.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="override one config key")
    if seed:
        p.add_argument("--seed", type=_seed, default=0, help="unsigned 64-bit seed (default 0)")
    p.add_argument("--manifest", help="run manifest path (default: <main output>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metatransfer", description=__doc__.splitlines()[0], epilog=PRECEDENCE)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset", epilog=PRECEDENCE)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", type=int)
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train the feature extractor", epilog=PRECEDENCE)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="CSV path (default: <out>.metrics.csv)")
    p.add_argument("--figure", help="optional PNG of the training curve")
    _common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("meta-train", help="meta-train one variant", epilog=PRECEDENCE)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--variant", default="ss_full", choices=sorted(config.VARIANTS))
    p.add_argument("--ht", choices=("on", "off"), default="off", help="hard-task meta-batches")
    p.add_argument("--out", required=True, help="checkpoint of the best-validation learner")
    p.add_argument("--metrics", help="per-task CSV (default: <out>.metrics.csv)")
    p.add_argument("--curve", help="validation CSV (default: <out>.val.csv)")
    p.add_argument("--run-log", help="hard-phase log (default: <out>.log)")
    _common(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("meta-test", help="evaluate a meta-trained checkpoint on unseen tasks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tasks", type=int, default=600)
    p.add_argument("--data", help="dataset (default: path recorded at meta-train time)")
    p.add_argument("--out", help="per-task CSV (default: <ckpt>.test.csv)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_meta_test)

    p = sub.add_parser("bench", help="ablation table over variants", epilog=PRECEDENCE)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--variants", default=",".join(harness.DEFAULT_BENCH))
    p.add_argument("--ht", choices=("on", "off", "both"), default="both")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--table", help="aligned text table path")
    p.add_argument("--figure", help="PNG bar chart path")
    _common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval-convergence", help="validation curves with and without HT", epilog=PRECEDENCE)
    p.add_argument("--data", required=True)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--variants", default=",".join(harness.DEFAULT_CONVERGENCE))
    p.add_argument("--ht", choices=("on", "off", "both"), default="both")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--figure", help="PNG line chart path")
    p.add_argument("--checkpoint-dir", help="also save every validated learner here")
    _common(p)
    p.set_defaults(func=cmd_eval_convergence)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest_file")
    p.add_argument("--out-dir", required=True, help="directory for the replayed outputs")
    p.set_defaults(func=cmd_replay)
    return ap


def main(argv: Optional[list] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CommandError, config.ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
