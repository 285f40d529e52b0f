"""Command-line entry point: ``python -m zsrobust <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime or
numeric error.  Failures print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import tensor as T
from .attacks import PIXEL, AttackConfig, AttackError, pgd_attack, save_adversarial_batch
from .config import ConfigError, EvalConfig, config_hash, load_config, parse_config
from .data import DatasetFormatError, Dataset, gen_synthetic, load_bundle, load_dataset, load_eval_sets, save_bundle, save_dataset
from .evaluation import EvalReport, emit_report, eval_objective, evaluate_sets, interpolation_sweep, pseudo_label, write_frontier_csv
from .experiments import RECIPES, TOY_EPS, run_recipe, toy_context, toy_spec
from .models import load_checkpoint, load_text_bank, save_checkpoint
from .training import TrainingError, load_train_state, run_training, save_train_state

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _sha256(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_manifest(path, command, args, config=None, inputs=(), outputs=()):
    """Record what is needed to reproduce a run: config, seed, input hashes, outputs."""
    doc = {
        "command": command,
        "version": VERSION,
        # the output location is not needed to reproduce a run
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")},
        "config": None if config is None else config.to_dict(),
        "config_hash": None if config is None else config_hash(config),
        "seed": getattr(args, "seed", None),
        "inputs": {p: _sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": list(outputs),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _manifest_path(out):
    return os.path.join(out, "manifest.json") if os.path.isdir(out) else out + ".manifest.json"


def _csv_path(json_path):
    root, _ = os.path.splitext(json_path)
    return root + ".csv"


def _attack_or_default(path, default):
    if path is None:
        return default
    with open(path) as fh:
        doc = json.load(fh)
    if doc is None:
        return None
    return parse_config({**AttackConfig.evaluation().to_dict(), **doc}, "attack")


def _grid(text):
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("grid", f"not a comma-separated list of numbers: {text!r}") from None
    if not grid or any(not 0.0 <= w <= 1.0 for w in grid):
        raise ConfigError("grid", "weights must lie in [0, 1]")
    return grid


def _seeds(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("seeds", f"not a comma-separated list of integers: {text!r}") from None


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    spec = toy_spec(args.seed, args.image_size, args.per_class, args.test_per_class)
    bundle = gen_synthetic(spec)
    save_bundle(bundle, args.out)
    write_manifest(os.path.join(args.out, "manifest.json"), "gen-data", args,
                   outputs=sorted(os.listdir(args.out)))


def cmd_train(args):
    cfg = load_config(args.config, "train")
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    data = load_dataset(args.data)
    bank = load_text_bank(args.bank)
    state = None
    init = None
    if args.resume:
        state, saved = load_train_state(args.resume)
        if saved.to_dict() != cfg.to_dict():
            raise ConfigError("resume", "saved state was produced by a different config")
    elif args.init:
        init = load_checkpoint(args.init)
    result = run_training(cfg, data, bank, model=init, state=state, stop_after=args.stop_after)
    stem = os.path.splitext(args.out)[0]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_checkpoint(result.model, args.out, extra={"config_hash": config_hash(cfg)})
    save_train_state(result.state, cfg, stem + ".state")
    with open(stem + ".log.jsonl", "w") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    write_manifest(stem + ".manifest.json", "train", args, cfg,
                   [args.config, args.data, args.bank, args.init, args.resume],
                   [args.out, stem + ".state", stem + ".log.jsonl"])


def cmd_attack(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    bank = load_text_bank(args.bank)
    if ds.labels is None:
        raise DatasetFormatError("attack needs labelled data")
    cfg = _attack_or_default(args.attack, AttackConfig.evaluation())
    if cfg is None:
        raise ConfigError("attack", "attack config may not be null here")
    n = len(ds) if args.limit is None else min(args.limit, len(ds))
    x, labels = ds.images[:n], ds.labels[:n].astype(np.int64)
    with T.frozen([t for _, t in model.named_parameters()]):
        batch = pgd_attack(eval_objective(model, bank, labels, args.tau, args.objective), x, cfg, args.seed)
    save_adversarial_batch(batch, args.out, cfg, args.seed, labels)
    write_manifest(os.path.join(args.out, "manifest.json"), "attack", args, cfg,
                   [args.checkpoint, args.data, args.bank, args.attack], sorted(os.listdir(args.out)))


def _eval_config(args):
    cfg = EvalConfig() if args.config is None else load_config(args.config, "eval")
    if args.attack is not None:
        cfg = EvalConfig(_attack_or_default(args.attack, None), cfg.objective, cfg.tau, cfg.batch_size, cfg.seed)
    if args.seed is not None:
        cfg = EvalConfig(cfg.attack, cfg.objective, cfg.tau, cfg.batch_size, args.seed)
    return cfg


def cmd_eval(args):
    cfg = _eval_config(args)
    model = load_checkpoint(args.checkpoint)
    sets = load_eval_sets(args.data_dir, args.banks_dir, args.prefix)
    records = evaluate_sets(model, sets, cfg.attack, cfg.objective, cfg.tau, cfg.seed, cfg.batch_size)
    report = EvalReport(records, config_hash(cfg), cfg.seed)
    emit_report(report, args.out, _csv_path(args.out))
    write_manifest(_manifest_path(args.out), "eval", args, cfg,
                   [args.checkpoint, args.data_dir, args.banks_dir, args.attack, args.config],
                   [args.out, _csv_path(args.out)])


def cmd_interpolate(args):
    cfg = _eval_config(args)
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    grid = _grid(args.grid)
    sets = load_eval_sets(args.data_dir, args.banks_dir, args.prefix)
    rows = interpolation_sweep(a, b, grid, sets, cfg.attack, cfg.objective, cfg.tau, cfg.seed, cfg.batch_size)
    write_frontier_csv(rows, args.out)
    write_manifest(_manifest_path(args.out), "interpolate", args, cfg,
                   [args.a, args.b, args.data_dir, args.banks_dir, args.attack, args.config], [args.out])


def cmd_pseudo_label(args):
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    bank = load_text_bank(args.bank)
    labels = pseudo_label(model, ds.images, bank, args.tau)
    save_dataset(Dataset(bank.names, ds.images, labels, ds.split), args.out)
    write_manifest(os.path.join(args.out, "manifest.json"), "pseudo-label", args,
                   inputs=[args.checkpoint, args.data, args.bank], outputs=sorted(os.listdir(args.out)))


def cmd_experiment(args):
    seeds = _seeds(args.seeds)
    kwargs = {}
    if args.a or args.b:
        if args.name != "fig6" or not (args.a and args.b):
            raise ConfigError("a/b", "--a and --b go together and only apply to fig6")
        if len(seeds) != 1:
            raise ConfigError("seeds", "fig6 with fixed checkpoints takes exactly one seed")
        kwargs["adapted"] = load_checkpoint(args.b)
    bundle = load_bundle(args.data_dir) if args.data_dir else None
    vanilla = load_checkpoint(args.a) if args.a else None
    eps = TOY_EPS if args.eps is None else args.eps * PIXEL
    contexts = {s: toy_context(s, bundle, vanilla, eps) for s in seeds}
    os.makedirs(args.out, exist_ok=True)
    run_recipe(args.name, seeds, args.out, contexts, **kwargs)
    write_manifest(os.path.join(args.out, "manifest.json"), "experiment", args,
                   inputs=[args.a, args.b, args.data_dir], outputs=["summary.json"])


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="zsrobust", description="Zero-shot adversarial robustness toolkit.")
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-stable reductions")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("gen-data", help="render the synthetic task and its text banks")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=16)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--test-per-class", type=int, default=25)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="adapt an encoder")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--bank", required=True, help="text bank JSON")
    s.add_argument("--out", required=True, help="checkpoint path; log, state and manifest go beside it")
    s.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    s.add_argument("--init", default=None, help="initial checkpoint (vanilla encoder)")
    s.add_argument("--resume", default=None, help="state directory of an interrupted run")
    s.add_argument("--stop-after", type=int, default=None, help="stop after this many epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="write PGD adversarial examples for a dataset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--attack", default=None, help="attack config JSON")
    s.add_argument("--objective", choices=("ce", "contrastive"), default="ce")
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--limit", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    for name, func, help_text in (("eval", cmd_eval, "clean and robust zero-shot accuracy"),
                                  ("interpolate", cmd_interpolate, "weight-interpolation frontier")):
        s = sub.add_parser(name, help=help_text)
        if name == "eval":
            s.add_argument("--checkpoint", required=True)
        else:
            s.add_argument("--a", required=True, help="vanilla checkpoint (w = 0)")
            s.add_argument("--b", required=True, help="adapted checkpoint (w = 1)")
            s.add_argument("--grid", default="0,0.25,0.5,0.75,1")
        s.add_argument("--data-dir", required=True)
        s.add_argument("--banks-dir", required=True)
        s.add_argument("--prefix", default="heldout_", help="dataset subdirectory prefix")
        s.add_argument("--attack", default=None, help="attack config JSON (null for clean only)")
        s.add_argument("--config", default=None, help="eval config JSON")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("pseudo-label", help="label images with their nearest text row")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--tau", type=float, default=0.07)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("experiment", help="run a named recipe end to end")
    s.add_argument("name", choices=sorted(RECIPES))
    s.add_argument("--seeds", default="0")
    s.add_argument("--out", required=True)
    s.add_argument("--data-dir", default=None, help="bundle written by gen-data")
    s.add_argument("--a", default=None, help="fig6: vanilla checkpoint")
    s.add_argument("--b", default=None, help="fig6: adapted checkpoint")
    s.add_argument("--eps", type=float, default=None, help="radius in 1/255 units")
    s.set_defaults(func=cmd_experiment)
    return p


def _fail(code, err):
    line = json.dumps({"error": type(err).__name__, "exit": code, "message": str(err)}, ensure_ascii=False)
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        return _fail(EXIT_USAGE, err)
    except SystemExit as err:
        return EXIT_OK if not err.code else EXIT_USAGE
    if args.deterministic:
        T.set_deterministic(True)
    try:
        args.func(args)
    except (ConfigError, DatasetFormatError, TrainingError, T.ShapeError, FileNotFoundError,
            json.JSONDecodeError, LookupError, ValueError) as err:
        return _fail(EXIT_VALIDATION, err)
    except (T.NonFiniteError, AttackError, FloatingPointError, ArithmeticError, OSError, RuntimeError) as err:
        return _fail(EXIT_RUNTIME, err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
