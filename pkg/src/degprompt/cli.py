"""``degprompt`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every subcommand
accepts ``--config FILE`` with ``key = value`` lines (``[section]``
headers are ignored, keys use flag names); explicit flags override it.
The resolved configuration is printed to stderr before work starts.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

__all__ = ["run", "main"]

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="key = value file merged under the flags")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("-v", "--verbose", action="store_true")


def _build_parser():
    parser = _Parser(prog="degprompt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("degrade", help="degrade one image")
    _common(p)
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blur", type=float, help="blur sigma (explicit single-stage mode)")
    p.add_argument("--noise", type=float, help="noise sigma in 0-255 units (explicit mode)")
    p.add_argument("--jpeg", type=int, help="JPEG quality (explicit mode)")
    p.add_argument("--resize", type=float, default=1.0, help="stage resize factor (explicit mode)")
    p.add_argument("--scale", type=int, default=4)

    p = sub.add_parser("make-corpus", help="write procedural stand-in HR images")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-dataset", help="build a triplet dataset from a corpus")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, default=1, help="patches per corpus image")
    p.add_argument("--patch", type=int, default=512, help="HR patch size")
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--sweep", choices=["blur", "noise", "jpeg"],
                   help="single-factor sweep instead of random recipes")
    p.add_argument("--per-interval", type=int, default=25, help="records per interval in sweep mode")

    p = sub.add_parser("train", help="train the estimator on a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-params", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--ffn-hidden", type=int, default=128)
    p.add_argument("--align-weight", type=float, default=0.1)

    p = sub.add_parser("estimate", help="print the degradation prompt for an LR image")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)

    p = sub.add_parser("eval", help="accuracy report on a manifest split")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "all"])
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("monotonicity", help="mean PSNR per interval of a sweep manifest")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--type", dest="which", choices=["blur", "noise", "jpeg"], required=True)
    p.add_argument("--min-per-interval", type=int, default=25)

    p = sub.add_parser("annotate", help="attach captions from a caption endpoint")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--endpoint", help="caption URL (default: $DEGPROMPT_CAPTION_ENDPOINT)")
    p.add_argument("--tags", default="object",
                   help="comma-separated constant tags, or 'sidecar' for hr/NNNNNN.tags files")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=2)
    p.add_argument("--concurrency", type=int, default=4)
    return parser


def _read_config(path):
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    text = path.read_text(encoding="utf-8")
    cp.read_string("[__root__]\n" + text)
    values = {}
    for section in cp.sections():
        values.update(cp[section])
    return values


def _apply_config(subparser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    actions = {a.dest: a for a in subparser._actions}
    for opt_action in subparser._actions:
        for s in opt_action.option_strings:
            actions.setdefault(s.lstrip("-").replace("-", "_"), opt_action)
    defaults = {}
    for key, raw in _read_config(known.config).items():
        action = actions.get(key.replace("-", "_"))
        if action is None or action.dest in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            value = action.type(raw) if action.type else raw
            if action.choices and value not in action.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[action.dest] = value
    subparser.set_defaults(**defaults)
    # a value from the config satisfies a required flag
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False


def _resolved(args):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, default=str))
    else:
        print(text)


def _cmd_degrade(args):
    from .degradation import DegradationRecipe, DegradationStage, apply_recipe, effective_degrees, sample_stage
    from .imaging import load_image, rng_for, save_image
    from .prompts import RestorationPrompt

    explicit = any(v is not None for v in (args.blur, args.noise, args.jpeg))
    if explicit:
        stage = DegradationStage(args.blur, None if args.noise is None else args.noise / 255.0,
                                 args.jpeg, args.resize)
        recipe = DegradationRecipe((stage,), args.scale, args.seed)
    else:
        rng = rng_for(args.seed, 0)
        recipe = DegradationRecipe((sample_stage(rng), sample_stage(rng)), args.scale, rng.draw_seed())
    lr = apply_recipe(load_image(args.input), recipe)
    save_image(lr, args.out)
    degrees = effective_degrees(recipe)
    prompt = RestorationPrompt.from_degrees(degrees).text
    _emit(args, {"recipe": recipe.to_dict(), "seed": recipe.seed, "degrees": degrees.to_dict(),
                 "prompt": prompt, "out": str(args.out)}, prompt)


def _cmd_make_corpus(args):
    from .synthetic import make_corpus

    paths = make_corpus(args.out, args.count, args.size, args.seed)
    _emit(args, {"images": [str(p) for p in paths]}, f"wrote {len(paths)} images to {args.out}")


def _cmd_gen_dataset(args):
    from .dataset import DatasetConfig, build_dataset, build_sweep_dataset, read_manifest_header

    cfg = DatasetConfig(hr_patch_size=args.patch, final_scale=args.scale, patches_per_image=args.n,
                        global_seed=args.seed, train_fraction=1.0 - args.val_frac,
                        val_fraction=args.val_frac)
    if args.sweep:
        path = build_sweep_dataset(args.corpus, args.out, cfg, args.sweep, args.per_interval, args.workers)
    else:
        path = build_dataset(args.corpus, args.out, cfg, args.workers)
    head = read_manifest_header(path)
    _emit(args, {"manifest": str(path), **head},
          f"wrote {head['n_records']} records to {path} (skipped {head['skipped_undersized']} images)")


def _cmd_train(args):
    from .estimator import TrainConfig, save_params, train

    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                      patch_size=args.patch_size, d_model=args.d_model, ffn_hidden=args.ffn_hidden,
                      alignment_weight=args.align_weight)
    params, history = train(args.manifest, cfg)
    save_params(params, args.out_params, {"train_config": vars(cfg)})
    last_val = history["val_accuracy"][-1] if history["val_accuracy"] else None
    _emit(args, {"params": str(args.out_params), "history": history},
          f"final train loss {history['train_loss'][-1]:.4f}; val accuracy {last_val}")


def _cmd_estimate(args):
    from .estimator import estimate, load_params
    from .imaging import load_image

    prompt = estimate(load_image(args.image), load_params(args.params))
    _emit(args, {"prompt": prompt.text, "intervals": list(prompt.intervals)}, prompt.text)


def _cmd_eval(args):
    from .dataset import read_manifest
    from .estimator import load_params
    from .metrics import evaluate_estimator

    records = read_manifest(args.manifest)
    split = None if args.split == "all" else args.split
    report = evaluate_estimator(records, load_params(args.params), args.manifest.parent, split, args.workers)
    _emit(args, report.to_dict(), report.to_text())


def _cmd_monotonicity(args):
    from .dataset import read_manifest
    from .metrics import monotonicity_report

    report = monotonicity_report(read_manifest(args.manifest), args.which, args.manifest.parent,
                                 args.min_per_interval)
    _emit(args, report.to_dict(), " > ".join(f"{v:.2f}" for v in report.mean_psnr) + " dB")


def _cmd_annotate(args):
    from .captions import annotate_manifest

    tags = "sidecar" if args.tags == "sidecar" else [t for t in args.tags.split(",") if t.strip()]
    summary = annotate_manifest(args.manifest, args.endpoint, tags, timeout=args.timeout,
                                retries=args.retries, max_concurrency=args.concurrency)
    _emit(args, vars(summary),
          f"annotated {summary.annotated}, skipped {summary.skipped}, failed {summary.failed}")
    if summary.failed:
        print(f"warning: {summary.failed} record(s) left without a caption", file=sys.stderr)


_COMMANDS = {
    "degrade": _cmd_degrade,
    "make-corpus": _cmd_make_corpus,
    "gen-dataset": _cmd_gen_dataset,
    "train": _cmd_train,
    "estimate": _cmd_estimate,
    "eval": _cmd_eval,
    "monotonicity": _cmd_monotonicity,
    "annotate": _cmd_annotate,
}


def run(argv=None):
    """Parse ``argv`` and run one subcommand; returns the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        cmd = next((a for a in argv if a in subparsers.choices), None)
        if cmd is not None:
            _apply_config(subparsers.choices[cmd], argv)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print("config: " + json.dumps(_resolved(args), sort_keys=True), file=sys.stderr)
    try:
        _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - runtime errors map to exit code 2
        print(f"degprompt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
