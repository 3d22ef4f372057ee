"""Command-line entry point: ``unlearnable {gen-noise,train,eval,reproduce}``.

Exit codes: 0 success, 1 error, 2 finished but noise generation did not
reach its stop error (artifacts are still written).
"""
import argparse
import json
import sys
from pathlib import Path

from .data import (CLASSWISE, SAMPLEWISE, apply_noise, load_noise, mix_unlearnable, protect_classes,
                   save_noise, transfer_noise)
from .errors import CompatibilityError, UnlearnableError
from .experiments import EXPERIMENTS, Context, load_config, mean_backdoor_asr, reproduce, validate_config
from .models import load_model, save_model
from .noise import mix_noises
from .seeds import derive_seed
from .train import (accuracy, backdoor_asr, confusion_matrix, per_class_recall, train_model, write_curve_csv,
                    write_report_json)

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2


def _config(args):
    if args.config:
        return load_config(args.config)
    return validate_config({})


def _context(args, cfg):
    out = Path(args.out or cfg.get("out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return Context.from_config(cfg, out, args.seed, args.threads)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _generate(ctx, ncfg, scenario):
    kind, form = ncfg["type"], ncfg["form"]
    patch = tuple(scenario["size"]) if scenario.get("kind") == "patch" else None
    if kind == "mixed":
        mode = ncfg.get("mix", "add")
        a = ctx.noise("error_min", CLASSWISE, patch=patch, tag="c1")
        if mode == "alternate":
            b = ctx.noise("error_min", CLASSWISE, patch=patch, tag="c2")
        else:
            b = ctx.noise("random", ncfg.get("random_form", SAMPLEWISE), patch=patch)
        return mix_noises(a, b, mode, derive_seed(ctx.seed, "mix", mode), ctx.train.labels)
    return ctx.noise(kind, form, patch=patch)


def cmd_gen_noise(args):
    cfg = _config(args)
    ctx = _context(args, cfg)
    noise = _generate(ctx, cfg["noise"], cfg["scenario"])
    save_noise(noise, ctx.out / "noise.unln")
    logs = {}
    for rel in ctx.written:
        if rel.endswith(".log.json"):
            with open(ctx.out / rel) as fh:
                logs[rel] = json.load(fh)
    _write_json(ctx.out / "generation_log.json", {"seed": ctx.seed, "components": logs,
                                                   "converged": not ctx.nonconverged})
    print(f"wrote {ctx.out / 'noise.unln'} ({noise.form}, {len(noise)} deltas, eps={noise.epsilon:.6f})")
    return EXIT_NONCONVERGED if ctx.nonconverged else EXIT_OK


def _scenario_dataset(ctx, noise, scen):
    kind = scen["kind"]
    patch_seed = derive_seed(ctx.seed, "patch")
    # UNLN files carry no patch flag, so a smaller delta is only accepted under a patch scenario
    if kind != "patch" and tuple(noise.delta_shape[1:]) != tuple(ctx.train.image_shape[1:]):
        raise CompatibilityError(f"noise deltas {noise.delta_shape} do not match images {ctx.train.image_shape}"
                                 " (use a patch scenario for patch noise)")
    if kind == "transfer":
        with open(scen["class_map"]) as fh:
            cmap = {int(k): int(v) for k, v in json.load(fh).items()}
        noise = transfer_noise(noise, cmap, ctx.train.num_classes)
    if kind == "protected_classes":
        return protect_classes(ctx.train, noise, scen["classes"], patch_seed), noise
    return apply_noise(ctx.train, noise, patch_seed), noise


def _finish_run(ctx, name, model, report):
    run_dir = ctx.out / name if name else ctx.out
    run_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, run_dir / "model.umdl")
    write_report_json(report, run_dir / "report.json")
    write_curve_csv(report, run_dir / "curve.csv")
    print(f"{name or 'run'}: final clean test acc {report.final_acc:.4f} (max {report.max_acc:.4f})")


def cmd_train(args):
    cfg = _config(args)
    ctx = _context(args, cfg)
    scen = cfg["scenario"]
    tcfg = ctx.train_config()
    if args.noise is None:
        model, report = train_model(ctx.train, ctx.test, ctx.spec, tcfg)
        _finish_run(ctx, "", model, report)
        return EXIT_OK
    noise = load_noise(args.noise)
    unl, noise = _scenario_dataset(ctx, noise, scen)
    if scen["kind"] in ("fraction", "backdoor"):
        p = float(scen.get("p", scen.get("fraction", 1.0)))
        mixed, clean_only = mix_unlearnable(ctx.train, unl, p, derive_seed(ctx.seed, "mix", f"{p:g}"))
        model, report = train_model(mixed, ctx.test, ctx.spec, tcfg)
        if scen["kind"] == "backdoor":
            report.backdoor_asr = backdoor_asr(model, ctx.test, noise, int(scen["target"]))
            _finish_run(ctx, "", model, report)
            return EXIT_OK
        _finish_run(ctx, "mixed", model, report)
        if len(clean_only):
            model, report = train_model(clean_only, ctx.test, ctx.spec, tcfg)
            _finish_run(ctx, "clean_only", model, report)
        return EXIT_OK
    model, report = train_model(unl, ctx.test, ctx.spec, tcfg)
    _finish_run(ctx, "", model, report)
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    ctx = _context(args, cfg)
    if not args.model:
        raise UnlearnableError("eval needs --model")
    model = load_model(args.model)
    if model.spec.input_shape != tuple(ctx.test.image_shape) or model.spec.num_classes != ctx.test.num_classes:
        raise CompatibilityError("checkpoint does not match the configured dataset")
    cm = confusion_matrix(model, ctx.test)
    result = {"clean_test_acc": accuracy(model, ctx.test), "confusion": cm.tolist(),
              "per_class_recall": per_class_recall(cm), "backdoor_asr": None}
    if args.noise:
        noise = load_noise(args.noise)
        if noise.form == CLASSWISE:
            target = cfg["scenario"].get("target")
            result["backdoor_asr"] = (backdoor_asr(model, ctx.test, noise, int(target)) if target is not None
                                      else mean_backdoor_asr(model, ctx.test, noise))
    _write_json(ctx.out / "eval.json", result)
    print(f"clean test acc {result['clean_test_acc']:.4f}")
    return EXIT_OK


def cmd_reproduce(args):
    if args.name not in EXPERIMENTS:
        raise UnlearnableError(f"unknown experiment {args.name!r}; valid names: {', '.join(EXPERIMENTS)}")
    cfg = _config(args)
    ctx = _context(args, cfg)
    summary = reproduce(args.name, ctx)
    for run in summary.get("runs", []):
        extra = f" asr={run['backdoor_asr']:.3f}" if run.get("backdoor_asr") is not None else ""
        print(f"{run['run']:<40} final={run['final_acc']:.4f} max={run['max_acc']:.4f}{extra}")
    return EXIT_NONCONVERGED if summary["nonconverged"] else EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (JSON)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads for independent runs")

    parser = argparse.ArgumentParser(prog="unlearnable", parents=[common],
                                     description="Generate error-minimizing noise and evaluate unlearnability.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-noise", parents=[common], help="generate a noise set")
    p.set_defaults(func=cmd_gen_noise)
    p = sub.add_parser("train", parents=[common], help="train a victim (optionally on noisy data)")
    p.add_argument("--noise", help="UNLN noise file")
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the clean test set")
    p.add_argument("--model", required=True, help="UMDL checkpoint")
    p.add_argument("--noise", help="class-wise UNLN file for backdoor ASR")
    p.set_defaults(func=cmd_eval)
    p = sub.add_parser("reproduce", parents=[common], help="run a canned experiment")
    p.add_argument("name", help=", ".join(EXPERIMENTS))
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("out", None), ("seed", None), ("threads", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if getattr(args, "noise", None) is None:
        args.noise = None
    try:
        return args.func(args)
    except (UnlearnableError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
