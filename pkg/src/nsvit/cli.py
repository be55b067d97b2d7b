"""Command-line entry point: ``nsvit <subcommand> [options]``.

Every subcommand writes CSVs (and, where relevant, checkpoints) into
``--out``. Settings come from flags, from a ``--config`` file of flat
``key=value`` lines, or from defaults, in that order of precedence. On
failure a one-line JSON object is written to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, checkpoint, formats
from . import rng as rngs
from .attention_null import check_conditions, construct_null_w, cross_term_residual, synth_head_params, verify_head_invariance
from .data import FORMATS, Dataset, load_dataset
from .errors import NsvitError, UsageError
from .finetune import TOY_MODEL_LR, FinetuneConfig, RoundLog, finetune, track_trend, trend_rows
from .noise import NoiseEvaluator, learn_eps_noise, learn_noise_regularized, permute_noise
from .patch_null import compute_patch_nullspace, sample_patch_noise, verify_model_invariance
from .pipeline import desk_data, pretrain
from .properties import CHECK_ALPHAS, DEFAULT_ALPHAS, convex_grid, corruption_accuracy, fgsm_accuracy, learn_noise_set, sample_pairs, scaling_sweep
from .train import TrainConfig
from .vit import ModelConfig, ViTParams, accuracy, logits

logger = logging.getLogger("nsvit")

PRECISIONS = {"float32": np.float32, "float64": np.float64}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="root seed for every random stream (default 0)")
    p.add_argument("--out", help="output directory (default: out)")
    p.add_argument("--force", action="store_true", default=None, help="overwrite existing output files")
    p.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bitwise reproducibility (env NSVIT_THREADS)")
    p.add_argument("--config", help="file of key=value lines; flags take precedence")
    p.add_argument("--precision", choices=sorted(PRECISIONS), help="float32 (default) or float64")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset file; omit to use the synthetic desk dataset")
    p.add_argument("--format", choices=FORMATS, help="format of --data (default raw-tensor)")
    p.add_argument("--eval-data", help="held-out dataset file (same format as --data)")


def _model_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model checkpoint written by `train`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsvit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nsvit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", help="pretrain a toy ViT")
    _common(p)
    _data_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("patch-null", help="patch-embedding nullspace and its invariance check")
    _common(p)
    _data_args(p)
    _model_arg(p)
    p.add_argument("--samples", type=int, help="number of nullspace noises (default 100)")
    p.add_argument("--scale-factor", type=float, help="noise norm as a multiple of the mean image norm (default 10)")
    p.add_argument("--images", type=int, help="images to check (default 500)")
    p.add_argument("--tiled", action="store_true", default=None)
    p.add_argument("--clip", action="store_true", default=None)

    p = sub.add_parser("prop1", help="construct and verify attention heads with a shared null direction")
    _common(p)
    p.add_argument("--d", type=int, help="embedding width (default 64)")
    p.add_argument("--heads", type=int, help="number of heads (default 4)")
    p.add_argument("--tokens", type=int, help="tokens per random input (default 17)")
    p.add_argument("--inputs", type=int, help="random inputs to test (default 100)")

    p = sub.add_parser("learn-noise", help="learn approximate nullspace noise")
    _common(p)
    _data_args(p)
    _model_arg(p)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--limit", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("adamw", "sgd"))
    p.add_argument("--lam", type=float, help="use the log-norm regularized objective with this strength")
    p.add_argument("--permutations", type=int, help="permuted controls to score (default 10)")

    p = sub.add_parser("finetune", help="nullspace-noise augmented fine-tuning")
    _common(p)
    _data_args(p)
    _model_arg(p)
    p.add_argument("--mode", choices=("nullspace", "random"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--noise-steps", type=int)
    p.add_argument("--model-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--noise-lr", type=float)
    p.add_argument("--model-lr", type=float, help="fine-tuning learning rate (default 5e-4 for the toy model)")
    p.add_argument("--limit", type=float)
    p.add_argument("--on-failure", choices=("skip", "abort"))
    p.add_argument("--save-rounds", action="store_true", default=None, help="write a checkpoint after every round")

    p = sub.add_parser("properties", help="scaling sweep and convex-combination grid")
    _common(p)
    _data_args(p)
    _model_arg(p)
    p.add_argument("--m", type=int, help="noises to learn (default 20)")
    p.add_argument("--n", type=int, help="pairs for the grid (default 5)")
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--noise", help="reuse noises from a container instead of learning them")

    p = sub.add_parser("fgsm", help="FGSM and Gaussian-corruption accuracy")
    _common(p)
    _data_args(p)
    _model_arg(p)
    p.add_argument("--eps-pix", type=float, help="FGSM step on [0, 1] pixels (default 1/255)")
    p.add_argument("--sigma", type=float, help="Gaussian corruption std (default 0.1)")

    p = sub.add_parser("report", help="normalized trend table from round CSVs")
    _common(p)
    p.add_argument("inputs", nargs="+", help="round CSVs written by `finetune`")
    return parser


DEFAULTS = {
    "seed": 0,
    "out": "out",
    "force": False,
    "threads": None,
    "precision": "float32",
    "verbose": False,
    "format": "raw-tensor",
    "epochs": 12,
    "batch_size": 64,
    "lr": None,
    "samples": 100,
    "scale_factor": 10.0,
    "images": 500,
    "tiled": False,
    "clip": False,
    "d": 64,
    "heads": 4,
    "tokens": 17,
    "inputs": 100,
    "eps": 0.03,
    "steps": 1000,
    "limit": 3.0,
    "optimizer": "adamw",
    "lam": None,
    "permutations": 10,
    "mode": "nullspace",
    "rounds": 10,
    "m": 20,
    "n": 5,
    "grid_step": 0.1,
    "eps_pix": 1.0 / 255.0,
    "sigma": 0.1,
    "save_rounds": False,
    "model_lr": TOY_MODEL_LR,
}


def read_config_file(path) -> dict:
    """Parse flat ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Flags beat config-file values, which beat :data:`DEFAULTS`."""
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    types = {a.dest: a for a in sub._actions}
    merged = {dest: None for dest in types if dest != "help"}
    merged.update({k: v for k, v in DEFAULTS.items() if k in types})
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            action = types.get(key)
            if action is None:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            merged[key] = _convert(action, value)
    merged.update({k: v for k, v in vars(args).items() if v is not None})
    merged["command"] = args.command
    return argparse.Namespace(**merged)


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise UsageError("no subcommands defined")


def _convert(action, value: str):
    if action.nargs == 0:
        return value.lower() in ("1", "true", "yes", "on")
    if action.type is not None:
        value = action.type(value)
    if action.choices is not None and value not in action.choices:
        raise UsageError(f"{action.dest}={value!r} is not one of {sorted(action.choices)}")
    return value


class Outputs:
    """Output directory that refuses to overwrite files unless forced."""

    def __init__(self, root, force: bool, seed: int):
        self.root = Path(root)
        self.force = force
        self.seed = seed
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.root / name
        if p.exists() and not self.force:
            raise UsageError(f"{p} exists; pass --force to overwrite")
        return p

    def csv(self, name: str, header, rows, extra: str = "") -> Path:
        p = self.path(name)
        formats.write_csv(p, header, rows, seed=self.seed, extra=extra)
        return p


def _datasets(args) -> tuple[Dataset, Dataset]:
    dtype = PRECISIONS[args.precision]
    if args.data is None:
        train, test = desk_data(args.seed)
    else:
        train = load_dataset(args.data, args.format)
        test = load_dataset(args.eval_data, args.format) if getattr(args, "eval_data", None) else train
    return train.astype(dtype), test.astype(dtype)


def _model(args) -> ViTParams:
    if not getattr(args, "model", None):
        raise UsageError(f"`{args.command}` needs --model (a checkpoint written by `train`)")
    return checkpoint.load_params(args.model, PRECISIONS[args.precision])


def cmd_train(args, out: Outputs) -> dict:
    train, test = _datasets(args)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, **({"lr": args.lr} if args.lr else {}))
    config = ModelConfig(image_size=train.images.shape[-1], channels=train.images.shape[1])
    model_path = out.path("model.ckpt")
    pre = pretrain(args.seed, train, test, config, cfg, PRECISIONS[args.precision])
    rows = [(r["epoch"], r["loss"], r["train_acc"]) for r in pre.curve]
    out.csv("train_curve.csv", ["epoch", "loss", "train_acc"], rows)
    checkpoint.save_params(model_path, pre.params, {"seed": args.seed})
    return {"train_acc": pre.train_acc, "eval_acc": pre.test_acc, "parameters": pre.params.num_parameters()}


def cmd_patch_null(args, out: Outputs) -> dict:
    if args.model:
        params = checkpoint.load_params(args.model, np.float64)
    else:
        params = ViTParams.init(ModelConfig(), rngs.stream(args.seed, rngs.MODEL_INIT), np.float64)
    basis = compute_patch_nullspace(params)
    print(f"nullspace dim {basis.dim} (patch dim {params.config.patch_dim}, rank {basis.rank})")
    if basis.is_trivial:
        out.csv("patch_null.csv", ["sample", "image", "max_logit_dev"], [])
        return {"nullspace_dim": 0}
    _, test = _datasets(args)
    images = test.images[: args.images].astype(np.float64)
    scale = args.scale_factor * float(np.mean(np.linalg.norm(images.reshape(len(images), -1), axis=1)))
    rng = rngs.stream(args.seed, rngs.NOISE_INIT)
    clean = logits(params, images)
    rows, worst, match = [], 0.0, 1.0
    for s in range(args.samples):
        noise = sample_patch_noise(basis, params.config, scale, rng, tiled=args.tiled)
        report = verify_model_invariance(params, images, noise, clip=args.clip, clean_logits=clean)
        worst = max(worst, report.max_logit_dev)
        match = min(match, report.match_rate)
        rows.extend((s, i, d) for i, d in report.rows())
    out.csv("patch_null.csv", ["sample", "image", "max_logit_dev"], rows, extra=f"dim={basis.dim}")
    return {"nullspace_dim": basis.dim, "max_logit_dev": worst, "min_match_rate": match, "noise_norm": scale}


def cmd_prop1(args, out: Outputs) -> dict:
    d, h = args.d, args.heads
    if d % h:
        raise UsageError(f"--d {d} is not divisible by --heads {h}")
    rng = rngs.stream(args.seed, "prop1")
    params = synth_head_params(d, h, d // h, None, rng)
    report = check_conditions(params)
    out.csv("conditions.csv", ["condition", "head", "residual", "pass"], report.rows())
    null = construct_null_w(params, args.tokens, rng=rng)
    rows = []
    worst = cross = control = 0.0
    for t in range(args.inputs):
        X = rng.standard_normal((args.tokens, d))
        dev = verify_head_invariance(params, X, null.W)
        ct = cross_term_residual(params, X, null.W)
        R = rng.standard_normal(null.W.shape)
        R *= np.linalg.norm(null.W) / np.linalg.norm(R)
        ctrl = verify_head_invariance(params, X, R)
        worst, cross, control = max(worst, dev.max()), max(cross, ct.max()), max(control, ctrl.min())
        rows.extend((t, i, dev[i], ct[i], ctrl[i]) for i in range(h))
    out.csv("invariance.csv", ["input", "head", "deviation", "cross_term", "random_control"], rows)
    return {"all_conditions_pass": report.all_pass, "dim_S": report.dim_s, "dim_S_perp": report.dim_s_perp,
            "max_deviation": worst, "max_cross_term": cross, "control_deviation": control}


def cmd_learn_noise(args, out: Outputs) -> dict:
    params = _model(args)
    train, test = _datasets(args)
    rng = rngs.stream(args.seed, rngs.NOISE_INIT)
    noise_path = out.path("noise.ckpt")
    if args.lam is not None:
        lr = args.lr if args.lr is not None else 0.1
        res = learn_noise_regularized(params, train, args.lam, lr, args.steps, rng, args.batch_size, optimizer=args.optimizer)
        out.csv("trace.csv", ["step", "loss", "norm", "mse_prob", "match_rate"],
                [(r["step"], r["loss"], r["norm"], r["mse_prob"], r["match_rate"]) for r in res.trace])
        noise, summary = res.noise, {"lam": args.lam}
    else:
        lr = args.lr if args.lr is not None else 0.1
        confirm = train.subset(slice(0, 512))
        res = learn_eps_noise(params, train, args.eps, lr, args.steps, args.limit, rng, args.batch_size,
                              args.optimizer, confirm_set=confirm, confirm_gate=True)
        out.csv("trace.csv", ["step", "delta", "norm"], [(r["step"], r["delta"], r["norm"]) for r in res.trace])
        noise = res.noise
        summary = {"converged": res.converged, "steps": res.steps, "delta": res.delta, "confirm_delta": res.confirm_delta}
    ev = NoiseEvaluator(params, test.images)
    learned = ev(noise)
    perm_rng = rngs.stream(args.seed, rngs.PERMUTATION)
    perms = [ev(permute_noise(noise, perm_rng)) for _ in range(args.permutations)]
    rows = [("learned", -1, noise.norm, learned.match_rate, learned.mse_prob, learned.mse_logit)]
    rows += [("permuted", i, noise.norm, m.match_rate, m.mse_prob, m.mse_logit) for i, m in enumerate(perms)]
    out.csv("noise_eval.csv", ["noise", "index", "norm", "match_rate", "mse_prob", "mse_logit"], rows)
    checkpoint.save_noise(noise_path, noise, {"seed": args.seed})
    summary.update({"norm": noise.norm, "eval_mse_prob": learned.mse_prob, "eval_match_rate": learned.match_rate,
                    "permuted_median_mse_prob": float(np.median([m.mse_prob for m in perms])) if perms else None})
    return summary


def cmd_finetune(args, out: Outputs) -> dict:
    params = _model(args)
    train, test = _datasets(args)
    known = FinetuneConfig.__dataclass_fields__
    cfg = FinetuneConfig(**{k: v for k, v in vars(args).items() if k in known and v is not None})
    rounds_path = out.path(f"rounds_{cfg.mode}.csv")
    model_path = out.path(f"model_{cfg.mode}.ckpt")
    before_clean = accuracy(params, test.images, test.labels)
    result = finetune(params, train, test, cfg, args.seed)
    formats.write_csv(rounds_path, list(RoundLog.CSV_FIELDS), [log.csv_row() for log in result.logs], seed=args.seed,
                      extra=f"mode={cfg.mode}")
    checkpoint.save_params(model_path, result.params, {"seed": args.seed, "finetune": cfg.to_dict()})
    if args.save_rounds:
        checkpoint.save_noise(out.path(f"noise_{cfg.mode}.ckpt"), result.noises)
    after = result.params
    summary = {
        "mode": cfg.mode,
        "clean_before": before_clean,
        "clean_after": accuracy(after, test.images, test.labels),
        "fgsm_after": fgsm_accuracy(after, test, DEFAULTS["eps_pix"]),
        "corruption_after": corruption_accuracy(after, test, DEFAULTS["sigma"], args.seed),
        "accepted_rounds": sum(log.accepted for log in result.logs),
    }
    out.csv(f"summary_{cfg.mode}.csv", list(summary), [list(summary.values())])
    return summary


def cmd_properties(args, out: Outputs) -> dict:
    params = _model(args)
    train, _ = _datasets(args)
    confirm = train.subset(slice(0, 512))
    if args.noise:
        noises = checkpoint.load_noise(args.noise)
    else:
        results = learn_noise_set(params, train, args.m, args.seed, eps=args.eps, confirm_set=confirm, max_steps=args.steps)
        noises = [r.noise for r in results if r.converged]
        out.csv("noise_set.csv", ["index", "converged", "steps", "delta", "confirm_delta", "norm"],
                [(i, r.converged, r.steps, r.delta, r.confirm_delta, r.noise.norm) for i, r in enumerate(results)])
        checkpoint.save_noise(out.path("noise_set.ckpt"), noises, {"seed": args.seed})
    ev = NoiseEvaluator(params, confirm.images)
    curve = scaling_sweep(params, None, noises, DEFAULT_ALPHAS, evaluator=ev)
    out.csv("scaling.csv", ["alpha", "mse_prob"], curve.rows(), extra=f"m={len(noises)}")
    pairs = sample_pairs(len(noises), args.n, rngs.stream(args.seed, rngs.PERMUTATION))
    grid = convex_grid(params, None, noises, pairs, args.grid_step, evaluator=ev)
    out.csv("grid.csv", ["alpha1", "alpha2", "mse_prob"], grid.rows(), extra=f"n={len(pairs)}")
    checks = scaling_sweep(params, None, noises, CHECK_ALPHAS, evaluator=ev)
    return {"noises": len(noises), "max_on_segment": float(grid.on_segment().max()),
            "scaling": {f"{a:g}": v for a, v in checks.rows()}}


def cmd_fgsm(args, out: Outputs) -> dict:
    params = _model(args)
    _, test = _datasets(args)
    clean = accuracy(params, test.images, test.labels)
    adv = fgsm_accuracy(params, test, args.eps_pix)
    corrupted = corruption_accuracy(params, test, args.sigma, args.seed)
    out.csv("fgsm.csv", ["eps_pix", "sigma", "clean_acc", "fgsm_acc", "corruption_acc"],
            [(args.eps_pix, args.sigma, clean, adv, corrupted)])
    return {"clean_acc": clean, "fgsm_acc": adv, "corruption_acc": corrupted}


def cmd_report(args, out: Outputs) -> dict:
    summary = {}
    for path in args.inputs:
        header, rows = formats.read_csv(path)
        logs = [dict(zip(header, row)) for row in rows]
        for log in logs:
            log["accepted"] = log.get("accepted", "true") == "true"
        trends = track_trend(logs)
        h, r = trend_rows(trends)
        name = f"trend_{Path(path).stem}.csv"
        out.csv(name, h, r)
        norm = next(t for t in trends if t.name == "norm")
        summary[Path(path).stem] = {"rounds": len(norm.values), "final_norm_ratio": float(norm.values[-1]) if len(norm.values) else None}
    return summary


COMMANDS = {
    "train": cmd_train,
    "patch-null": cmd_patch_null,
    "prop1": cmd_prop1,
    "learn-noise": cmd_learn_noise,
    "finetune": cmd_finetune,
    "properties": cmd_properties,
    "fgsm": cmd_fgsm,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = resolve(parser, argv)
        if args.threads is None and os.environ.get("NSVIT_THREADS"):
            args.threads = int(os.environ["NSVIT_THREADS"])
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        out = Outputs(args.out, args.force, args.seed)
        if args.threads is not None:
            with threadpool_limits(limits=args.threads):
                summary = COMMANDS[args.command](args, out)
        else:
            summary = COMMANDS[args.command](args, out)
    except (NsvitError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(_jsonable(summary), sort_keys=True))
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


if __name__ == "__main__":
    sys.exit(main())
