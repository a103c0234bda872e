"""Command-line driver: synthesis, prior extraction, training, evaluation,
ablation, gradient checking, and artifact export.

Every subcommand writes a ``run.json`` provenance record (config, seed, tool
version, input checksums) into its output directory. Exit codes: 0 success,
1 usage error, 2 divergence, 3 I/O failure.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, models, priors, trainer, weathersim
from .autograd import Tensor

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGENCE = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed(value):
    if value is not None:
        return value
    env = os.environ.get("WXADAPT_SEED")
    return int(env) if env else 0


def _write_run_record(out_dir, command, args_dict, seed, config=None, inputs=()):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "tool": "wxadapt",
        "version": __version__,
        "command": command,
        "seed": seed,
        "args": {k: v for k, v in args_dict.items() if not k.startswith("_")},
        "config": config,
        "inputs": {
            str(p): weathersim.file_checksum(p) for p in inputs if Path(p).is_file()
        },
    }
    with open(out / "run.json", "w", encoding="utf-8") as f:
        json.dump(record, f, indent=1, sort_keys=True, default=str)
    return record


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    seed = _default_seed(args.seed)
    n_val = args.n_val if args.n_val is not None else max(1, round(0.4 * args.n))
    config = weathersim.SynthConfig(
        out_dir=args.out,
        weather=args.weather,
        n_source=args.n,
        n_target=args.n,
        n_val=n_val,
        image_size=args.image_size,
        angle_range=tuple(args.angle_range),
        noise_levels=tuple(args.noise_levels),
        intensity_range=tuple(args.intensity_range),
        seed=seed,
    )
    config.validate()
    _write_run_record(args.out, "synth", vars(args), seed,
                      config=asdict(config))
    manifest = weathersim.synthesize_dataset(config)
    print(f"wrote {manifest.count('train_src')} source, "
          f"{manifest.count('train_tgt')} target, "
          f"{manifest.count('val_tgt')} val samples")
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# prior


def cmd_prior(args):
    seed = _default_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    inputs = []
    if args.image:
        jobs.append(("image", Path(args.image), None))
        inputs.append(args.image)
    if args.data:
        manifest = weathersim.load_manifest(args.data)
        inputs.append(Path(manifest.root) / "manifest.json")
        for idx in range(min(args.limit, manifest.count(args.split))):
            sample = weathersim.load_sample(manifest, args.split, idx)
            jobs.append((f"{args.split}_{idx:05d}", None, sample))
    if not jobs:
        raise UsageError("prior: provide --image or --data")
    _write_run_record(args.out, "prior", vars(args), seed, inputs=inputs)

    est_all, gt_all = [], []
    for name, image_path, sample in jobs:
        image = weathersim.load_png(image_path) if image_path else sample.image
        est = priors.estimate_prior(
            image,
            args.kind,
            refine=not args.no_refine,
            omega=args.omega,
            patch=args.patch,
            blur_radius=args.blur_radius,
            threshold=args.threshold,
        )
        stem = name if not image_path else image_path.stem
        priors.save_pri(out / f"{stem}.pri", est)
        priors.save_pgm(out / f"{stem}.pgm", est.values)
        mean = float(est.values.mean())
        line = f"{stem}: kind={args.kind} mean={mean:.4f}"
        if args.compare_gt and sample is not None and sample.gt_prior is not None:
            est_all.append(est.values.ravel())
            gt_all.append(sample.gt_prior.values.ravel())
        print(line)
    if est_all:
        r = float(np.corrcoef(np.concatenate(est_all), np.concatenate(gt_all))[0, 1])
        print(f"pearson_r_vs_gt = {r:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval


def _train_config_from_args(args, seed):
    overrides = {}
    for key in ("mode", "weather", "iterations", "lr", "batch_source",
                "batch_target", "grl_coeff", "pen_channels", "eval_interval"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.lambda_reg is not None:
        overrides["lambda_reg"] = args.lambda_reg
    overrides["seed"] = seed
    if args.config:
        return trainer.TrainConfig.from_file(args.config, **overrides)
    return trainer.TrainConfig(**overrides)


def cmd_train(args):
    seed = _default_seed(args.seed)
    config = _train_config_from_args(args, seed)
    inputs = [Path(args.data) / "manifest.json" if Path(args.data).is_dir() else args.data]
    if args.config:
        inputs.append(args.config)
    _write_run_record(args.out, "train", vars(args), seed,
                      config=config.to_dict(), inputs=inputs)
    result = trainer.train(config, args.data, args.out)
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics: {result.metrics_csv}")
    print(f"final val-target mAP@0.5 = {result.final_map:.4f}")
    return EXIT_OK


def cmd_eval(args):
    seed = _default_seed(args.seed)
    model, header = models.load_checkpoint(args.checkpoint)
    manifest = weathersim.load_manifest(args.data)
    samples = trainer.SampleBank(manifest, args.split, "gt", ()).detection_samples()
    result = trainer.evaluate_map(
        model, samples, iou_thr=args.iou, score_thresh=args.score_thresh
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _write_run_record(out, "eval", vars(args), seed,
                      inputs=[args.checkpoint])
    row = trainer._eval_row(header.get("iteration", 0), result,
                            model.config.num_classes)
    eval_csv = out / "metrics_eval.csv"
    exists = eval_csv.exists()
    with open(eval_csv, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not exists:
            writer.writerow(
                ["iteration"]
                + [f"ap_{c}" for c in weathersim.CLASS_NAMES]
                + ["map", "absent"]
            )
        writer.writerow(
            [row["iteration"]]
            + [repr(row[f"ap_{c}"]) for c in weathersim.CLASS_NAMES]
            + [repr(row["map"]), row["absent"]]
        )
    for c, ap in result.per_class_ap.items():
        print(f"AP {weathersim.CLASS_NAMES[c]}: {ap:.4f}")
    if result.absent_classes:
        print(f"absent classes (excluded): {result.absent_classes}")
    print(f"mAP@{args.iou} = {result.mean_ap:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args):
    seed = _default_seed(args.seed)
    base = trainer.TrainConfig.from_file(args.config) if args.config else (
        trainer.TrainConfig()
    )
    if args.iterations is not None:
        base = replace(base, iterations=args.iterations)
    if args.lambda_reg is not None:
        base = replace(base, lambda_reg=args.lambda_reg)
    seeds = tuple(range(seed, seed + args.seeds))
    inputs = [Path(args.data) / "manifest.json"]
    _write_run_record(args.out, "ablate", vars(args), seed,
                      config=base.to_dict(), inputs=inputs)
    table = trainer.ablation_run(
        base, args.data, args.out, modes=tuple(args.modes), seeds=seeds,
        jobs=args.jobs,
    )
    print(f"{'mode':12s} " + " ".join(f"{c:>9s}" for c in weathersim.CLASS_NAMES)
          + f" {'mAP':>9s}")
    for row in table:
        print(
            f"{row['mode']:12s} "
            + " ".join(f"{row[f'ap_{c}']:9.4f}" for c in weathersim.CLASS_NAMES)
            + f" {row['map']:9.4f}"
        )
    print(Path(args.out) / "ablation.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    from .autograd import run_all

    t0 = time.time()
    reports = run_all(seeds=range(args.seeds), corrupt_op=args.inject_bug)
    failed = []
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        print(f"{rep.name:16s} max_rel_err={rep.max_rel_error:.3e} "
              f"tol={rep.tol:g} {status}")
        if not rep.passed:
            failed.append(rep.name)
    print(f"checked {len(reports)} ops x {args.seeds} seeds in {time.time()-t0:.1f}s")
    if failed:
        print(f"FAILED ops: {', '.join(failed)}")
        return EXIT_USAGE
    return EXIT_OK


# ---------------------------------------------------------------------------
# export


def cmd_export(args):
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise OSError(f"run directory not found: {run_dir}")
    ckpt = run_dir / "checkpoint.wxa1"
    metrics = run_dir / "metrics.csv"
    if not ckpt.exists() or not metrics.exists():
        raise OSError(f"{run_dir} is not a completed training run")
    out = Path(args.out) if args.out else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)

    model, header = models.load_checkpoint(ckpt)
    config = header.get("extra", {}).get("train_config", {})
    data_dir = args.data
    if data_dir is None:
        raise UsageError("export: --data <dataset dir> is required")
    manifest = weathersim.load_manifest(data_dir)
    _write_run_record(out, "export", vars(args), header.get("iteration", 0),
                      inputs=[ckpt])

    # loss curve: one row per logged training iteration
    with open(metrics, encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    with open(out / "loss_curve.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss_total", "loss_det", "loss_adv",
                         "loss_dom", "loss_reg"])
        for row in rows:
            writer.writerow([row["iteration"], row["loss_total"], row["loss_det"],
                             row["loss_adv"], row["loss_dom"], row["loss_reg"]])

    n = min(args.n, manifest.count("val_tgt"))
    model.eval()
    weather = manifest.weather
    for idx in range(n):
        sample = weathersim.load_sample(manifest, "val_tgt", idx)
        stem = f"val_{idx:04d}"
        priors.save_pgm(out / f"{stem}_gt.pgm", sample.gt_prior.values)
        priors.save_pgm(out / f"{stem}_est.pgm", sample.est_prior.values)
        if model.config.pen_levels:
            x = Tensor(
                np.ascontiguousarray(sample.image.transpose(2, 0, 1))[None]
            )
            if model.config.rfrb_levels:
                feats, _ = model.feature_forward_target(x)
            else:
                feats = model.feature_forward_source(x)
            for level in model.config.pen_levels:
                pred = model.pen_forward(level, feats[level])
                priors.save_pgm(out / f"{stem}_pen{level}.pgm", pred.data[0, 0])
    print(f"exported {n} heatmap sets and loss_curve.csv to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring


def build_parser():
    parser = _Parser(prog="wxadapt", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a weather-degraded dataset")
    p.add_argument("--weather", choices=("haze", "rain", "snow"), default="haze")
    p.add_argument("--n", type=int, default=500,
                   help="samples per training split (source and target)")
    p.add_argument("--n-val", type=int, default=None,
                   help="validation samples (default: 0.4 * n)")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--angle-range", type=float, nargs=2, default=(70.0, 110.0),
                   metavar=("LO", "HI"))
    p.add_argument("--noise-levels", type=float, nargs="+", default=(0.2, 0.3, 0.4))
    p.add_argument("--intensity-range", type=float, nargs=2, default=(0.5, 0.9))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prior", help="extract weather priors to PRI1 + PGM")
    p.add_argument("--image", help="single PNG image")
    p.add_argument("--data", help="dataset directory (manifest.json)")
    p.add_argument("--split", default="train_tgt")
    p.add_argument("--limit", type=int, default=50)
    p.add_argument("--kind", choices=("haze", "rain", "snow"), default="haze")
    p.add_argument("--omega", type=float, default=priors.DEFAULT_OMEGA)
    p.add_argument("--patch", type=int, default=priors.DEFAULT_PATCH)
    p.add_argument("--blur-radius", type=int, default=priors.DEFAULT_RESIDUE_BLUR)
    p.add_argument("--threshold", type=float, default=priors.DEFAULT_RESIDUE_THRESHOLD)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--compare-gt", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--mode", choices=sorted(trainer.MODES), default=None)
    p.add_argument("--weather", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=None)
    p.add_argument("--grl-coeff", type=float, default=None)
    p.add_argument("--batch-source", type=int, default=None)
    p.add_argument("--batch-target", type=int, default=None)
    p.add_argument("--pen-channels", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val_tgt")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--score-thresh", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation ladder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base train config file")
    p.add_argument("--modes", nargs="+", default=list(trainer.DEFAULT_LADDER),
                   choices=sorted(trainer.MODES))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_reg", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--inject-bug", default=None, metavar="OP",
                   help="corrupt one op's analytic gradient (self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="export prior/PEN heatmaps and loss curve")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", default=None)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
