"""``surfmoe`` command line: synth, preprocess, train, infer, eval, ablate.

Exit codes: 0 success, 1 usage/config, 2 data/format/I-O, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, DataError, MoeError, UsageError
from .fields import DatasetManifest, compute_norm_stats, load_sample, split_dataset

log = logging.getLogger("surfmoe")


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except ValueError:
            value = raw
        out[key.strip()] = value
    return out


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return raw


def train_config(args, extra=None):
    from .trainer import TrainConfig

    raw = _read_json(args.config)
    raw.update(extra or {})
    if args.seed is not None:
        raw["seed"] = args.seed
    if getattr(args, "entropy_mode", None):
        raw["entropy_mode"] = args.entropy_mode
    return TrainConfig.from_dict(raw)


def _split_overrides(args):
    """``spec.``-prefixed --set keys go to the synthetic spec, the rest to the train config."""
    over = parse_overrides(args.set)
    spec = {k[5:]: v for k, v in over.items() if k.startswith("spec.")}
    train = {k: v for k, v in over.items() if not k.startswith("spec.")}
    return spec, train


# -------------------------------------------------------------- subcommands

def cmd_synth(args):
    from .synthbench import SynthSpec, generate_dataset

    raw = _read_json(args.config)
    raw.update(parse_overrides(args.set))
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SynthSpec.from_dict(raw)
    manifest = generate_dataset(spec, args.out)
    print(f"wrote {len(manifest.samples)} samples to {args.out}: {manifest.counts()}")


def cmd_preprocess(args):
    raw_dir = Path(args.raw_dir)
    out = Path(args.out or raw_dir)
    over = parse_overrides(args.set)
    unknown = set(over) - {"train_frac"}
    if unknown:
        raise ConfigError(f"unknown preprocess keys: {', '.join(sorted(unknown))}")
    train_frac = float(over.get("train_frac", 0.8))
    seed = args.seed if args.seed is not None else 0
    pool = sorted(raw_dir.glob("*.csv"))
    tests = sorted((raw_dir / "test").glob("*.csv")) if (raw_dir / "test").is_dir() else []
    if not pool:
        raise UsageError(f"no sample CSV files in {raw_dir}")
    experts = None
    for path in pool + tests:
        try:
            s = load_sample(path, experts)
        except MoeError as exc:
            raise type(exc)(f"invalid sample file {path}: {exc}") from None
        if experts is None:
            experts = list(s.expert_names)
    out.mkdir(parents=True, exist_ok=True)
    entries = [(os.path.relpath(p, out), "train") for p in pool]
    entries += [(os.path.relpath(p, out), "test") for p in tests]
    manifest = split_dataset(DatasetManifest(experts, entries, seed, out), train_frac, seed)
    manifest.save(out / "manifest.json")
    compute_norm_stats(manifest.load("train")).save(out / "norm_stats.json")
    print(f"manifest {out / 'manifest.json'}: {manifest.counts()}")


def cmd_train(args):
    from . import plotting
    from .trainer import fit

    config = train_config(args, parse_overrides(args.set))
    manifest = DatasetManifest.load_file(args.manifest)
    result = fit(manifest, config, args.out, resume=args.resume)
    plotting.training_curves(result.metrics, Path(args.out) / "training_curves.png")
    last = result.metrics[-1]
    print(f"trained {len(result.metrics)} steps -> {args.out} "
          f"(val loss p={last['val_loss_pressure']}, s={last['val_loss_shear']})")


def _eval_samples(args, experts):
    if args.samples:
        return [load_sample(p, experts) for p in args.samples]
    if not args.manifest:
        raise UsageError("give --manifest or sample files")
    manifest = DatasetManifest.load_file(args.manifest)
    if list(manifest.experts) != list(experts):
        raise ConfigError(f"manifest experts {manifest.experts} differ from checkpoint {experts}")
    return manifest.load(args.split)


def cmd_infer(args):
    from . import plotting
    from .evaluator import export_vtk_polydata, infer_sample, write_inference_csv
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    samples = _eval_samples(args, ckpt.experts)
    if not samples:
        raise UsageError("no samples to run inference on")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        inf = infer_sample(ckpt.pressure_head, ckpt.shear_head, ckpt.stats, s,
                           ckpt.config.use_normals, ckpt.experts, args.force_expert)
        export_vtk_polydata(s, inf, out / f"{s.sample_id}.vtk")
        write_inference_csv(inf, out / f"{s.sample_id}.csv")
        if args.figures:
            plotting.weight_map(s, inf, out / f"{s.sample_id}_weights_p.png", "pressure")
    print(f"wrote {len(samples)} inference outputs to {out}")


def cmd_eval(args):
    from . import plotting
    from .evaluator import evaluate
    from .trainer import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    samples = _eval_samples(args, ckpt.experts)
    report, _ = evaluate(ckpt.pressure_head, ckpt.shear_head, ckpt.stats, samples,
                         ckpt.config.use_normals, ckpt.experts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    (out / "per_sample.csv").write_text(report.per_sample_csv())
    plotting.error_table(report, out / "l2_errors.png")
    print(report.to_text(), end="")


def cmd_ablate(args):
    from . import plotting
    from .synthbench import ABLATION_RUNS, SynthSpec, run_ablation_suite, write_summary

    spec_over, train_over = _split_overrides(args)
    spec_raw = _read_json(args.spec)
    spec_raw.update(spec_over)
    if args.seed is not None:
        spec_raw["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_raw)
    config = train_config(args, train_over)
    labels = args.only.split(",") if args.only else None
    if labels:
        bad = set(labels) - set(ABLATION_RUNS)
        if bad:
            raise UsageError(f"unknown ablation runs: {', '.join(sorted(bad))}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_ablation_suite(spec, config, out, labels)
    write_summary(spec, config, results, out)
    plotting.ablation_summary(results, out / "ablation.png")
    print((out / "summary.txt").read_text(), end="")
    if any(r.error for r in results):
        return 3
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="cap numerical worker threads")

    p = argparse.ArgumentParser(prog="surfmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", parents=[common], help="validate samples, split, compute stats")
    s.add_argument("raw_dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="train both gating heads")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--entropy-mode", choices=["maximize", "minimize", "none"])
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train)

    for name, func, help_ in (("infer", cmd_infer, "blend samples, export VTK and CSV"),
                              ("eval", cmd_eval, "L-2 error report against every expert")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--manifest")
        s.add_argument("--split", default="test")
        s.add_argument("--out", required=True)
        s.add_argument("samples", nargs="*")
        if name == "infer":
            s.add_argument("--force-expert", metavar="NAME")
            s.add_argument("--no-figures", dest="figures", action="store_false")
        s.set_defaults(func=func)

    s = sub.add_parser("ablate", parents=[common], help="run the entropy ablation suite")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="synthetic dataset spec JSON")
    s.add_argument("--only", help="comma-separated subset of run labels")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MOE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage; keep 2 for data errors
        return UsageError.exit_code if exc.code else 0
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                rc = args.func(args)
        else:
            rc = args.func(args)
    except MoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
