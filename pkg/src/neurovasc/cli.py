"""``neurovasc`` command line: phantom, train, eval, infer, gradcheck, summary."""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger("neurovasc")


class CLIError(Exception):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("neurovasc").joinpath("schemas", f"{name}.schema.json").read_text())


def validate_json(instance, schema_name: str) -> None:
    import jsonschema

    jsonschema.validate(instance, load_schema(schema_name))


def _write_json(path: Path, payload, schema: str = None) -> Path:
    if schema is not None:
        validate_json(payload, schema)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2))
    return path


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _load_split(manifest_path: Path, split: str):
    from .training import prepare_sample
    from .volume_io import load_manifest, load_volume, resolve

    manifest = load_manifest(manifest_path)
    samples = []
    for p in manifest.paths(split):
        s = load_volume(resolve(p, manifest_path.parent))
        s.meta.setdefault("name", Path(p).name)
        samples.append(s)
    return manifest, samples


# --------------------------------------------------------------------------- commands

def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec
    from .volume_io import write_phantom_dataset

    spec = PhantomSpec.from_dict(json.loads(Path(args.spec).read_text())) if args.spec else PhantomSpec()
    if args.count < 1:
        raise CLIError("--count must be >= 1")
    split = [float(v) for v in args.split.split(",")] if args.split else None
    try:
        manifest = write_phantom_dataset(spec, args.count, args.out, seed=args.seed, split=split)
    except OSError as exc:
        raise CLIError(str(exc)) from exc
    validate_json(manifest.to_dict(), "manifest")
    counts = {tag: len(manifest.paths(tag)) for tag in ("train", "val", "test")}
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "counts": counts}))
    return 0


def cmd_train(args) -> int:
    import torch

    from .config import load_experiment
    from .network import build_model
    from .training import evaluate, prepare_sample, save_checkpoint, train
    from .volume_io import write_phantom_dataset

    cfg = load_experiment(args.config)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.manifest is None:
        write_phantom_dataset(cfg.phantom, cfg.phantom_count, out / "data", seed=cfg.phantom.seed)
        cfg.manifest = str(out / "data" / "manifest.json")
    manifest_path = Path(cfg.manifest)
    manifest, train_raw = _load_split(manifest_path, "train")
    _, val_raw = _load_split(manifest_path, "val")
    _, test_raw = _load_split(manifest_path, "test")
    if not train_raw or not val_raw:
        raise CLIError("training needs non-empty train and val splits")
    from .phantom import class_fractions_from_labels

    fractions = class_fractions_from_labels([s.labels for s in train_raw], cfg.model.num_classes)
    if cfg.class_weights == "auto" and np.any(fractions == 0):
        raise CLIError(f"class fractions {fractions.tolist()} contain an empty class; set loss.class_weights")
    cfg.resolve_weights(fractions)
    prep = [[prepare_sample(s, cfg.target_shape) for s in split] for split in (train_raw, val_raw, test_raw)]

    run_manifest = {
        "version": _version(),
        "config_hash": cfg.config_hash(),
        "model_config_hash": cfg.model.config_hash(),
        "seed": cfg.train.seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "command": "train",
        "config": cfg.raw,
        "class_weights": list(cfg.train.loss.class_weights),
        "class_fractions": fractions.tolist(),
    }
    _write_json(out / "run_manifest.json", run_manifest, "run_manifest")

    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    checkpoint, history = train(model, prep[0], prep[1], cfg.train, cfg.sliding_window)
    checkpoint["experiment"] = cfg.raw
    save_checkpoint(checkpoint, out / "checkpoint.pt")
    (out / "history.csv").write_text(history.to_csv())
    _write_json(out / "history.json", history.to_dict(), "history")
    eval_set = prep[2] or prep[1]
    report = evaluate(model, eval_set, cfg.sliding_window)
    _write_json(out / "metrics.json", report.to_dict(), "metrics")
    (out / "metrics.csv").write_text(report.to_csv())
    print(json.dumps({"out": str(out), "epochs": len(history), "best_epoch": history.best_epoch,
                      "vessel_dsc": report.per_class.get("vessel", {}).get("DSC")}))
    return 0


def _check_compatible(model, samples) -> None:
    for s in samples:
        top = int(s.labels.max()) if s.labels.size else 0
        if top >= model.cfg.num_classes:
            raise CLIError(f"volume {s.meta.get('name')} has label {top}, model predicts {model.cfg.num_classes} classes")


def cmd_eval(args) -> int:
    from .report import write_overlays
    from .training import CheckpointError, SlidingWindowSpec, evaluate, load_checkpoint, prepare_sample

    try:
        model, ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError(str(exc)) from exc
    _, raw = _load_split(Path(args.data), args.split)
    if not raw:
        raise CLIError(f"split {args.split!r} of {args.data} is empty")
    _check_compatible(model, raw)
    target = ckpt.get("experiment", {}).get("data", {}).get("target_shape")
    samples = [prepare_sample(s, target) for s in raw]
    sw = ckpt.get("experiment", {}).get("sliding_window")
    spec = SlidingWindowSpec.from_dict(sw) if sw else SlidingWindowSpec(roi=model.cfg.patch_shape)
    if args.overlap is not None:
        spec.overlap = args.overlap
    for s in samples:
        if any(n < r for n, r in zip(s.image.shape, spec.roi)):
            raise CLIError(f"volume {s.image.shape} is smaller than the inference window {spec.roi}")
    out = Path(args.out)
    report = evaluate(model, samples, spec, save_dir=out / "predictions")
    _write_json(out / "metrics.json", report.to_dict(), "metrics")
    (out / "metrics.csv").write_text(report.to_csv())
    for i, s in enumerate(samples):
        pred = np.load(out / "predictions" / f"{i}_pred.npy")
        write_overlays(s.image, pred, s.labels, out / "overlays", str(s.meta.get("name", i)))
    print(report.to_csv(), end="")
    return 0


def cmd_infer(args) -> int:
    import torch

    from .phantom import VolumeSample
    from .training import CheckpointError, SlidingWindowSpec, load_checkpoint, prepare_sample, sliding_window_infer
    from .volume_io import load_volume, save_volume

    try:
        model, ckpt = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise CLIError(str(exc)) from exc
    sample = prepare_sample(load_volume(args.input), ckpt.get("experiment", {}).get("data", {}).get("target_shape"))
    sw = ckpt.get("experiment", {}).get("sliding_window")
    spec = SlidingWindowSpec.from_dict(sw) if sw else SlidingWindowSpec(roi=model.cfg.patch_shape)
    with torch.no_grad():
        probs = sliding_window_infer(model, sample.image, spec)
    pred = probs.argmax(dim=0).numpy().astype(np.uint8)
    meta = dict(sample.meta, source=str(args.input), prediction=True)
    save_volume(VolumeSample(sample.image, pred, meta), args.out)
    if not str(args.out).endswith(".nii.gz"):
        np.save(Path(args.out) / "probabilities.npy", probs.numpy().astype(np.float32))
    print(json.dumps({"out": str(args.out), "voxels_per_class": np.bincount(pred.ravel(),
                                                                             minlength=probs.shape[0]).tolist()}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_scope

    results = run_scope(args.scope)
    print(f"{'check':<22} {'max_rel_err':>12} {'tol':>8} {'entries':>8}  status")
    for r in results:
        print(f"{r.name:<22} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e} {r.n_entries:>8}  "
              f"{'PASS' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_summary(args) -> int:
    from .network import ModelConfig, build_model, summarize

    model_cfg = ModelConfig()
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        model_cfg = ModelConfig.from_dict(raw.get("model", raw))
    summary = summarize(build_model(model_cfg))
    payload = summary.to_dict()
    payload["model_config"] = model_cfg.to_dict()
    validate_json(payload, "summary")
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        width = max(len(k) for k in summary.breakdown)
        for k, v in summary.breakdown.items():
            print(f"{k:<{width}}  {v:>12,}")
        print(f"{'total':<{width}}  {summary.parameter_count:>12,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurovasc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    s.add_argument("--spec", help="PhantomSpec JSON file (defaults used when omitted)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", help="train,val,test ratio (default 100,10,27)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train from an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset manifest JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--overlap", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="segment one volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--scope", required=True, choices=("block", "module", "network"))
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("summary", help="parameter accounting for a model config")
    s.add_argument("--config", help="experiment or model config JSON")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_summary)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CLIError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"neurovasc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
