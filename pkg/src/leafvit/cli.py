"""Command-line front end: staged pipeline from ingestion to explanation.

Each command reads a JSON config (defaults built in), applies dotted
``key=value`` overrides, validates, runs one stage, and writes a resolved
config snapshot beside its artifacts.  Exit codes: 0 success, 1 runtime
failure (single-line JSON on stderr), 2 usage error, 3 config validation
error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcam, metrics, synth
from .data import (
    AugmentationSpec,
    DatasetManifest,
    SampleRecord,
    augment_training_set,
    ingest,
    make_kfolds,
    stratified_split,
)
from .imaging import ClaheParams, normalize01, preprocess_chain, read_image, write_image
from .model import ViTConfig, VisionTransformer, load_checkpoint, save_checkpoint
from .training import ImageStore, TrainConfig, evaluate, train

COMMANDS = ("ingest", "preprocess", "split", "augment", "train", "eval", "cv", "explain", "bench", "synth")

WORKDIR_ENV = "TINYVIT_WORKDIR"

MANIFEST_RAW = "manifest_raw.json"
MANIFEST_PREPROCESSED = "manifest_preprocessed.json"
MANIFEST_SPLIT = "manifest_split.json"
MANIFEST_FINAL = "manifest_final.json"


class ConfigError(ValueError):
    """Config validation failure; carries the dotted field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def default_config() -> dict:
    return {
        "seed": 42,
        "threads": 1,
        "paths": {
            "data_root": "data",
            "work_dir": None,      # None -> $TINYVIT_WORKDIR or "work"
            "out_dir": "out",
        },
        "synth": {"n_per_class": 500, "image_size": 64},
        "preprocess": {
            "resize": [64, 64],
            "clahe": {"tiles_x": 8, "tiles_y": 8, "clip_factor": 2.0, "bins": 256},
            "blur": {"kernel_size": 5, "sigma": 1.0},
        },
        "split": {"ratios": [0.75, 0.10, 0.15]},
        "augment": {
            "hflip_prob": 0.5,
            "rotation_deg": 15.0,
            "zoom": [0.9, 1.1],
            "brightness": [0.9, 1.1],
            "copies": 3,
        },
        "model": {
            "image_size": 64,
            "patch_size": 8,
            "embed_dim": 64,
            "depth": 2,
            "heads": 4,
            "mlp_ratio": 4,
            "num_classes": 3,
            "customized": True,
            "dropout": 0.0,
        },
        "train": {
            "epochs": 5,
            "batch_size": 64,
            "learning_rate": 3e-4,
            "weight_decay": 0.05,
            "warmup_fraction": 0.1,
            "clip_grad_norm": 1.0,
        },
        "metrics": {
            "kfolds": 5,
            "resamples": 2000,
            "level": 0.95,
            "ci_statistic": "mcc",
            "cv_epochs": 4,
        },
        "explain": {"target_block": None, "class_idx": None, "image": None},
        "bench": {"batch_size": 16, "repeats": 5, "warmup": 1, "depth_scale": 2, "width_scale": 2},
    }


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    config = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, _, raw = item.partition("=")
        parts = key.split(".")
        node = config
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(".".join(parts[: i + 1]), "unknown config section")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(key, "unknown config field")
        node[parts[-1]] = _coerce(raw)
    return config


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    config = default_config()
    if config_path:
        try:
            user = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("config", f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {config_path}: {e}")
        config = _merge(config, user, "")
    return apply_overrides(config, overrides)


def _merge(base: dict, user: dict, prefix: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(path, "unknown config field")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, path + ".")
        else:
            out[key] = value
    return out


# -- typed views over the config dict ---------------------------------------


def _field(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def _build(path: str, builder):
    try:
        obj = builder()
        if hasattr(obj, "validate"):
            obj.validate()
        return obj
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e))


def model_config(cfg: dict) -> ViTConfig:
    return _build("model", lambda: ViTConfig(**cfg["model"]))


def train_config(cfg: dict, epochs: int | None = None) -> TrainConfig:
    section = dict(cfg["train"])
    if epochs is not None:
        section["epochs"] = epochs
    section["seed"] = cfg["seed"]
    return _build("train", lambda: TrainConfig(**section))


def clahe_params(cfg: dict) -> ClaheParams:
    return _build("preprocess.clahe", lambda: ClaheParams(**cfg["preprocess"]["clahe"]))


def augmentation_spec(cfg: dict) -> AugmentationSpec:
    section = dict(cfg["augment"])
    section["zoom"] = tuple(section["zoom"])
    section["brightness"] = tuple(section["brightness"])
    return _build("augment", lambda: AugmentationSpec(**section))


class Paths:
    def __init__(self, cfg: dict):
        p = cfg["paths"]
        self.data_root = Path(p["data_root"])
        work = p["work_dir"] or os.environ.get(WORKDIR_ENV) or "work"
        self.work_dir = Path(work)
        self.out_dir = Path(p["out_dir"])

    def require(self, *paths: Path) -> None:
        for path in paths:
            if not path.exists():
                raise FileNotFoundError(f"required path does not exist: {path}")


def write_snapshot(directory: Path, command: str, cfg: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "config": cfg}
    (directory / f"config_snapshot_{command}.json").write_text(
        json.dumps(snapshot, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


# -- stage implementations ----------------------------------------------------


def cmd_synth(cfg: dict, paths: Paths) -> None:
    synth.generate_dataset(
        paths.data_root,
        n_per_class=int(cfg["synth"]["n_per_class"]),
        image_size=int(cfg["synth"]["image_size"]),
        seed=int(cfg["seed"]),
    )
    write_snapshot(paths.data_root, "synth", cfg)


def cmd_ingest(cfg: dict, paths: Paths) -> None:
    paths.require(paths.data_root)
    manifest = ingest(paths.data_root, seed=int(cfg["seed"]), base_dir=paths.work_dir)
    manifest.save(paths.work_dir / MANIFEST_RAW)
    write_snapshot(paths.work_dir, "ingest", cfg)


def cmd_preprocess(cfg: dict, paths: Paths) -> None:
    src = paths.work_dir / MANIFEST_RAW
    paths.require(src)
    manifest = DatasetManifest.load(src)
    out_h, out_w = (int(v) for v in cfg["preprocess"]["resize"])
    cl = clahe_params(cfg)
    blur = cfg["preprocess"]["blur"]
    records = []
    for rec in manifest.records:
        img = read_image(manifest.resolve(rec))
        processed = preprocess_chain(img, out_h, out_w, cl, int(blur["kernel_size"]), float(blur["sigma"]))
        rel = f"preprocessed/{rec.class_name}/{Path(rec.path).stem}.png"
        dest = paths.work_dir / rel
        dest.parent.mkdir(parents=True, exist_ok=True)
        write_image(dest, processed)
        records.append(replace(rec, path=rel))
    out = DatasetManifest(labels=dict(manifest.labels), records=records,
                          seed=manifest.seed, base_dir=paths.work_dir)
    out.save(paths.work_dir / MANIFEST_PREPROCESSED)
    write_snapshot(paths.work_dir, "preprocess", cfg)


def cmd_split(cfg: dict, paths: Paths) -> None:
    src = paths.work_dir / MANIFEST_PREPROCESSED
    paths.require(src)
    manifest = DatasetManifest.load(src)
    ratios = tuple(float(r) for r in cfg["split"]["ratios"])
    result = stratified_split(manifest, ratios=ratios, seed=int(cfg["seed"]))
    result.save(paths.work_dir / MANIFEST_SPLIT)
    write_snapshot(paths.work_dir, "split", cfg)


def cmd_augment(cfg: dict, paths: Paths) -> None:
    src = paths.work_dir / MANIFEST_SPLIT
    paths.require(src)
    manifest = DatasetManifest.load(src)
    spec = augmentation_spec(cfg)
    result = augment_training_set(manifest, spec, seed=int(cfg["seed"]), work_dir=paths.work_dir)
    result.save(paths.work_dir / MANIFEST_FINAL)
    write_snapshot(paths.work_dir, "augment", cfg)


def _training_manifest(paths: Paths) -> DatasetManifest:
    for name in (MANIFEST_FINAL, MANIFEST_SPLIT):
        candidate = paths.work_dir / name
        if candidate.exists():
            return DatasetManifest.load(candidate)
    raise FileNotFoundError(f"no split manifest found under {paths.work_dir}; run split/augment first")


def cmd_train(cfg: dict, paths: Paths) -> None:
    manifest = _training_manifest(paths)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg)
    model = VisionTransformer.build(mcfg, init_seed=int(cfg["seed"]))
    store = ImageStore()
    best, log = train(model, manifest, manifest, tcfg, store=store)
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(paths.out_dir / "checkpoint.bin", best)
    log.to_csv(paths.out_dir / "trainlog.csv")
    write_snapshot(paths.out_dir, "train", cfg)


def cmd_eval(cfg: dict, paths: Paths) -> None:
    manifest = _training_manifest(paths)
    checkpoint = paths.out_dir / "checkpoint.bin"
    paths.require(checkpoint)
    model = load_checkpoint(checkpoint)
    store = ImageStore()
    timings: dict[str, float] = {}
    outcome_box: list = []
    metrics.measure_phase(
        "test_inference",
        lambda: outcome_box.append(evaluate(model, manifest, store, split="test")),
        timings=timings,
    )
    outcome = outcome_box[0]
    labels = np.array([r.class_id for r in manifest.by_split("test")], dtype=np.int64)
    m = cfg["metrics"]
    report_box: list = []
    metrics.measure_phase(
        "metrics",
        lambda: report_box.append(
            metrics.build_eval_report(
                labels,
                outcome.predictions,
                k=len(manifest.labels),
                ci_statistic=str(m["ci_statistic"]),
                resamples=int(m["resamples"]),
                level=float(m["level"]),
                seed=int(cfg["seed"]),
            )
        ),
        timings=timings,
    )
    report = report_box[0]
    report.timings = timings
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(paths.out_dir / "eval_report.json")
    metrics.confusion_to_csv(np.array(report.confusion), manifest.class_names(),
                             paths.out_dir / "confusion.csv")
    write_snapshot(paths.out_dir, "eval", cfg)


def cmd_cv(cfg: dict, paths: Paths) -> None:
    src = paths.work_dir / MANIFEST_PREPROCESSED
    paths.require(src)
    manifest = DatasetManifest.load(src)
    m = cfg["metrics"]
    cv_epochs = m["cv_epochs"]
    tcfg = train_config(cfg, epochs=int(cv_epochs) if cv_epochs else None)
    report = metrics.run_cross_validation(
        manifest,
        model_config(cfg),
        tcfg,
        k=int(m["kfolds"]),
        seed=int(cfg["seed"]),
        work_dir=paths.work_dir / "cv",
        aug_spec=augmentation_spec(cfg),
    )
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    report.to_json(paths.out_dir / "cv_report.json")
    write_snapshot(paths.out_dir, "cv", cfg)


def cmd_explain(cfg: dict, paths: Paths) -> None:
    checkpoint = paths.out_dir / "checkpoint.bin"
    paths.require(checkpoint)
    model = load_checkpoint(checkpoint)
    image_path = cfg["explain"]["image"]
    if not image_path:
        raise ConfigError("explain.image", "an input image path is required")
    img_u8 = read_image(image_path)
    if img_u8.shape[2] == 1:
        img_u8 = np.repeat(img_u8, 3, axis=2)
    img = normalize01(img_u8)
    class_idx = cfg["explain"]["class_idx"]
    if class_idx is None:
        from . import tensor as T

        with T.no_grad():
            logits = model.forward(img[None])
        class_idx = int(np.argmax(logits.data[0]))
    heatmap = gradcam.compute_gradcam(model, img, int(class_idx), cfg["explain"]["target_block"])
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    heatmap.to_csv(paths.out_dir / "heatmap.csv")
    gradcam.save_overlay(heatmap, img_u8, paths.out_dir / "overlay.png")
    write_snapshot(paths.out_dir, "explain", cfg)


def cmd_bench(cfg: dict, paths: Paths) -> None:
    from . import tensor as T

    b = cfg["bench"]
    mcfg = model_config(cfg)
    big = replace(
        mcfg,
        depth=mcfg.depth * int(b["depth_scale"]),
        embed_dim=mcfg.embed_dim * int(b["width_scale"]),
    )
    batch = np.clip(
        rng_images(int(b["batch_size"]), mcfg.image_size, int(cfg["seed"])), 0.0, 1.0
    ).astype(np.float32)
    results = {}
    for name, config in (("base", mcfg), ("scaled", big)):
        model = VisionTransformer.build(config, init_seed=int(cfg["seed"]))

        def thunk():
            with T.no_grad():
                model.forward(batch)

        results[name] = metrics.measure_phase(
            name, thunk, repeats=int(b["repeats"]), warmup=int(b["warmup"])
        )
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    (paths.out_dir / "bench.json").write_text(
        json.dumps({"seconds": results, "batch_size": int(b["batch_size"])}, indent=1, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    write_snapshot(paths.out_dir, "bench", cfg)


def rng_images(batch: int, image_size: int, seed: int) -> np.ndarray:
    from .seeding import rng_for

    return rng_for(seed, 0xBE7C).random((batch, image_size, image_size, 3))


_HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "explain": cmd_explain,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leafvit",
        description="Staged pipeline: synth/ingest -> preprocess -> split -> augment -> train -> eval/cv/explain/bench",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file; defaults are built in")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--threads", type=int, help="cap intra-stage parallelism; 1 = deterministic mode")
    parser.add_argument("--out", help="override paths.out_dir")
    parser.add_argument("--data-root", help="override paths.data_root")
    parser.add_argument("--work", help="override paths.work_dir")
    parser.add_argument("overrides", nargs="*", help="dotted config overrides, e.g. train.epochs=3")
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        cfg = load_config(args.config, list(args.overrides))
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        if args.threads is not None:
            cfg["threads"] = int(args.threads)
        if args.out:
            cfg["paths"]["out_dir"] = args.out
        if args.data_root:
            cfg["paths"]["data_root"] = args.data_root
        if args.work:
            cfg["paths"]["work_dir"] = args.work
        paths = Paths(cfg)
        _validate_command_config(args.command, cfg)
    except ConfigError as e:
        print(json.dumps({"error": str(e), "command": args.command, "field": e.path}),
              file=sys.stderr)
        return 3

    try:
        with _thread_limit(int(cfg["threads"])):
            _HANDLERS[args.command](cfg, paths)
    except ConfigError as e:
        print(json.dumps({"error": str(e), "command": args.command, "field": e.path}), file=sys.stderr)
        return 3
    except Exception as e:
        print(json.dumps({"error": f"{type(e).__name__}: {e}", "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


def _validate_command_config(command: str, cfg: dict) -> None:
    """Fail fast (exit 3) on invalid sub-configs before touching the filesystem."""
    if command in ("train", "eval", "cv", "explain", "bench"):
        model_config(cfg)
    if command in ("train", "cv"):
        train_config(cfg)
    if command == "preprocess":
        clahe_params(cfg)
    if command in ("augment", "cv"):
        augmentation_spec(cfg)
    if command == "split":
        ratios = cfg["split"]["ratios"]
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
            raise ConfigError("split.ratios", f"three ratios summing to 1 required, got {ratios}")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", f"seed must be an integer, got {cfg['seed']!r}")
    if not isinstance(cfg["threads"], int) or cfg["threads"] < 1:
        raise ConfigError("threads", f"threads must be a positive integer, got {cfg['threads']!r}")


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=threads)
    except ImportError:  # pragma: no cover - threadpoolctl is a declared dep
        import contextlib

        return contextlib.nullcontext()


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
