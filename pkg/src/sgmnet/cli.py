"""Command-line entry point: data generation, the three training/evaluation phases, and match-viz.

Run configuration is a flat ``key = value`` file; command-line flags override
file values, which override built-in defaults.  The output directory is taken
from ``--output``, else ``$SGMNET_OUTPUT_ROOT``, else ``output_dir`` in the
file, else ``./runs``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, synthscene
from .backbone import DataError as BackboneDataError
from .backbone import PretrainConfig, backbone_state, class_accuracy, extract_spatial, load_pretrained, pretrain
from .checkpoint import CheckpointError, atomic_write_bytes, atomic_write_text
from .episodic import (MetaTrainConfig, TrainingDiverged, evaluate, load_matcher, matcher_state,
                       meta_train, metrics_json, run_baseline, split_features)
from .imageio import ImageFormatError, encode_pnm
from .matching import matching_weights
from .scene_graph import build_graph

log = logging.getLogger("sgmnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "SGMNET_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "data"
    output_dir: str = "runs"
    way: int = 5
    shot: int = 1
    queries: int = 15
    episodes: int = 600
    seed: int = 0
    pretrain_epochs: int = 12
    pretrain_batch: int = 32
    pretrain_lr: float = 0.1
    pretrain_momentum: float = 0.9
    pretrain_weight_decay: float = 5e-4
    rotation_weight: float = 1.0
    meta_epochs: int = 30
    meta_episodes: int = 200
    meta_queries: int = 15
    meta_lr: float = 3e-4
    meta_weight_decay: float = 5e-4
    meta_lr_decay: bool = True
    val_episodes: int = 100
    no_propagation: bool = False
    no_interaction: bool = False

    def validate(self) -> "RunConfig":
        if self.way < 2:
            raise ConfigError(f"way must be >= 2, got {self.way}")
        if self.shot < 1:
            raise ConfigError(f"shot must be >= 1, got {self.shot}")
        if self.queries < 1 or self.meta_queries < 1:
            raise ConfigError("queries per class must be >= 1")
        if self.episodes < 1 or self.val_episodes < 1 or self.meta_episodes < 1:
            raise ConfigError("episode counts must be >= 1")
        if self.pretrain_epochs < 1 or self.meta_epochs < 1 or self.pretrain_batch < 2:
            raise ConfigError("epoch counts must be >= 1 and the batch size >= 2")
        for name in ("pretrain_lr", "meta_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if Path(self.dataset).resolve() == Path(self.output_dir).resolve():
            raise ConfigError("dataset and output directories must differ")
        return self

    # -- artifact paths --------------------------------------------------------------------

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def pretrain_ckpt(self) -> Path:
        return self.out / "pretrain.ckpt"

    @property
    def tag(self) -> str:
        return "matcher" + ("-noprop" if self.no_propagation else "") + ("-nointer" if self.no_interaction else "")

    @property
    def matcher_ckpt(self) -> Path:
        return self.out / f"{self.tag}.ckpt"


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in dataclasses.fields(RunConfig)}.get(name)
    if kind is None:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return {"int": int, "float": float, "str": str}[kind](raw.strip())
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def config_to_text(cfg: RunConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in dataclasses.asdict(cfg).items())


def resolve_config(path: str | None, overrides: dict, env=os.environ) -> RunConfig:
    """Defaults < config file < output-root env var (output_dir only) < flags."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    if env.get(OUTPUT_ENV):
        values["output_dir"] = env[OUTPUT_ENV]
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


# -- commands ------------------------------------------------------------------------------

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _load_split_dataset(cfg: RunConfig):
    return synthscene.load_dataset(_require(Path(cfg.dataset), "dataset directory"))


def cmd_init_manifest(args) -> int:
    man = synthscene.default_manifest(seed=args.seed, images_per_class=args.images_per_class)
    atomic_write_text(args.path, synthscene.manifest_to_text(man))
    print(f"wrote manifest with {len(man.classes)} classes to {args.path}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    man = synthscene.load_manifest(_require(Path(args.manifest), "manifest"))
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} already exists and is not empty; pass --force to overwrite", file=sys.stderr)
        return EXIT_USAGE
    workers = args.workers or synthscene.default_workers()
    synthscene.generate_dataset(man, out, workers=workers)
    n = sum(1 for _ in (out / synthscene.INDEX_NAME).read_text().splitlines())
    print(f"generated {n} images in {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    ds = _load_split_dataset(cfg)
    train = ds["train"]
    labels = np.searchsorted(train.class_ids, train.labels)
    pcfg = PretrainConfig(epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch, learning_rate=cfg.pretrain_lr,
                          momentum=cfg.pretrain_momentum, weight_decay=cfg.pretrain_weight_decay,
                          rotation_weight=cfg.rotation_weight, seed=cfg.seed)
    model, hist = pretrain(train.images, labels, len(train.class_ids), pcfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(cfg.pretrain_ckpt, backbone_state(model))
    acc = class_accuracy(model, train.images, labels)
    print(f"pretrain: {cfg.pretrain_epochs} epochs, final loss {hist.epoch_loss[-1]:.4f}, "
          f"train accuracy {acc:.4f} -> {cfg.pretrain_ckpt}")
    return EXIT_OK


def _backbone(cfg: RunConfig):
    return load_pretrained(checkpoint.load(_require(cfg.pretrain_ckpt, "pre-trained checkpoint")))


def cmd_meta_train(cfg: RunConfig) -> int:
    backbone = _backbone(cfg).backbone
    ds = _load_split_dataset(cfg)
    train, val = split_features(backbone, ds["train"]), split_features(backbone, ds["val"])
    mcfg = MetaTrainConfig(way=cfg.way, shot=cfg.shot, queries=cfg.meta_queries, epochs=cfg.meta_epochs,
                           episodes_per_epoch=cfg.meta_episodes, learning_rate=cfg.meta_lr,
                           weight_decay=cfg.meta_weight_decay, lr_decay=cfg.meta_lr_decay,
                           val_episodes=cfg.val_episodes,
                           val_queries=cfg.queries, seed=cfg.seed,
                           use_propagation=not cfg.no_propagation, use_interaction=not cfg.no_interaction)
    model, hist = meta_train(train, val, mcfg, backbone=backbone)
    checkpoint.save(cfg.matcher_ckpt, matcher_state(model))
    print(f"meta-train: best val accuracy {hist.best_val:.4f} at epoch {hist.best_epoch} -> {cfg.matcher_ckpt}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, baseline: str | None) -> int:
    backbone = _backbone(cfg).backbone
    test = split_features(backbone, _load_split_dataset(cfg)["test"])
    task = f"{cfg.way}w{cfg.shot}s"
    if baseline:
        report = run_baseline(test, baseline, cfg.way, cfg.shot, cfg.queries, cfg.episodes, cfg.seed)
        doc = report.metrics(cfg.seed, task=task, method=f"baseline-{baseline}")
        name = f"metrics-baseline-{baseline}.json"
    else:
        model = load_matcher(checkpoint.load(_require(cfg.matcher_ckpt, "matcher checkpoint")))
        report = evaluate(model, test, cfg.way, cfg.shot, cfg.queries, cfg.episodes, cfg.seed)
        doc = report.metrics(cfg.seed, model.ablation, task=task, method="sgmnet")
        name = f"metrics-{cfg.tag}.json"
    atomic_write_text(cfg.out / name, metrics_json(doc))
    print(f"evaluate {doc['method']}: {task} over {report.episodes} episodes, "
          f"mean_acc {report.mean_acc:.4f} ± {report.ci95:.4f} -> {cfg.out / name}")
    return EXIT_OK


def heatmap_pgm(row: np.ndarray, grid: tuple[int, int]) -> bytes:
    """One support node's weights over the query grid, scaled so the maximum is 255."""
    scaled = np.round(row / row.max() * 255).astype(np.uint8)
    return encode_pnm(scaled.reshape(grid))


def cmd_match_viz(cfg: RunConfig, support: str, query: str, out_dir: str | None) -> int:
    backbone = _backbone(cfg).backbone
    model = load_matcher(checkpoint.load(_require(cfg.matcher_ckpt, "matcher checkpoint")))
    imgs = [synthscene.load_image(_require(Path(p), "image")) for p in (support, query)]
    g_s, g_q = (build_graph(extract_spatial(backbone, im), model.gcm) for im in imgs)
    W = matching_weights(g_s, g_q)
    out = Path(out_dir) if out_dir else cfg.out / "match-viz"
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "weights.csv", "".join(",".join(f"{v:.8g}" for v in row) + "\n" for row in W))
    for m, row in enumerate(W):
        atomic_write_bytes(out / f"node_{m:02d}.pgm", heatmap_pgm(row, model.gcm.cfg.grid))
    hits = int((W.argmax(axis=1) == np.arange(len(W))).sum())
    print(f"match-viz: {len(W)}×{W.shape[1]} weights, {hits} support nodes peak at their own position -> {out}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--dataset")
    p.add_argument("--output", dest="output_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--way", type=int)
    p.add_argument("--shot", type=int)
    p.add_argument("--queries", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--no-propagation", action="store_const", const=True, dest="no_propagation")
    p.add_argument("--no-interaction", action="store_const", const=True, dest="no_interaction")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgmnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-manifest", help="write the default dataset manifest")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images-per-class", type=int, default=60)

    p = sub.add_parser("gen-data", help="render a dataset from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("pretrain", help="pre-train the backbone on the train split")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--lr", type=float, dest="pretrain_lr")

    p = sub.add_parser("meta-train", help="episodic training of graph construction and matching")
    _add_run_flags(p)
    p.add_argument("--epochs", type=int, dest="meta_epochs")
    p.add_argument("--lr", type=float, dest="meta_lr")
    p.add_argument("--episodes-per-epoch", type=int, dest="meta_episodes")

    p = sub.add_parser("evaluate", help="few-shot evaluation on the test split")
    _add_run_flags(p)
    p.add_argument("--baseline", choices=("euclidean", "cosine"))

    p = sub.add_parser("match-viz", help="export interaction weights between two images")
    _add_run_flags(p)
    p.add_argument("--support", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out")
    return parser


RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "init-manifest":
            return cmd_init_manifest(args)
        if args.command == "gen-data":
            return cmd_gen_data(args)
        cfg = resolve_config(args.config, {k: v for k, v in vars(args).items() if k in RUN_KEYS})
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "meta-train":
            return cmd_meta_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.baseline)
        return cmd_match_viz(cfg, args.support, args.query, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, synthscene.DataError, synthscene.ManifestError, BackboneDataError,
            ImageFormatError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
