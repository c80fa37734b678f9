"""Command-line pipeline: prepare, train, index, query, evaluate.

A JSON config file is the source of truth; command-line flags override
individual fields, and the materialized result (every default filled in)
is written as config.json in the output directory, in canonical form:
sorted keys, two-space indent, trailing newline. Re-serializing a parsed
canonical config reproduces it byte for byte. Commands downstream of
train read {output_dir}/config.json automatically unless --config points
elsewhere, so one training run anchors the whole pipeline.

Exit codes: 0 success, 2 input data error, 3 configuration error,
4 numerical abort during training, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    generate_synthetic_corpus,
    ingest_directory,
    preprocess_image,
    read_pgm,
    split_dataset,
    write_corpus,
)
from .errors import (
    CbirError,
    ConfigurationError,
    FormatError,
    InputError,
    StaleIndexError,
    TrainingDiverged,
    TruncatedFileError,
    VersionMismatchError,
)
from .metrics import (
    PRCurve,
    classification_report,
    confusion_matrix,
    emit_pr_plot_data,
    format_report,
    mean_average_precision,
    retrieval_pr,
)
from .network import Network, build_architecture, load_checkpoint, save_checkpoint
from .retrieval import build_index, load_index, query, save_index
from .training import TrainConfig, train

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

FEATURE_LAYERS = ("fc1", "fc2", "fc3")

CHECKPOINT_NAME = "model.ckpt"
INDEX_NAME = "features.idx"
CONFIG_NAME = "config.json"


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline, with defaults materialized."""

    data_dir: str = None
    output_dir: str = "run_output"
    image_size: int = 224
    train_fraction: float = 0.7
    split_seed: int = 0
    scale: float = 1.0
    keep_prob: float = 0.5
    init_seed: int = 0
    init_std: float = 0.01
    learning_rate: float = 1e-4
    max_epochs: int = 30
    train_seed: int = 0
    shuffle_each_epoch: bool = True
    log_interval: int = 0
    layer: str = "fc1"
    k: int = 20
    use_class_filter: bool = True

    def __post_init__(self):
        if self.layer not in FEATURE_LAYERS:
            raise ConfigurationError(
                f"layer must be one of {FEATURE_LAYERS}, got {self.layer!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if not self.init_std > 0.0:
            raise ConfigurationError(
                f"init_std must be positive, got {self.init_std}")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def field_names(cls):
        return {f.name for f in fields(cls)}


def load_run_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    unknown = set(raw) - RunConfig.field_names()
    if unknown:
        raise ConfigurationError(
            f"config {path} has unknown fields: {sorted(unknown)}")
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"config {path}: {exc}") from exc


def resolve_config(args):
    """Config file (explicit, or inherited from the output dir) + flag overrides."""
    overrides = {name: getattr(args, name)
                 for name in RunConfig.field_names()
                 if getattr(args, name, None) is not None}
    config_path = getattr(args, "config", None)
    if config_path is None:
        out = overrides.get("output_dir", RunConfig.output_dir)
        inherited = Path(out) / CONFIG_NAME
        if inherited.is_file():
            config_path = inherited
    if config_path is not None:
        base = asdict(load_run_config(config_path))
    else:
        base = {}
    base.update(overrides)
    try:
        return RunConfig(**base)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def write_run_config(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_json())


def _load_pipeline_inputs(cfg, need_index=False):
    """Checkpoint (and optionally index) from the configured output dir."""
    out = Path(cfg.output_dir)
    ckpt_path = out / CHECKPOINT_NAME
    if not ckpt_path.is_file():
        raise InputError(f"no checkpoint at {ckpt_path}; run train first")
    net, metadata = load_checkpoint(ckpt_path)
    index = None
    if need_index:
        idx_path = out / INDEX_NAME
        if not idx_path.is_file():
            raise InputError(f"no index at {idx_path}; run index first")
        index = load_index(idx_path, expected_fingerprint=net.fingerprint())
    return net, metadata, index


def _ingest_split(cfg, expected_class_names=None):
    if cfg.data_dir is None:
        raise ConfigurationError("data_dir is not set; pass --data-dir or a config")
    samples, class_names, skipped = ingest_directory(
        cfg.data_dir, out_size=cfg.image_size)
    if skipped:
        print(f"warning: skipped {skipped} undecodable file(s)",
              file=sys.stderr)
    if (expected_class_names is not None
            and list(class_names) != list(expected_class_names)):
        raise StaleIndexError(
            f"checkpoint was trained on classes {list(expected_class_names)} "
            f"but {cfg.data_dir} contains {list(class_names)}")
    return split_dataset(samples, class_names,
                         train_fraction=cfg.train_fraction,
                         rng_seed=cfg.split_seed), class_names


def cmd_prepare(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise InputError(
            f"{out} already exists and is not empty; pass --force to overwrite")
    if not args.synthetic:
        raise ConfigurationError(
            "only synthetic corpus generation is supported; pass --synthetic")
    samples, class_names = generate_synthetic_corpus(
        args.classes, args.per_class, args.size, rng_seed=args.seed)
    manifest = write_corpus(samples, class_names, out,
                            extra={"seed": args.seed})
    print(f"wrote {manifest['num_files']} images in {len(class_names)} "
          f"classes to {out}")
    print(f"manifest sha256 {manifest['sha256']}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    split, class_names = _ingest_split(cfg)
    spec = build_architecture(
        input_shape=(1, cfg.image_size, cfg.image_size),
        num_classes=len(class_names),
        keep_prob=cfg.keep_prob,
        scale=cfg.scale)
    net = Network.from_spec(spec)
    net.initialize(cfg.init_seed, weight_std=cfg.init_std)
    train_config = TrainConfig(
        learning_rate=cfg.learning_rate,
        max_epochs=cfg.max_epochs,
        rng_seed=cfg.train_seed,
        shuffle_each_epoch=cfg.shuffle_each_epoch,
        log_interval=cfg.log_interval)
    report = train(net, split.train, train_config)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, net, metadata={
        "class_names": list(class_names),
        "image_size": cfg.image_size,
        "scale": cfg.scale,
        "final_train_error": report.final_train_error,
    })
    (out / "train_report.tsv").write_text(report.to_tsv())
    write_run_config(cfg)
    print(f"trained {cfg.max_epochs} epochs on {len(split.train)} samples; "
          f"final mean loss {report.epoch_losses[-1]:.6f}, "
          f"train error {report.final_train_error:.4f}")
    print(f"checkpoint written to {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_index(args):
    cfg = resolve_config(args)
    net, metadata, _ = _load_pipeline_inputs(cfg)
    split, _ = _ingest_split(cfg, expected_class_names=metadata["class_names"])
    index = build_index(net, split.train)
    out = Path(cfg.output_dir)
    save_index(index, out / INDEX_NAME)
    write_run_config(cfg)
    print(f"indexed {len(index)} training images "
          f"({len(index.class_partitions)} predicted-class partitions)")
    print(f"index written to {out / INDEX_NAME}")
    return EXIT_OK


def cmd_query(args):
    cfg = resolve_config(args)
    net, metadata, index = _load_pipeline_inputs(cfg, need_index=True)
    raw = read_pgm(args.image)
    image = preprocess_image(raw, out_size=metadata["image_size"])
    result = query(index, net, image, cfg.layer, cfg.k,
                   use_class_filter=cfg.use_class_filter)
    class_names = metadata["class_names"]
    predicted_name = class_names[result.query_predicted_label]
    if args.json_lines:
        meta = {"query": str(args.image), "predicted_class": predicted_name,
                "layer": result.layer, "filter": result.class_filter_enabled,
                "status": result.status}
        print(json.dumps(meta, sort_keys=True))
        for rank, item in enumerate(result.items, start=1):
            print(json.dumps({
                "rank": rank, "source_id": item.source_id,
                "distance": item.distance,
                "true_class": class_names[item.true_label]}, sort_keys=True))
    else:
        print(f"query {args.image}: predicted class {predicted_name} "
              f"(layer {result.layer}, filter "
              f"{'on' if result.class_filter_enabled else 'off'})")
        if result.status == "empty-class":
            print("no indexed images share the predicted class")
        for rank, item in enumerate(result.items, start=1):
            print(f"{rank}\t{item.source_id}\t{item.distance:.9g}"
                  f"\t{class_names[item.true_label]}")
    return EXIT_OK


def _confusion_tsv(cm):
    names = cm.class_names
    lines = ["true\\predicted\t" + "\t".join(names)]
    for i, name in enumerate(names):
        row = "\t".join(str(int(v)) for v in cm.counts[i])
        lines.append(f"{name}\t{row}")
    return "\n".join(lines) + "\n"


def _mean_curve(curves):
    """Macro-average PR points across queries at each rank cutoff.

    Filtered queries can have ragged depths; cutoff j averages over the
    queries that reached it.
    """
    depth = max(len(c.points) for c in curves)
    points = []
    for j in range(depth):
        ps = [c.points[j] for c in curves if len(c.points) > j]
        points.append((float(np.mean([p[0] for p in ps])),
                       float(np.mean([p[1] for p in ps]))))
    return PRCurve(points=tuple(points), valid=True)


def cmd_evaluate(args):
    cfg = resolve_config(args)
    net, metadata, index = _load_pipeline_inputs(cfg, need_index=True)
    split, class_names = _ingest_split(
        cfg, expected_class_names=metadata["class_names"])
    out = Path(cfg.output_dir)

    true_labels, predicted_labels = [], []
    for s in split.test:
        true_labels.append(s.label)
        predicted_labels.append(net.forward_classify(s.image)[1])
    cm = confusion_matrix(true_labels, predicted_labels,
                          len(class_names), class_names=class_names)
    report = classification_report(cm)
    (out / "confusion_matrix.tsv").write_text(_confusion_tsv(cm))
    (out / "classification_report.tsv").write_text(
        format_report(report, class_names))

    db_label_counts = {}
    for r in index.records:
        db_label_counts[r.true_label] = db_label_counts.get(
            r.true_label, 0) + 1

    map_rows = []
    plot_curves = []
    for layer in FEATURE_LAYERS:
        for use_filter in (False, True):
            mode = "on" if use_filter else "off"
            triples = []
            curves = []
            for s in split.test:
                result = query(index, net, s.image, layer, cfg.k, use_filter)
                ranked = [item.true_label for item in result.items]
                total = db_label_counts.get(s.label, 0)
                triples.append((ranked, s.label, total))
                if total > 0 and ranked:
                    curves.append(retrieval_pr(ranked, s.label, total))
            map_value = mean_average_precision(triples)
            valid = sum(1 for _, _, total in triples if total > 0)
            map_rows.append((layer, mode, map_value, valid))
            if curves:
                plot_curves.append((layer, mode, _mean_curve(curves)))

    map_lines = ["layer\tfilter\tmap\tvalid_queries"]
    for layer, mode, value, valid in map_rows:
        map_lines.append(f"{layer}\t{mode}\t{value:.6f}\t{valid}")
    (out / "map_table.tsv").write_text("\n".join(map_lines) + "\n")
    emit_pr_plot_data(plot_curves, out / "pr_curves.csv")
    write_run_config(cfg)

    print(f"test accuracy {report.accuracy:.6f} "
          f"({int(round(report.accuracy * cm.total))}/{cm.total})")
    for layer, mode, value, _ in map_rows:
        print(f"mAP {layer} filter_{mode} {value:.6f}")
    print(f"metric files written under {out}")
    return EXIT_OK


def _add_config_flags(p):
    p.add_argument("--config", type=Path, default=None,
                   help="JSON config file; flags override its fields")
    p.add_argument("--data-dir", dest="data_dir", default=None)
    p.add_argument("--out", dest="output_dir", default=None)
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float,
                   default=None)
    p.add_argument("--split-seed", dest="split_seed", type=int, default=None)
    p.add_argument("--scale", dest="scale", type=float, default=None)
    p.add_argument("--keep-prob", dest="keep_prob", type=float, default=None)
    p.add_argument("--init-seed", dest="init_seed", type=int, default=None)
    p.add_argument("--init-std", dest="init_std", type=float, default=None,
                   help="weight init std; raise above 0.01 for narrow "
                        "scaled-down networks")
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--train-seed", dest="train_seed", type=int, default=None)
    p.add_argument("--log-interval", dest="log_interval", type=int,
                   default=None)
    p.add_argument("--layer", dest="layer", choices=FEATURE_LAYERS,
                   default=None)
    p.add_argument("--k", dest="k", type=int, default=None)
    p.add_argument("--filter", dest="use_class_filter",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="restrict search to the query's predicted class")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cbirnet",
        description="Train a convolutional classifier and retrieve images "
                    "by feature similarity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="generate a synthetic corpus")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", dest="per_class", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a network, write a checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build the feature index")
    _add_config_flags(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="retrieve nearest images for one query")
    _add_config_flags(p)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--json-lines", action="store_true")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="classification + retrieval metrics")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FormatError, VersionMismatchError,
            TruncatedFileError, StaleIndexError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CbirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
