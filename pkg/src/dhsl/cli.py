"""Command-line entry point: dataset synthesis, training, evaluation, and
parameter accounting.

Configuration is layered: built-in defaults, then a flat key=value --config
file, then explicit flags. The effective configuration of every run is echoed
to ``run_config.txt`` in the output directory; re-running from that file
reproduces the run.

Exit codes: 0 success, 2 config error, 3 data error, 4 training divergence,
5 io error.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import data, evaluation, layers, similarity
from .errors import (CheckpointFormatError, ConfigError, DataError,
                     ProtocolError, TrainingDivergenceError)
from .model import build_model
from .training import TrainConfig, load_checkpoint, run_training, save_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_IO = 5

# Every configurable key with its type and default; None means "must be given
# on the command line when the subcommand requires it".
CONFIG_SCHEMA = {
    # training hyperparameters (TrainConfig)
    "alpha": (float, 5e-2),
    "batch": (int, 128),
    "pos_per_batch": (int, 64),
    "momentum": (float, 0.9),
    "base_lr": (float, 1e-3),
    "lr_decay_factor": (float, 0.1),
    "min_lr": (float, 1e-4),
    "plateau_patience": (int, 3),
    "max_epochs": (int, 20),
    "steps_per_epoch": (int, 100),
    "hard_mining": (bool, False),
    "channel_mult": (float, 1.0),
    "head": (str, "hybrid"),
    "augmentation": (str, "none"),
    "seed": (int, 0),
    # run plumbing
    "data": (str, None),
    "out": (str, None),
    "workers": (int, 1),
    "metric": (str, "hybrid"),
    "protocol": (str, "none"),
    "trials": (int, 0),
    "trial": (int, -1),
    "train_n": (int, 0),
    "test_n": (int, 0),
    "format": (str, "tsv"),
    "checkpoint": (str, None),
    "resume": (bool, False),
    "force": (bool, False),
    # synthesis
    "identities": (int, 20),
    "per_id": (int, 2),
    "cameras": (int, 2),
    "difficulty": (float, 0.5),
    "identity_strength": (float, 1.0),
    "distractors": (int, 0),
    # accounting
    "d": (int, 0),
}

METRIC_TO_HEAD = {"diff-only": "diff-only", "mult-only": "mult-only"}


def _coerce(key, raw):
    typ, _ = CONFIG_SCHEMA[key]
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        v = str(raw).strip().lower()
        if v in ("1", "true", "yes"):
            return True
        if v in ("0", "false", "no"):
            return False
        raise ConfigError(f"config key {key}: cannot parse boolean {raw!r}")
    try:
        return typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as "
                          f"{typ.__name__}") from None


def read_config_file(path):
    values = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw.strip())
    return values


def effective_config(args):
    """defaults <- config file <- explicit flags, as one flat dict."""
    cfg = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in CONFIG_SCHEMA:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = _coerce(key, v)
    return cfg


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.txt"), "w",
              encoding="utf-8") as fh:
        for key in sorted(cfg):
            val = cfg[key]
            if val is None:
                continue
            fh.write(f"{key}={str(val).lower() if isinstance(val, bool) else val}\n")


def train_config_from(cfg):
    return TrainConfig(
        alpha=cfg["alpha"], batch_size=cfg["batch"],
        pos_per_batch=cfg["pos_per_batch"], momentum=cfg["momentum"],
        base_lr=cfg["base_lr"], lr_decay_factor=cfg["lr_decay_factor"],
        min_lr=cfg["min_lr"], plateau_patience=cfg["plateau_patience"],
        max_epochs=cfg["max_epochs"], steps_per_epoch=cfg["steps_per_epoch"],
        hard_negative_mining=cfg["hard_mining"],
        channel_multiplier=cfg["channel_mult"], head=cfg["head"],
        augmentation=cfg["augmentation"], seed=cfg["seed"],
    )


def _require(cfg, key, sub):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"dhsl {sub} requires --{key.replace('_', '-')}")
    return cfg[key]


def _load_data(cfg, sub):
    root = _require(cfg, "data", sub)
    manifest_file = os.path.join(root, "manifest.tsv")
    if os.path.isfile(manifest_file):
        return data.load_manifest_file(manifest_file)
    return data.load_manifest(root)


def _splits_for(cfg, manifest):
    protocol = cfg["protocol"]
    if protocol == "none":
        return None
    kwargs = {}
    if protocol == "custom":
        kwargs = {"train_n": cfg["train_n"], "test_n": cfg["test_n"]}
        if cfg["trials"] <= 0:
            raise ConfigError("custom protocol requires --trials")
    if cfg["trials"] > 0:
        kwargs["trials"] = cfg["trials"]
    return data.make_split(manifest, protocol, cfg["seed"], **kwargs)


def cmd_synth(cfg):
    out = _require(cfg, "out", "synth")
    if os.path.isdir(out) and os.listdir(out) and not cfg["force"]:
        raise DataError(f"target directory {out} is not empty; "
                        f"pass --force to overwrite")
    manifest = data.generate_synthetic(
        out, cfg["identities"], cfg["per_id"], cfg["cameras"],
        difficulty=cfg["difficulty"], seed=cfg["seed"],
        identity_strength=cfg["identity_strength"],
        distractors=cfg["distractors"],
    )
    echo_config(cfg, out)
    ids = manifest.identities()
    print(f"wrote {len(manifest)} images to {out}: "
          f"{len(ids)} identities x {cfg['cameras']} cameras, "
          f"{len(manifest.distractor_indices())} distractors")
    return EXIT_OK


def _run_one_training(manifest, images, cfg, out_dir, resume):
    config = train_config_from(cfg)
    resume_state = None
    ckpt = os.path.join(out_dir, "checkpoint.dhsl")
    if resume and os.path.isfile(ckpt):
        # current flags stay in force (e.g. a raised max_epochs); the
        # checkpoint contributes the model and the trainer state
        model, _, resume_state = load_checkpoint(ckpt)
        if resume_state is None:
            raise ConfigError(f"{ckpt} carries no trainer state to resume from")
    else:
        model = build_model(channel_multiplier=config.channel_multiplier,
                            head=config.head, seed=config.seed)
    os.makedirs(out_dir, exist_ok=True)
    result = run_training(
        model, manifest, images, config, out_dir=out_dir,
        log_path=os.path.join(out_dir, "train.log"),
        resume_state=resume_state,
    )
    if not os.path.isfile(ckpt):
        save_checkpoint(model, config, ckpt)
    return result


def cmd_train(cfg):
    out = _require(cfg, "out", "train")
    manifest = _load_data(cfg, "train")
    images = data.load_images(manifest)
    echo_config(cfg, out)
    splits = _splits_for(cfg, manifest)
    if splits is None:
        result = _run_one_training(manifest, images, cfg, out, cfg["resume"])
        print(f"trained {result.steps} steps; "
              f"final epoch loss {result.epoch_losses[-1]:.4f}; "
              f"checkpoint at {os.path.join(out, 'checkpoint.dhsl')}")
    else:
        if cfg["trial"] >= 0:
            splits = [splits[cfg["trial"]]]
        for split in splits:
            sub = data.restrict(manifest, split.train_ids)
            sub_images = data.load_images(sub)
            trial_dir = os.path.join(out, f"trial{split.trial:02d}")
            result = _run_one_training(sub, sub_images, cfg, trial_dir, False)
            print(f"trial {split.trial}: {result.steps} steps, "
                  f"final epoch loss {result.epoch_losses[-1]:.4f}")
    return EXIT_OK


def cmd_eval(cfg):
    out = _require(cfg, "out", "eval")
    manifest = _load_data(cfg, "eval")
    images = data.load_images(manifest)
    if cfg["protocol"] == "none":
        raise ConfigError("dhsl eval requires --protocol")
    splits = _splits_for(cfg, manifest)
    metric = cfg["metric"]
    if metric not in evaluation.METRICS:
        raise ConfigError(f"unknown metric {metric!r}; "
                          f"choose from {evaluation.METRICS}")

    ckpt = _require(cfg, "checkpoint", "eval")
    if os.path.isdir(ckpt):
        # a train --protocol run directory: one model per trial
        models = []
        for split in splits:
            path = os.path.join(ckpt, f"trial{split.trial:02d}", "checkpoint.dhsl")
            if not os.path.isfile(path):
                raise ConfigError(f"missing per-trial checkpoint {path}")
            models.append(load_checkpoint(path)[0])
    else:
        model, _, _ = load_checkpoint(ckpt)
        models = [model] * len(splits)
    d = models[0].feature_dim
    expect = layers.FeatureStack(
        layers.StackConfig.default(cfg["channel_mult"])).feature_dim
    if d != expect:
        raise ConfigError(
            f"checkpoint feature dim {d} does not match --channel-mult "
            f"{cfg['channel_mult']} (expected {expect})"
        )

    curve, table = evaluation.evaluate_protocol(
        models, splits, manifest, metric, images=images,
        workers=cfg["workers"],
    )
    dist = None
    if metric in ("hybrid", "diff-only", "mult-only"):
        probe_idx, _, gallery_idx, _ = evaluation.single_shot_gallery(
            manifest, list(splits[0].test_ids),
            *_eval_cameras(manifest, splits[0]),
            include_distractors=(splits[0].protocol == "grid"),
        )
        feats = evaluation.extract_features(
            models[0], images[probe_idx], workers=cfg["workers"])
        gfeats = evaluation.extract_features(
            models[0], images[gallery_idx], workers=cfg["workers"])
        k = min(len(feats), len(gfeats))
        dist = evaluation.score_distributions(models[0], feats[:k], gfeats[:k])
    evaluation.emit_results(curve, table, dist, out, fmt=cfg["format"],
                            metric=metric)
    echo_config(cfg, out)
    for r, rate in zip(table.ranks, table.rates):
        print(f"rank-{r}: {100 * rate:.2f}%")
    return EXIT_OK


def _eval_cameras(manifest, split):
    cams = sorted({manifest.entries[i].camera
                   for ident in split.test_ids
                   for i in manifest.indices_of(ident)})
    if len(cams) < 2:
        raise ProtocolError("evaluation needs two camera views")
    return cams[0], cams[1]


def cmd_params(cfg):
    stack = layers.FeatureStack(layers.StackConfig.default(cfg["channel_mult"]))
    rows = layers.count_params(stack)
    print(f"{'layer':<12}{'weights':>12}{'biases':>10}")
    conv_w = sum(w for n, w, _ in rows if n.startswith("C"))
    conv_b = sum(b for n, _, b in rows if n.startswith("C"))
    for name, w, b in rows:
        if name == "total":
            print(f"{'conv total':<12}{conv_w:>12}{conv_b:>10}")
        print(f"{name:<12}{w:>12}{b:>10}")
    d = cfg["d"] or stack.feature_dim
    print(f"\nfeature dim d = {d}")
    print(f"{'metric':<14}{'parameters':>12}")
    for kind in ("mahalanobis", "euclidean", "cosine", "hybrid"):
        print(f"{kind:<14}{similarity.count_metric_params(kind, d):>12}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dhsl",
        description="Hybrid-similarity pair model: synthesize data, train, "
                    "evaluate, count parameters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--data", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--force", action="store_const", const=True)

    p = sub.add_parser("synth", help="generate a synthetic identity dataset")
    add_common(p)
    p.add_argument("--identities", type=int)
    p.add_argument("--per-id", dest="per_id", type=int)
    p.add_argument("--cameras", type=int)
    p.add_argument("--difficulty", type=float)
    p.add_argument("--identity-strength", dest="identity_strength", type=float)
    p.add_argument("--distractors", type=int)

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--pos-per-batch", dest="pos_per_batch", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--min-lr", dest="min_lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--channel-mult", dest="channel_mult", type=float)
    p.add_argument("--head", choices=("hybrid", "diff-only", "mult-only"))
    p.add_argument("--augmentation", choices=data.AUGMENT_POLICIES)
    p.add_argument("--hard-mining", dest="hard_mining",
                   action="store_const", const=True)
    p.add_argument("--protocol", choices=("none",) + data.PROTOCOLS)
    p.add_argument("--trials", type=int)
    p.add_argument("--trial", type=int)
    p.add_argument("--train-n", dest="train_n", type=int)
    p.add_argument("--test-n", dest="test_n", type=int)
    p.add_argument("--resume", action="store_const", const=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a protocol")
    add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--metric", choices=evaluation.METRICS)
    p.add_argument("--protocol", choices=data.PROTOCOLS)
    p.add_argument("--trials", type=int)
    p.add_argument("--train-n", dest="train_n", type=int)
    p.add_argument("--test-n", dest="test_n", type=int)
    p.add_argument("--channel-mult", dest="channel_mult", type=float)
    p.add_argument("--format", choices=("tsv", "json-lines"))

    p = sub.add_parser("params", help="print parameter accounting")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--channel-mult", dest="channel_mult", type=float)
    p.add_argument("--d", type=int)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "params": cmd_params,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProtocolError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
