"""``semadapt <subcommand> --config FILE [--key value ...] --seed N``.

Each subcommand writes into ``<runs_dir>/<name>/``::

    config.resolved  checkpoints/  images/  metrics/*.csv  log.txt

Failures exit with status 2 and print one line ``semadapt: error[<category>]: <message>``
where category is one of config, data, checkpoint, training, usage, io.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .ablation import ALL_CELLS, ablation_run
from .autodiff import Tensor
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (DatasetError, DatasetManifest, load_split, read_dataset, read_ppm, write_dataset,
                   write_pgm, write_ppm)
from .metrics import ConfusionMatrix, frechet_distance, inception_score, miou
from .models import ModelBundle, SegDiscriminator
from .training import (ToyData, TrainingError, TRANSLATION_REPORT_KEYS, SEG_REPORT_KEYS, ROUND_KEYS,
                       bidirectional_loop, derive_rng, evaluate_miou, generate_pseudo_labels,
                       materialize_translations, predict_logits, pretrain_source_only,
                       train_segmentation, train_translation, _softmax_np)

log = logging.getLogger("semadapt")

SUBCOMMANDS = ("gen-data", "train-i2i", "train-seg", "pseudo", "bdl", "translate", "eval", "ablation")
ROUND_COLUMNS = ROUND_KEYS


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run directory helpers
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        for sub in ("checkpoints", "images", "metrics"):
            (self.dir / sub).mkdir(parents=True, exist_ok=True)
        (self.dir / "config.resolved").write_text(cfg.to_text())
        self._handler = logging.FileHandler(self.dir / "log.txt", mode="w")
        self._handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("semadapt").addHandler(self._handler)
        logging.getLogger("semadapt").setLevel(logging.INFO)

    def close(self):
        logging.getLogger("semadapt").removeHandler(self._handler)
        self._handler.close()

    def write_csv(self, name: str, columns, rows) -> Path:
        path = self.dir / "metrics" / name
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                values = [row[c] for c in columns] if isinstance(row, dict) else list(row)
                w.writerow([_fmt(v) for v in values])
        return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return v


def _dataset(cfg: RunConfig) -> DatasetManifest:
    return read_dataset(cfg.run.data_dir)


def _data(cfg: RunConfig) -> ToyData:
    return ToyData.from_manifest(_dataset(cfg))


def _new_bundle(cfg: RunConfig) -> ModelBundle:
    t = cfg.train
    return ModelBundle.create(t.width, t.n_classes, t.spade, t.n_scales, t.seg_width,
                              seed=int(derive_rng(t.seed, "init").integers(2 ** 31)))


def _bundle(cfg: RunConfig, required: bool = False) -> Optional[ModelBundle]:
    """Bundle from ``checkpoint`` if set; else a fresh one (or an error when required)."""
    if not cfg.run.checkpoint:
        if required:
            raise CheckpointError("this subcommand needs checkpoint=<path>")
        return None
    bundle = _new_bundle(cfg)
    load_into(bundle, load_checkpoint(cfg.run.checkpoint))
    return bundle


def _load_images(directory: str) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.ppm"))
    if not paths:
        raise DatasetError(f"{directory}: no .ppm images")
    return np.stack([read_ppm(p) for p in paths])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, run: Run) -> None:
    r, t = cfg.run, cfg.train
    manifest = DatasetManifest(r.data_dir, t.seed, t.image_size, r.n_train_s, r.n_train_t, r.n_val_t)
    write_dataset(manifest)
    log.info("wrote dataset to %s", r.data_dir)


def cmd_train_i2i(cfg: RunConfig, run: Run) -> None:
    data = _data(cfg)
    bundle = _bundle(cfg)
    if bundle is None:
        bundle = _new_bundle(cfg)
        pretrain_source_only(bundle, data, cfg.train)
    history = train_translation(bundle, data.source_images, data.target_images, cfg.train,
                                derive_rng(cfg.train.seed, "translation", 1))
    rows = [dict(step=i + 1, **h) for i, h in enumerate(history)]
    run.write_csv("translation.csv", ("step",) + TRANSLATION_REPORT_KEYS, rows)
    save_checkpoint(run.dir / "checkpoints" / "bundle.sema", bundle)


def cmd_train_seg(cfg: RunConfig, run: Run) -> None:
    """Train M on translated source (raw source without a checkpoint) plus target terms."""
    t = cfg.train
    data = _data(cfg)
    bundle = _bundle(cfg)
    if bundle is None:
        bundle = _new_bundle(cfg)
        images = data.source_images
        pseudo = None
    else:
        images = materialize_translations(bundle, data.source_images)
        pseudo = generate_pseudo_labels(bundle.M, data.target_images, t.th_ssl)
    bundle.D_seg = SegDiscriminator(t.n_classes, t.width, derive_rng(t.seed, "dseg", 1))
    res = train_segmentation(bundle.M, bundle.D_seg, t, images, data.source_labels,
                             derive_rng(t.seed, "segmentation", 1),
                             tgt_images=data.target_images if pseudo is not None else None,
                             tgt_labels=pseudo, val=data.val, until_plateau=True)
    run.write_csv("segmentation.csv", ("step",) + SEG_REPORT_KEYS,
                  [dict(step=i + 1, **h) for i, h in enumerate(res.history)])
    run.write_csv("validation.csv", ("step", "miou"), res.evaluations)
    save_checkpoint(run.dir / "checkpoints" / "bundle.sema", bundle)


def cmd_pseudo(cfg: RunConfig, run: Run) -> None:
    bundle = _bundle(cfg, required=True)
    images = load_split(_dataset(cfg), "target")
    labels = generate_pseudo_labels(bundle.M, images, cfg.train.th_ssl)
    out = run.dir / "pseudo"
    rows = []
    for i, lab in enumerate(labels):
        write_pgm(out / f"{i:05d}.pgm", lab)
        rows.append((i, float((lab != -1).mean())))
    rows.append(("all", float((labels != -1).mean())))
    run.write_csv("pseudo.csv", ("image", "coverage"), rows)


def cmd_bdl(cfg: RunConfig, run: Run) -> None:
    data = _data(cfg)
    ckpt_dir = run.dir / "checkpoints"

    def on_round(r, row, bundle):
        save_checkpoint(ckpt_dir / f"round{r}.sema", bundle)

    bundle, rows = bidirectional_loop(cfg.train, data, _bundle(cfg), on_round=on_round)
    run.write_csv("rounds.csv", ROUND_COLUMNS, rows)
    save_checkpoint(ckpt_dir / "final.sema", bundle)


def cmd_translate(cfg: RunConfig, run: Run) -> None:
    bundle = _bundle(cfg, required=True)
    images = _load_images(cfg.run.input_dir) if cfg.run.input_dir else \
        load_split(_dataset(cfg), "source")
    guidance = None
    if cfg.run.guidance_dir:
        guidance = _load_images(cfg.run.guidance_dir)
        if len(guidance) < len(images):
            raise DatasetError(f"{cfg.run.guidance_dir}: {len(guidance)} guidance images for "
                               f"{len(images)} inputs")
        guidance = guidance[:len(images)]
    out = materialize_translations(bundle, images, guidance=guidance)
    for i, img in enumerate(out):
        write_ppm(run.dir / "images" / f"{i:05d}.ppm", img)


def cmd_eval(cfg: RunConfig, run: Run) -> None:
    """Per-class IoU on ``split``, IS of M over translations and FID(translations, target)."""
    bundle = _bundle(cfg, required=True)
    manifest = _dataset(cfg)
    images, labels = load_split(manifest, cfg.run.split, with_labels=True)
    iou, mean, _ = evaluate_miou(bundle.M, images, labels, cfg.train.n_classes)
    rows = [("final", "eval", k, iou[k]) for k in range(cfg.train.n_classes)]
    rows.append(("final", "eval", "mean", mean))
    run.write_csv("eval_iou.csv", ("round", "cell", "class", "iou"), rows)

    source = load_split(manifest, "source")
    target = load_split(manifest, "target")
    translated = materialize_translations(bundle, source)
    probs = _softmax_np(predict_logits(bundle.M, translated)).mean(axis=(2, 3))
    probs = probs / probs.sum(axis=1, keepdims=True)
    is_score = inception_score(probs)
    fid = frechet_distance(_latent_features(bundle, translated), _latent_features(bundle, target))
    run.write_csv("eval_summary.csv", ("split", "miou", "inception_score", "frechet_distance"),
                  [(cfg.run.split, mean, is_score, fid)])


def _latent_features(bundle: ModelBundle, images: np.ndarray, batch: int = 25) -> np.ndarray:
    """Spatially pooled E_T codes (dimension 4w)."""
    bundle.E_T.eval()
    with ad.no_grad():
        return np.concatenate([bundle.E_T(Tensor(images[i:i + batch])).data.mean(axis=(2, 3))
                               for i in range(0, len(images), batch)]).astype(np.float64)


def cmd_ablation(cfg: RunConfig, run: Run) -> None:
    manifest = _dataset(cfg)
    data = ToyData.from_manifest(manifest)
    # the oracle upper bound is the only consumer of target-train labels
    _, target_labels = load_split(manifest, "target", with_labels=True)
    seeds = [int(s) for s in cfg.run.ablation_seeds.split(",") if s.strip()]
    result = ablation_run(cfg.train, data, target_labels, ALL_CELLS, seeds)
    rows = [("lower", "", "", result.lower, 0.0, result.upper - result.lower),
            ("upper", "", "", result.upper, result.upper - result.lower, 0.0)]
    rows += [("cell", c.spade_on, c.sce_on, c.miou, c.gain_vs_lower, c.gap_to_upper)
             for c in result.cells]
    run.write_csv("ablation.csv", ("kind", "spade", "sce", "miou", "gain_vs_lower", "gap_to_upper"),
                  rows)


COMMANDS = {
    "gen-data": cmd_gen_data, "train-i2i": cmd_train_i2i, "train-seg": cmd_train_seg,
    "pseudo": cmd_pseudo, "bdl": cmd_bdl, "translate": cmd_translate, "eval": cmd_eval,
    "ablation": cmd_ablation,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parse_overrides(extra: list) -> dict:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"--{key} needs a value")
            val = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = val
    return out


def _error_category(exc: BaseException) -> str:
    if isinstance(exc, (ConfigError,)):
        return "config"
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, DatasetError):
        return "data"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, (TrainingError, FloatingPointError)):
        return "training"
    if isinstance(exc, OSError):
        return "io"
    return "internal"


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(prog="semadapt", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="key=value file")
    parser.add_argument("--seed", type=int, default=None, help="root seed")
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = None
    try:
        overrides = _parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        run = Run(cfg)
        log.info("semadapt %s (seed %d)", args.subcommand, cfg.train.seed)
        COMMANDS[args.subcommand](cfg, run)
        log.info("done")
        return 0
    except Exception as exc:  # every failure becomes one machine-readable line
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"semadapt: error[{_error_category(exc)}]: {msg}", file=sys.stderr)
        if run is not None:
            log.exception("failed")
        return 2
    finally:
        if run is not None:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
