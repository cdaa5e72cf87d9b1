"""The {SPADE on/off} × {SCE on/off} grid between the source-only and oracle bounds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import derive_rng
from .models import ModelBundle, SegDiscriminator, SegNet
from .training import (ToyData, TrainConfig, bidirectional_loop, pretrain_source_only, restore,
                       snapshot, train_segmentation)

log = logging.getLogger(__name__)

ALL_CELLS = ((False, False), (True, False), (False, True), (True, True))


@dataclass
class AblationCell:
    spade_on: bool
    sce_on: bool
    miou: float
    gain_vs_lower: float
    gap_to_upper: float
    per_seed: list = field(default_factory=list)


@dataclass
class AblationResult:
    lower: float
    upper: float
    cells: list
    lower_per_seed: list = field(default_factory=list)
    upper_per_seed: list = field(default_factory=list)
    rounds: dict = field(default_factory=dict)  # (seed, spade, sce) -> per-round rows

    def cell(self, spade_on: bool, sce_on: bool) -> AblationCell:
        for c in self.cells:
            if c.spade_on == spade_on and c.sce_on == sce_on:
                return c
        raise KeyError((spade_on, sce_on))


def _bundle_seed(config: TrainConfig) -> int:
    return int(derive_rng(config.seed, "init").integers(2 ** 31))


def upper_bound(config: TrainConfig, data: ToyData, target_labels: np.ndarray) -> float:
    """Oracle: M trained directly on labelled target images (labels the method never sees)."""
    M = SegNet(config.n_classes, config.seg_width, derive_rng(config.seed, "upper", "M"))
    D = SegDiscriminator(config.n_classes, config.width, derive_rng(config.seed, "upper", "D"))
    res = train_segmentation(M, D, config, data.target_images, target_labels,
                             derive_rng(config.seed, "upper"), val=data.val,
                             steps=config.source_steps)
    return res.best_miou


def ablation_run(config: TrainConfig, data: ToyData, target_labels: Optional[np.ndarray],
                 cells: Sequence = ALL_CELLS, seeds: Optional[Sequence[int]] = None) -> AblationResult:
    """Run the bidirectional loop for each cell and seed; report medians over seeds.

    Per seed the source-only M (the lower bound) is trained once and every
    cell starts from it, with translation networks initialized from the same
    seed.  ``target_labels`` feed only the upper bound; pass ``None`` to skip it.
    """
    seeds = list(seeds) if seeds is not None else [config.seed]
    lowers, uppers, scores, rounds = [], [], {c: [] for c in cells}, {}
    for seed in seeds:
        cfg = config.replace(seed=seed)
        base = ModelBundle.create(cfg.width, cfg.n_classes, True, cfg.n_scales, cfg.seg_width,
                                  seed=_bundle_seed(cfg))
        lowers.append(pretrain_source_only(base, data, cfg).best_miou)
        lower_m = snapshot(base.M)
        uppers.append(upper_bound(cfg, data, target_labels) if target_labels is not None else np.nan)
        log.info("seed %d: lower %.2f upper %.2f", seed, lowers[-1], uppers[-1])
        for spade_on, sce_on in cells:
            cell_cfg = cfg.replace(spade=spade_on, lambda_sce=cfg.lambda_sce if sce_on else 0.0)
            bundle = ModelBundle.create(cfg.width, cfg.n_classes, spade_on, cfg.n_scales,
                                        cfg.seg_width, seed=_bundle_seed(cfg))
            restore(bundle.M, lower_m)
            _, rows = bidirectional_loop(cell_cfg, data, bundle)
            rounds[(seed, spade_on, sce_on)] = rows
            scores[(spade_on, sce_on)].append(rows[-1]["miou"])
            log.info("seed %d spade=%s sce=%s: %.2f", seed, spade_on, sce_on, rows[-1]["miou"])
    lower, upper = float(np.median(lowers)), float(np.median(uppers))
    out = []
    for spade_on, sce_on in cells:
        m = float(np.median(scores[(spade_on, sce_on)]))
        out.append(AblationCell(spade_on, sce_on, m, m - lower, upper - m,
                                scores[(spade_on, sce_on)]))
    return AblationResult(lower, upper, out, lowers, uppers, rounds)
