"""Train the image translators for a few hundred steps and watch the losses.

Uses a freshly trained source-only segmenter as semantic guidance, then writes
source, translated and target samples next to each other.
"""

import sys
import time
from pathlib import Path

import numpy as np

from semadapt import ModelBundle, ToyData, TrainConfig
from semadapt.data import derive_rng, write_ppm
from semadapt.training import materialize_translations, pretrain_source_only, train_translation

# below ~400 steps the translations are still colour blobs without scene layout
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
out_dir = Path("demo_out")
out_dir.mkdir(exist_ok=True)

data = ToyData.synthesize(seed=0, n_source=100, n_target=100, n_val=30)
cfg = TrainConfig(trans_steps=steps, lr_g=1e-3, source_steps=600)
bundle = ModelBundle.create(cfg.width, cfg.n_classes, True, cfg.n_scales, cfg.seg_width, seed=0)

t0 = time.time()
res = pretrain_source_only(bundle, data, cfg)
print(f"source-only segmenter: val mIoU {res.best_miou:.1f} ({time.time() - t0:.0f}s)")


def show(t, report):
    if t % 25 == 0 or t == steps - 1:
        recon = report["recon_S"] + report["recon_T"]
        print(f"step {t:4d}  recon {recon:.3f}  gan {report['gan_S'] + report['gan_T']:.3f}"
              f"  sce {report['sce_S'] + report['sce_T']:.3f}")


train_translation(bundle, data.source_images, data.target_images, cfg,
                  derive_rng(0, "translation", 1), callback=show)
fake = materialize_translations(bundle, data.source_images[:4])
panel = np.concatenate([np.concatenate([s, f, t], axis=2) for s, f, t in
                        zip(data.source_images[:4], fake, data.target_images[:4])], axis=1)
write_ppm(out_dir / "translation.ppm", panel)
print(f"wrote {out_dir / 'translation.ppm'} (columns: source, source->target, a target image)")
