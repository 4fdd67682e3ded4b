"""Train a toy model on synthetic scenes and reconstruct a whole target year.

A 7-frame synthetic series stands in for a DMSP/VIIRS archive.  Frame 1 is
the reference year.  The trained model then reconstructs frame 4 at VIIRS
resolution from its DMSP image alone and is scored against the bilinear
baseline.

    python3 demos/train_and_reconstruct.py
"""
import numpy as np

from deepntl import metrics
from deepntl.calib import ProductId
from deepntl.dataset import (DatasetManifest, build_examples, clean_viirs, sample_points,
                             split_manifest, synth_series)
from deepntl.model import ModelConfig, save_checkpoint
from deepntl.pipeline import bilinear_upsample2x, reconstruct_year
from deepntl.train import TrainConfig, train_loop, with_target_scale

TILE = 16
frames = [(d, clean_viirs(v)) for d, v in synth_series(seed=3, rows=64, cols=64, n_frames=7)]
d_ref, v_ref = frames[1]

points = sample_points(d_ref, v_ref, 12, TILE, TILE, min_lit=0.01, seed=0)
targets = [(ProductId(2013 + k, "F15"), d, v) for k, (d, v) in enumerate(frames) if k != 4]
manifest = split_manifest(DatasetManifest(build_examples(points, d_ref, v_ref,
                                                         targets).examples), 0.9, seed=0)
print(f"{len(manifest)} examples, split {manifest.counts()}")

cfg = with_target_scale(ModelConfig.toy(TILE, TILE, c=4, dim=8, reduction=4),
                        manifest.subset("train"))
print(f"viirs_scale derived from training targets: {cfg.viirs_scale:.2f}")
result = train_loop(manifest, cfg, TrainConfig(lr0=1e-3, epochs=15, seed=0),
                    on_epoch=lambda r: print(f"  epoch {r.epoch:2d} train {r.train_loss:8.2f} "
                                             f"val {r.val_loss:8.2f} lr {r.lr:.2e}"))
print(f"best epoch {result.best_epoch}")

# frame 4 was held out of training entirely
d_tgt, v_tgt = frames[4]
sr = reconstruct_year(save_checkpoint(result.params, cfg), d_ref, d_tgt, v_ref)
reports = [metrics.evaluate_pair(v_tgt, sr, label="model"),
           metrics.evaluate_pair(v_tgt, bilinear_upsample2x(d_tgt), label="bilinear")]
print(metrics.reports_to_csv(reports), end="")
print(f"output range {np.min(sr.data):.1f} .. {np.max(sr.data):.1f}")
