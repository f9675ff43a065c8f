"""
Overfitting a tiny pose transformer on stick figures
====================================================

Sixteen synthetic 32x32 figures, five joints (nose, wrists, ankles), a
two-layer encoder and decoder. Training from random weights for a few
hundred steps drives the matched joint error well under a pixel.
Pass a step count as the first argument (default 400).
"""

import sys

import numpy as np

from pef.data import synthetic_dataset
from pef.evaluate import evaluate, matched_fit
from pef.model import ModelConfig
from pef.train import ScheduleConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
samples = synthetic_dataset(16, seed=0, num_joints=5, size=(32, 32))

config = ModelConfig(variant="deit", width=32, height=32, patch_size=8, d_model=32, n_heads=4,
                     encoder_depth=2, decoder_depth=2, num_queries=8, num_joints=5)
# one batch per epoch, so epochs count optimizer steps
schedule = ScheduleConfig(encoder_lr=1e-3, decoder_lr=1e-3, epochs=steps,
                          drop_epoch=int(steps * 0.75), batch_size=16)

result = train(samples, config, schedule, seed=0)
for rec in result.losses[:: max(1, steps // 8)]:
    print(f"step {rec.step:4d}  loss {rec.total:.4f}")

fit = matched_fit(result.model, samples)
print(f"matched L1 {fit.mean_l1:.4f} (crop units), class accuracy {fit.class_accuracy:.0%}")

# the figures are never shown mirrored during this run, so flip test hurts here
for flip in (False, True):
    m = evaluate(result.model, samples, flip_test=flip, sigmas=np.full(5, 0.05))
    print(f"flip_test={flip}:  AP {m.ap:.3f}  AR {m.ar:.3f}")
