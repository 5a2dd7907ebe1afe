"""
Saliency maps of a calibrated and an uncalibrated model
=======================================================

We train a small CNN on synthetic shapes, fit a temperature on held-out
samples and explain the same image with every method, once per model
variant. SSIM tells how much calibration changed each map.
"""

import sys
from pathlib import Path

import numpy as np

from calsal.calibration import CalibratedModel, Identity, fit_temperature
from calsal.data import SynthSpec, generate_synthetic_dataset
from calsal.evaluation import ssim
from calsal.mapio import write_saliency
from calsal.model import TrainConfig, accuracy, default_architecture, predict, train_classifier
from calsal.saliency import IgConfig, MpConfig, RiseConfig, explain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(exist_ok=True)

spec = SynthSpec(n_classes=2, image_size=(16, 16, 3), per_class=200, noise=0.2, shape_size=(5, 8))
train = generate_synthetic_dataset(spec, seed=0)
held_out = generate_synthetic_dataset(spec, seed=1)

model = default_architecture((16, 16, 3), 2, seed=0, widths=(8, 16))
model = train_classifier(TrainConfig(epochs=10, batch_size=32, lr=3e-3, seed=0), train, model)
# shape geometry is hard to learn from 400 images, so expect a modest, overconfident model
print(f"held-out accuracy {accuracy(model, held_out.images, held_out.labels):.3f}")

# a temperature fitted on the first half of the held-out set
scaler = fit_temperature(model.base_logits(held_out.images[:200]), held_out.labels[:200])
calibrated = CalibratedModel(model, scaler, "temperature")
print(f"fitted temperature {scaler.T:.3f}")

x = held_out.images[250]
c = int(predict(model, x)[2])
configs = {"integrated_gradients": IgConfig(steps=30), "rise": RiseConfig(n_masks=1000),
           "meaningful_perturbation": MpConfig(steps=150)}
for method in ("sensitivity", "integrated_gradients", "rise", "meaningful_perturbation", "lrp"):
    maps = {}
    for variant in (CalibratedModel(model, Identity(), "uncalibrated"), calibrated):
        maps[variant.tag] = explain(method, variant, x, c, configs.get(method), seed=7)
        write_saliency(out / f"{method}_{variant.tag}.pgm", maps[variant.tag], seed=7)
    print(f"{method:>24}: SSIM(calibrated, uncalibrated) = {ssim(maps['uncalibrated'], maps['temperature']):.4f}")
print(f"maps written to {out}")
