"""
Temperature scaling and the two ECE estimators
==============================================

A classifier is calibrated when its confidence matches its accuracy. Here we
draw logits whose softmax is the true posterior, sharpen them to make the
model overconfident, and undo the damage with a fitted temperature.
"""

import sys
from pathlib import Path

import numpy as np

from calsal import autodiff as ad
from calsal.calibration import (TemperatureScaler, apply_temperature, confidence_and_correct, ece_binned,
                                ece_density, fit_temperature, reliability_curve)
from calsal.plotting import line_plot

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(exist_ok=True)

# labels are sampled from softmax(z), so z itself is perfectly calibrated
rng = np.random.default_rng(0)
z = rng.normal(0, 2, size=(5000, 5))
p = ad.softmax_array(z)
labels = (rng.random(5000)[:, None] > np.cumsum(p, axis=1)).sum(axis=1).clip(max=4)

# multiplying logits by 3 keeps every prediction but inflates confidence
sharp = 3 * z
T = fit_temperature(sharp, labels).T
print(f"fitted temperature {T:.3f} (the sharpening factor was 3)")

series = {}
for name, scores in (("sharpened", ad.softmax_array(sharp)),
                     ("temperature scaled", apply_temperature(TemperatureScaler(T), sharp))):
    conf, correct = confidence_and_correct(scores, labels)
    print(f"{name:>20}: binned ECE {ece_binned(conf, correct):.4f}, density ECE {ece_density(conf, correct):.4f}")
    curve = reliability_curve(conf, correct)
    series[name] = (curve.grid, curve.accuracy)

# the kernel estimate of accuracy as a function of confidence
series["perfect"] = ([0, 1], [0, 1])
(out / "reliability.svg").write_text(line_plot(series, "Reliability", "confidence", "accuracy",
                                               dashed=("perfect",)))
print(f"wrote {out / 'reliability.svg'}")
