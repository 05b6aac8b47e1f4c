"""Train a small digit classifier, then push ten test digits to chosen wrong classes.

    python3 demos/01_whitebox_cw.py [out_dir]

Runs in a couple of minutes on one CPU.  Writes a before/after image grid.
"""

import sys
from pathlib import Path

import numpy as np

from advbreak import AttackConfig, TrainConfig, choose_targets, cw_l2, emit_image_grid, train_classifier
from advbreak.digits import synthetic_digits

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out")
out.mkdir(parents=True, exist_ok=True)

train = synthetic_digits(6000, seed=1)
test = synthetic_digits(200, seed=2, split="test")
clf = train_classifier(train, TrainConfig(epochs=3, seed=0))
print(f"clean test accuracy: {clf.accuracy(test.images, test.labels):.3f}")

x, y = test.images[:10], test.labels[:10]
targets = choose_targets(y, seed=0)
results = cw_l2(clf, x, targets, AttackConfig(iterations=300, binary_steps=5))
for label, r in zip(y, results):
    status = "hit" if r.success else "miss"
    print(f"{label} -> {r.target}: {status}, classified {r.achieved_class}, L2 {r.distortion:.3f}")

pairs = np.concatenate([x, np.stack([r.x_adv for r in results])])
path = emit_image_grid(pairs, 2, 10, out / "whitebox.pgm")
print(f"top row clean, bottom row adversarial: {path}")
