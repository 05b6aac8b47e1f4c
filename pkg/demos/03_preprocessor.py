"""Train an FGSM-cleaning preprocessor G, show that it helps against FGSM, then attack through it.

    python3 demos/03_preprocessor.py
"""

import numpy as np

from advbreak import AttackConfig, EvalProtocol, TrainConfig, fgsm, run_preprocessor_eval, train_classifier
from advbreak import train_preprocessor
from advbreak.digits import synthetic_digits

train = synthetic_digits(6000, seed=1)
test = synthetic_digits(200, seed=2, split="test")
clf = train_classifier(train, TrainConfig(epochs=3, seed=0))

x, y = train.images[:3000], train.labels[:3000]
g = train_preprocessor(fgsm(clf, x, y, 0.3), x, TrainConfig(epochs=4, seed=0))

adv = fgsm(clf, test.images, test.labels, 0.3)
print(f"accuracy on FGSM inputs: {clf.accuracy(adv, test.labels):.3f} raw, "
      f"{clf.accuracy(g.reconstruct(adv), test.labels):.3f} after G")

rep = run_preprocessor_eval(clf, g, test, EvalProtocol(kind="preproc", instances=20,
                                                       attack=AttackConfig(iterations=300, binary_steps=5)))
wins = [r for r in rep.records if r.success]
print(f"attack through G: success {rep.aggregates['success_rate']:.2f}")
if wins:
    print(f"mean ||x'-x|| {np.mean([r.distortion for r in wins]):.3f}, "
          f"mean ||G(x')-x|| {np.mean([r.recovered_distortion for r in wins]):.3f}")
