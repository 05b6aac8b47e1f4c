"""A miniature detector/reformer defense and a transfer attack on it.

    python3 demos/02_magnet_greybox.py

The defender and the attacker train their own autoencoders from different
seeds.  The attack only sees the attacker's copies; the defender judges.
Takes several minutes on one CPU.
"""

import numpy as np

from advbreak import (AETrainConfig, AttackConfig, EvalProtocol, TrainConfig, magnet_pipeline, run_greybox_eval,
                      train_autoencoder, train_classifier)
from advbreak.digits import synthetic_digits

train = synthetic_digits(6000, seed=1)
val = synthetic_digits(2000, seed=3, split="validation")
test = synthetic_digits(200, seed=2, split="test")
clf = train_classifier(train, TrainConfig(epochs=3, seed=0))


def pipeline(seeds, fpr, seed):
    aes = [train_autoencoder(train.images[:3000], AETrainConfig(epochs=4, seed=s)) for s in seeds]
    p = magnet_pipeline(clf, aes, seed=seed)
    p.calibrate(val.images, fpr)
    return p


defender = pipeline((100, 101), fpr=0.005, seed=1)
attacker = pipeline((200, 201, 202, 203), fpr=0.01, seed=2)
print(f"defender clean rejection on test: {defender.rejection_rate(test.images):.3f}")

for kappa in (0.0, 1.0):
    proto = EvalProtocol(kind="greybox", instances=20, attack=AttackConfig(iterations=300, binary_steps=5,
                                                                              kappa=kappa))
    rep = run_greybox_eval(attacker, defender, test, proto)
    agg = rep.aggregates
    caught = sum(r.detected_by is not None for r in rep.records)
    print(f"kappa={kappa}: transfer {agg['success_rate']:.2f}, local {agg['local_success_rate']:.2f}, "
          f"caught by a detector {caught}/20, mean L2 {agg['mean_distortion'] or np.nan:.3f}")
