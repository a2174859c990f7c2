"""
How different are the snapshots of one training run?
====================================================

Mean |cos| between the input gradients of every pair of snapshots. Values
near 0 mean the snapshots disagree about which way hurts the loss, which is
what makes them useful as separate ensemble members.
"""

import numpy as np

from sepkit import analysis, data, engine, training

spec = data.SyntheticSpec(classes=4, per_class=100, image_size=12, family="blobs", signal=0.2, noise=0.3)
train = data.gen_synthetic(spec, 2)
arch = engine.cnn_small(train.input_shape, spec.classes)
cks, _ = training.train(arch, train, training.TrainConfig(epochs=20, lr=0.1, snapshot_period=4))

dm = analysis.gradient_diversity(list(cks), train.images[:200], train.labels[:200])
np.set_printoptions(precision=2, suppress=True)
print(dm.model_ids)
print(dm.matrix)
print("mean off-diagonal %.3f" % dm.mean_off_diagonal())
dm.write_pgm("diversity.pgm")
