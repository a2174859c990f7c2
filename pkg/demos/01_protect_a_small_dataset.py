"""
Protecting a small dataset with a self-ensemble
===============================================

Train one protector, keep its snapshots, turn them into an ensemble and craft
poisons with each method. Then train a fresh model on every released set and
test it on clean data. Takes a couple of minutes on one core.
"""

import numpy as np

from sepkit import crafting, data, engine, training
from sepkit.budget import PerturbationBudget, norm_stats
from sepkit.crafting import TargetPermutation

# a 4-class problem of coloured blobs on a noisy background
spec = data.SyntheticSpec(classes=4, per_class=100, test_per_class=50, image_size=12,
                          family="blobs", signal=0.2, noise=0.3)
train, test = data.gen_synthetic(spec, 0), data.gen_synthetic(spec, 0, "test")
print("train", train.images.shape, "classes", train.class_count)

# the protector: snapshots every 4 epochs become the ensemble members
arch = engine.cnn_small(train.input_shape, spec.classes)
cks, report = training.train(arch, train, training.TrainConfig(epochs=20, lr=0.1, snapshot_period=4), test=test)
members = list(training.select_checkpoints(cks, 5))
print("protector test acc %.3f, members from epochs %s" % (report.test_acc[-1], [m.epoch for m in members]))

# every sample is pushed toward class (y + 2) mod 4
perm = TargetPermutation(4, 2)
budget = PerturbationBudget(eps_linf=32 / 255, steps=20, n_models=5, inner_steps=5)

released = {"clean": train}
for method in ("random", "single-model", "sep", "sep-fa", "sep-fa-vr"):
    released[method], manifest = crafting.craft(method, train, members, budget, perm, seed=0)
    print("%-12s max linf %.4f" % (method, norm_stats(released[method].images, train.images)["linf_max"]))

# the appropriator trains from scratch on what was released
for name, ds in released.items():
    model, _ = training.train(arch, ds, training.TrainConfig(epochs=20, seed=1))
    print("%-12s clean test acc %.3f" % (name, training.evaluate(model.final, test).accuracy))
