# %% [markdown]
# # Calibrating confidences and choosing thresholds
#
# A cache's confidence is rescaled by a fitted temperature, then the
# threshold is the smallest grid value whose estimated accuracy drop
# (hit rate times disagreement) fits that cache's share of the tolerance.

# %%
from layercache import builder, calibration, medial, toy
from layercache.builder import CacheArchitecture
from layercache.core import TrainConfig
from layercache.graph import identify_candidates

prob = toy.VectorMixture(seed=3, noise=1.2)
x, y = prob.sample(2000, 1)
backbone = toy.pretrain(toy.mlp_backbone_layers(), (16,), 10, x, y,
                        TrainConfig(lr=3e-3, max_epochs=8))
traffic, truth = prob.sample(3000, 2)
cand = identify_candidates(backbone)[2]
md = medial.split(medial.collect(backbone, traffic, [cand])[cand.name])
cache = builder.train_cache(CacheArchitecture((), (32,)), md, TrainConfig(lr=5e-3, max_epochs=8),
                            cand)

# %% Temperature scaling never changes a predicted class
before = calibration.ece(cache, md)
cache.temperature = calibration.calibrate_temperature(cache, md)
print(f"temperature {cache.temperature:.3f}; ECE {before:.4f} -> {calibration.ece(cache, md):.4f}")

# %% Threshold under a 2% tolerance; this cache is ordinal 3, so its budget is 0.25%
report = calibration.assign_threshold(cache, md, tolerance=0.02)
cache.threshold = report.threshold
print(report.to_text())

# %% With labels (evaluation only), how did the hits really do?
labels = dict(zip(md.sample_ids, truth.tolist()))
eff = calibration.actual_accuracy_effect(cache, md, labels)
print("hit categories:", eff.counts, f"effect {eff.effect:+.4f}")
