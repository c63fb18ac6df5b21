# %% [markdown]
# # Picking caches and running early-exit inference
#
# Each built cache is scored once on the validation split; every subset is
# then scored by replay.  The chosen subset runs inside the backbone, and
# resolved samples leave the batch as soon as a cache is confident.

# %%
from layercache import builder, calibration, engine, medial, subset, toy
from layercache.builder import CacheArchitecture
from layercache.core import TrainConfig
from layercache.graph import identify_candidates

prob = toy.VectorMixture(seed=5, noise=1.2)
x, y = prob.sample(2000, 1)
backbone = toy.pretrain(toy.mlp_backbone_layers(), (16,), 10, x, y,
                        TrainConfig(lr=3e-3, max_epochs=8))
traffic, truth = prob.sample(3000, 2)
cands = identify_candidates(backbone)
datasets = {k: medial.split(v) for k, v in medial.collect(backbone, traffic, cands).items()}

caches = []
for c in cands[::2]:
    md = datasets[c.name]
    cache = builder.train_cache(CacheArchitecture(), md, TrainConfig(lr=5e-3, max_epochs=6), c)
    cache.temperature = calibration.calibrate_temperature(cache, md)
    cache.threshold = calibration.assign_threshold(cache, md, 0.05).threshold
    caches.append(cache)
    print(f"{c.ordinal}: {c.name} threshold {cache.threshold:.2f}")

# %% Replay scores for all subsets
choice = subset.optimize(subset.record_val_predictions(caches, datasets))
for row in choice.table:
    print(f"  {str(row['subset']):10} score {row['score']:>12,}")
print("chosen:", choice.subset)

# %% Evaluate the cache-enabled model on the test split
test_idx = [i for i, s in enumerate(datasets[cands[0].name].splits) if s == "test"]
model = engine.CacheEnabledModel(backbone, [c for c in caches if c.ordinal in choice.subset])
report = engine.evaluate(model, traffic[test_idx], truth[test_idx], latency_reps=5)
print(report.to_text())
