# %% [markdown]
# # From unlabeled traffic to trained caches
#
# We pre-train a small MLP backbone, push unlabeled traffic through it to
# record (activation, output distribution) pairs at each candidate, and
# search a small menu of cache heads per layer.

# %%
from layercache import builder, medial, toy
from layercache.core import TrainConfig
from layercache.graph import identify_candidates

prob = toy.VectorMixture(seed=0, noise=1.2)
x, y = prob.sample(2000, 1)
backbone = toy.pretrain(toy.mlp_backbone_layers(), (16,), 10, x, y,
                        TrainConfig(lr=3e-3, max_epochs=8))
traffic, truth = prob.sample(3000, 2)
print(f"backbone accuracy on traffic: {toy.accuracy(backbone, traffic, truth):.3f}")

# %% Medial datasets: one per candidate, sharing ids and splits
cands = identify_candidates(backbone, skip_last_k=1)
datasets = {k: medial.split(v) for k, v in medial.collect(backbone, traffic, cands).items()}
md = datasets["block2"]
print({s: len(md.part(s)[2]) for s in ("train", "val", "test")})

# %% Architecture search per layer: cheapest head within 1% of the best
menus = builder.SearchMenus(widths=(16, 32), max_linears=2)
for c in cands[:3]:
    res = builder.search(c, datasets[c.name], menus, TrainConfig(lr=5e-3, max_epochs=6))
    for row in res.rows:
        mark = "*" if row["selected"] else " "
        print(f"  {mark} {c.name:7} {row['architecture']:22} acc {row['accuracy']:.3f}  C1 {row['c1']}")
