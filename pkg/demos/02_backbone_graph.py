# %% [markdown]
# # Backbone graphs and candidate layers
#
# A backbone is a DAG of layers.  Only nodes that every input-to-output
# path runs through can host a cache; nodes inside a parallel section
# cannot, because the other branch would still need computing.

# %%
import tempfile

import numpy as np

from layercache import core
from layercache.graph import BackboneGraph, identify_candidates, load_model, save_model

nodes = {
    "input": core.input_layer((8,)),
    "stem": core.dense(8, 8), "stem_relu": core.relu(),
    "left": core.dense(8, 8), "left_relu": core.relu(),
    "right": core.dense(8, 8),
    "merge": core.add(), "merge_relu": core.relu(),
    "head": core.dense(8, 5), "softmax": core.softmax_layer(),
}
edges = [("input", "stem"), ("stem", "stem_relu"),
         ("stem_relu", "left"), ("left", "left_relu"), ("left_relu", "merge"),
         ("stem_relu", "right"), ("right", "merge"),
         ("merge", "merge_relu"), ("merge_relu", "head"), ("head", "softmax")]
rng = np.random.default_rng(0)
weights = {n: core.init_params(l, rng) for n, l in nodes.items()}
blocks = {"stem_relu", "left_relu", "right", "merge_relu"}
g = BackboneGraph(nodes, edges, weights, num_classes=5, block_outputs=blocks)

print("topological order:", g.order)
print("total FLOPs:", g.total_flops)

# %% Candidates: flagged, dominating, and leaving compute behind
for c in identify_candidates(g, skip_last_k=0):
    print(f"{c.ordinal}: {c.name:10} cumulative {c.cumulative_flops:4d}  fallback {c.fallback_flops:4d}")
print("left_relu dominates output?", g.dominates_output("left_relu"))

# %% Taps return intermediate activations next to the output
x = rng.standard_normal((3, 8)).astype(np.float32)
pd, taps = g.forward_with_taps(x, ["stem_relu", "merge_relu"])
print("output rows sum to", pd.sum(axis=1))
print("tap shapes:", {k: v.shape for k, v in taps.items()})

# %% The manifest round trip keeps the content hash
with tempfile.TemporaryDirectory() as d:
    save_model(g, f"{d}/model.json")
    print("hash preserved:", load_model(f"{d}/model.json").content_hash == g.content_hash)
