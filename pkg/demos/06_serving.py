# %% [markdown]
# # Serving over a framed socket
#
# Each response frame is sent the moment its sample resolves, so early
# exits reach the client before the rest of the batch finishes.

# %%
import numpy as np

from layercache import builder, calibration, medial, toy
from layercache.builder import CacheArchitecture
from layercache.core import TrainConfig
from layercache.engine import CacheEnabledModel
from layercache.graph import identify_candidates
from layercache.serving import CacheServer, Client

prob = toy.VectorMixture(seed=0, noise=1.2)
x, y = prob.sample(2000, 1)
backbone = toy.pretrain(toy.mlp_backbone_layers(), (16,), 10, x, y,
                        TrainConfig(lr=3e-3, max_epochs=8))
traffic, _ = prob.sample(2000, 2)
cand = identify_candidates(backbone)[0]
md = medial.split(medial.collect(backbone, traffic, [cand])[cand.name])
cache = builder.train_cache(CacheArchitecture(), md, TrainConfig(lr=5e-3, max_epochs=6), cand)
cache.temperature = calibration.calibrate_temperature(cache, md)
cache.threshold = calibration.assign_threshold(cache, md, 0.05).threshold

server = CacheServer(CacheEnabledModel(backbone, [cache]))
server.start()

# %% One batch of 20 samples; responses arrive early exits first
with Client("127.0.0.1", server.port) as client:
    frames = client.infer("demo", list(range(20)), traffic[:20])
    for f in frames[:-1]:
        print(f"sample {f['sample_id']:2}  exit {str(f['exit']):5}  class {f['predicted_class']}  "
              f"conf {f['confidence']:.3f}  flops {f['path_flops']}")
    print(frames[-1])

    # a malformed frame gets an error, and the connection stays usable
    client.send_raw(b"not json")
    print(client.recv()["type"], "->", client.infer("again", [0], traffic[:1])[-1]["type"])

server.shutdown()
server.server_close()
