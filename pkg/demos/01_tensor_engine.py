# %% [markdown]
# # A tiny float32 engine
#
# Layers are plain `LayerSpec` records; parameters are numpy arrays kept
# beside them.  This walk-through checks a gradient by hand, then distils
# a small teacher into a one-layer student with the KL loss.

# %%
import numpy as np

from layercache import core

rng = np.random.default_rng(0)

# %% FLOPs follow fixed per-layer rules (one multiply-add counts as 2)
for layer, shape in [(core.dense(128, 10), (128,)),
                     (core.conv2d(3, 16, 3), (3, 32, 32)),
                     (core.relu(), (1000,))]:
    print(f"{layer.kind:8} on {shape}: {core.layer_flops(layer, shape):,} FLOPs")

# %% Backward against central differences on one conv layer
layer = core.conv2d(2, 3, 3, stride=2, padding=1)
x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
params = core.init_params(layer, rng)
y, ctx = core.forward_train(layer, x, params)
r = rng.standard_normal(y.shape).astype(np.float32)
gx, (gw, gb) = core.backward(layer, params, ctx, r)

h = 1e-3
w = params[0]
num = np.zeros_like(w)
for i in np.ndindex(w.shape):
    old = w[i]
    w[i] = old + h
    up = float(np.sum(core.forward(layer, x, params) * r))
    w[i] = old - h
    down = float(np.sum(core.forward(layer, x, params) * r))
    w[i] = old
    num[i] = (up - down) / (2 * h)
print("weight-gradient relative error:",
      np.linalg.norm(num - gw) / np.linalg.norm(num))

# %% Distillation: a student matches a teacher's soft outputs, no labels
teacher_net = core.Sequential([core.dense(8, 16), core.relu(), core.dense(16, 4),
                               core.softmax_layer()], (8,), seed=1)
xs = rng.standard_normal((2000, 8)).astype(np.float32)
soft = teacher_net.forward(xs)

student = core.Sequential([core.dense(8, 32), core.relu(), core.dense(32, 4),
                           core.log_softmax_layer()], (8,), seed=2)
res = core.train(student, (xs[:1500], soft[:1500]),
                 core.TrainConfig(lr=1e-2, max_epochs=20), (xs[1500:], soft[1500:]))
print("val KL per epoch:", [round(v, 4) for v in res.val_loss])
fitted = core.Sequential(student.layers, (8,), res.params)
agree = np.mean(np.argmax(fitted.forward(xs[1500:]), 1) == np.argmax(soft[1500:], 1))
print(f"student agrees with teacher on {agree:.1%} of held-out inputs")
