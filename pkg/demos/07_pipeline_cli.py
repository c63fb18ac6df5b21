# %% [markdown]
# # The staged pipeline from the command line
#
# `layercache make-toy` writes a pre-trained conv backbone, unlabeled
# traffic and a config.  Each stage then reads its predecessors'
# artifacts; `all` runs them in order.  The same commands work from a
# shell: `layercache all -c toy/config.json`.

# %%
import json
import os
import tempfile

from layercache import cli

work = tempfile.mkdtemp()
toy_dir = os.path.join(work, "toy")
cli.main(["make-toy", toy_dir])
cfg = os.path.join(toy_dir, "config.json")

# %% Running a stage too early is an ordering error (exit code 2)
print("optimize first ->", cli.main(["optimize", "-c", cfg]))

# %% The whole build
cli.main(["all", "-c", cfg])

# %% Maintenance: has enough new traffic arrived to rebuild?
cli.main(["report", "-c", cfg])
with open(os.path.join(toy_dir, "artifacts", "model.json")) as f:
    print(json.load(f))
