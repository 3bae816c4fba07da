# %% [markdown]
# # One client, several rounds of mutual learning
#
# The private local model persists across rounds. The plug-in copy is
# replaced by the broadcast each round and leaves with the client's update.

# %%
import numpy as np

from fedmlac.client import ClientState, LocalUpdateConfig, fedmlac_update
from fedmlac.data import synth_gaussian_mixture
from fedmlac.nn import ModelSpec, forward, init_model

rng = np.random.default_rng(0)
train = synth_gaussian_mixture(3, 4, 100, 0.7, seed=0)
test = synth_gaussian_mixture(3, 4, 100, 0.7, seed=1)
state = ClientState(0, train, init_model(ModelSpec.mlp(4, (16,), 3), rng), rng_seed=7)
plugin = init_model(ModelSpec.mlp(4, (8,), 3), rng)
cfg = LocalUpdateConfig(epochs=1, batch_size=16, lr=0.05, alpha=0.5)


def acc(model):
    return float(np.mean(forward(model, test.X).argmax(axis=1) == test.y))


for t in range(10):
    up = fedmlac_update(state, plugin, cfg, round_index=t)
    plugin = up.model
    print(f"round {t}  loss {up.train_loss:.3f}  local acc {acc(state.local_model):.3f}  plug-in acc {acc(plugin):.3f}")
