# %% [markdown]
# # Models, losses and gradients
#
# A tiny MLP, the two mutual-learning objectives, and a central-difference
# check of the hand-written backward pass.

# %%
import numpy as np

from fedmlac.nn import (
    Batch,
    ModelSpec,
    checkpoint_bytes,
    client_loss_and_grads,
    forward,
    init_model,
    kl_divergence,
    parse_checkpoint,
    plugin_loss_and_grads,
    softmax,
)

rng = np.random.default_rng(0)
local = init_model(ModelSpec.mlp(4, (6,), 3), rng)
plugin = init_model(ModelSpec.mlp(4, (5,), 3), rng)
batch = Batch(rng.standard_normal((8, 4)), rng.integers(0, 3, 8))
print(local.spec, local.spec.num_params, "parameters")

# %% [markdown]
# ## Direction of the KL terms
#
# The local model is pulled toward the plug-in with `KL(plugin || local)`.
# The plug-in is pulled toward a frozen copy of the local model with
# `KL(local || plugin)`. KL is not symmetric:

# %%
p_local = softmax(forward(local, batch))
p_plugin = softmax(forward(plugin, batch))
print("KL(plugin || local) =", kl_divergence(p_plugin, p_local))
print("KL(local || plugin) =", kl_divergence(p_local, p_plugin))

# %% [markdown]
# ## Finite-difference check

# %%
def numeric_grad(loss_fn, model, h=1e-6):
    out = []
    for layer in model.layers:
        for arr in (layer.weights, layer.bias):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                keep = arr[idx]
                arr[idx] = keep + h
                up = loss_fn()
                arr[idx] = keep - h
                down = loss_fn()
                arr[idx] = keep
                g[idx] = (up - down) / (2 * h)
            out.append(g)
    return out


for name, fn, model in [
    ("local", lambda: client_loss_and_grads(local, plugin, batch, 0.5), local),
    ("plug-in", lambda: plugin_loss_and_grads(local, plugin, batch), plugin),
]:
    _, grads = fn()
    analytic = [a for layer in grads for a in (layer.weights, layer.bias)]
    numeric = numeric_grad(lambda: fn()[0], model)
    err = max(np.abs(a - n).max() / max(np.abs(n).max(), 1e-12) for a, n in zip(analytic, numeric))
    print(f"{name:8s} max relative error {err:.2e}")

# %% [markdown]
# ## Checkpoints round-trip bit for bit

# %%
blob = checkpoint_bytes(local)
print(len(blob), "bytes, magic", blob[:4])
assert parse_checkpoint(blob).same_values(local)
