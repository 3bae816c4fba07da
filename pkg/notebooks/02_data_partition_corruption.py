# %% [markdown]
# # Data: synthetic blobs, non-IID partitions, corruption

# %%
import numpy as np

from fedmlac.data import (
    dirichlet_partition,
    inject_gaussian_noise,
    inject_label_errors,
    label_entropy,
    synth_gaussian_mixture,
)

ds = synth_gaussian_mixture(num_classes=4, dim=8, n_per_class=250, cluster_spread=1.0, seed=0)
print(ds.X.shape, np.bincount(ds.y))

# %% [markdown]
# ## Dirichlet skew
#
# Smaller alpha concentrates each client on fewer classes, so the mean
# per-client label entropy falls.

# %%
for alpha in (100.0, 1.0, 0.5, 0.1):
    plan = dirichlet_partition(ds, num_clients=10, alpha=alpha, seed=1)
    ent = np.mean([label_entropy(ds.y[idx], 4) for idx in plan.client_indices if len(idx)])
    print(f"alpha={alpha:6.1f}  mean entropy {ent:.3f}  sizes {[len(i) for i in plan.client_indices]}")

# %% [markdown]
# ## Feature noise at a target SNR

# %%
for snr in (10.0, 20.0, 30.0):
    noisy = inject_gaussian_noise(ds, snr, seed=2)
    measured = 10 * np.log10(np.mean(ds.X**2) / np.mean((noisy.X - ds.X) ** 2))
    print(f"target {snr:4.1f} dB  measured {measured:6.3f} dB")

# %% [markdown]
# ## Label errors: exactly floor(rate * n) flips, never to the same class

# %%
flipped = inject_label_errors(ds, 0.3, seed=3)
changed = flipped.y != ds.y
print(changed.sum(), "flipped of", len(ds.y), "expected", int(0.3 * len(ds.y)))
