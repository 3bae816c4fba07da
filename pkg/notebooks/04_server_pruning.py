# %% [markdown]
# # Layer-wise pruning aggregation against a scaled upload

# %%
import numpy as np

from fedmlac.client import ClientUpload
from fedmlac.nn import ModelSpec, init_model
from fedmlac.server import AggregationConfig, fedavg_aggregate, lpa_aggregate

rng = np.random.default_rng(0)
spec = ModelSpec.mlp(8, (16,), 4)
base = init_model(spec, rng)
uploads = []
for k in range(10):
    m = base.copy()
    for layer in m.layers:
        layer.weights += 0.01 * rng.standard_normal(layer.weights.shape)
    uploads.append(ClientUpload(k, m, n_k=50, train_loss=0.0, grad_sq_norm=0.0))
poisoned = base.copy()
for layer in poisoned.layers:
    layer.weights *= 100.0
uploads.append(ClientUpload(10, poisoned, n_k=50, train_loss=0.0, grad_sq_norm=0.0))

# %% [markdown]
# Per-layer deviations from the unweighted mean, and the trusted set after
# dropping the top 10%:

# %%
agg, audit = lpa_aggregate(uploads, AggregationConfig(v_l=0.0, v_h=0.1), return_audit=True)
for rec in audit.records(0):
    worst = rec["deviations"][-1]
    print(f"layer {rec['layer']}: largest deviation client {worst[0]} ({worst[1]:.1f}); trusted {rec['trusted']}")

# %%
honest_avg = fedavg_aggregate(uploads[:10])
print("LPA   distance from honest mean:", np.abs(agg.flat() - honest_avg.flat()).max())
print("FedAvg distance from honest mean:", np.abs(fedavg_aggregate(uploads).flat() - honest_avg.flat()).max())
