# %% [markdown]
# # Does attention find the relevant instances?
#
# Three views of the same trained model:
#
# * attention entropy, in nats (how spread out the weights are);
# * Recall@k, the share of labeled-relevant instances inside the top k% of attention;
# * drop-top-k sensitivity: RMSE after physically removing the top-k% instances.

# %%
import numpy as np

from mhimil import ModelConfig, TrainConfig, train_phase1
from mhimil.dataio import SynthConfig, generate_synthetic
from mhimil.evalx import attention_entropy, evaluate, recall_table, sensitivity_curve
from mhimil.mhim import AttentionRecord
from mhimil.numcore import LrSchedule

print("uniform over 4:", attention_entropy([0.25] * 4), "=", np.log(4))
print("one-hot:", attention_entropy([0.0, 1.0, 0.0]))

# %%
bags = generate_synthetic(
    SynthConfig(n_bags=50, bag_size_range=(8, 14), response_dim=6, prefix_dim=0, relevance_rate=0.06,
                signal_strength=5.0, seed=5)
)  # fmt: skip
train, test = bags[:40], bags[40:]
model = ModelConfig(response_dim=6, proj_dim=8, lstm_hidden=6, attn_dim=6, seed=5)
cfg = TrainConfig(epochs=15, schedule=LrSchedule(peak_lr=1e-2, floor_lr=1e-6), seed=5)
params = train_phase1(cfg, model, train, test).params

report, attention = evaluate(params, test)
records = [AttentionRecord(b.id, a) for b, a in zip(test, attention)]
print("test rmse", round(report.rmse, 4), "mean entropy", round(report.mean_entropy, 4))

# %%
table = recall_table(records, [b.isl for b in test], [10, 20, 50, 80, 90])
for k, r in zip(table["k_percent"], table["recall"]):
    print(f"Recall@{k}%: {r}")
print("bags without relevant instances (left out):", table["undefined_bags"])

# %% [markdown]
# ## Removing what the model attends to versus removing at random

# %%
ks = [10, 20, 50, 80, 90]
guided = sensitivity_curve(params, test, "mhim-attention", ks, records)
random = sensitivity_curve(params, test, "random", ks, seed=0)
for (k, g), (_, r) in zip(guided.points, random.points):
    print(f"k={k:>4}%  attention-guided {g:.4f}  random {r:.4f}")
