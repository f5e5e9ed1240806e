# %% [markdown]
# # Donor, then receiver
#
# Phase 1 trains a plain attention model (the donor). Phase 2 trains a fresh
# model of the same shape while hiding donor-selected instances from its
# attention layer, re-drawing masks every epoch. Both keep their best
# validation checkpoint.

# %%
from dataclasses import replace

from mhimil import MhimConfig, ModelConfig, TrainConfig, train_phase1, train_phase2
from mhimil.dataio import SynthConfig, generate_synthetic
from mhimil.evalx import evaluate
from mhimil.numcore import LrSchedule
from mhimil.pipeline import kfold_split, select_bags

bags = generate_synthetic(
    SynthConfig(n_bags=60, bag_size_range=(8, 16), response_dim=8, prefix_dim=0, relevance_rate=0.05, seed=3)
)
fold = kfold_split([b.id for b in bags], k=5, seed=3)[0]
train, val, test = (select_bags(bags, ids) for ids in (fold.train_ids, fold.val_ids, fold.test_ids))
print(len(train), len(val), len(test))

model = ModelConfig(response_dim=8, proj_dim=8, lstm_hidden=6, attn_dim=6, seed=3)
cfg = TrainConfig(epochs=15, schedule=LrSchedule(peak_lr=1e-2, floor_lr=1e-6), seed=3)

# %%
donor = train_phase1(cfg, model, train, val)
print("donor best epoch", donor.best_epoch, "val rmse", round(donor.best_val_rmse, 4))

receiver = train_phase2(replace(cfg, mhim=MhimConfig(t=1, b=1)), donor.params, train, val, record_plans=True)
print("receiver best epoch", receiver.best_epoch, "val rmse", round(receiver.best_val_rmse, 4))
print("mask plans drawn:", len(receiver.plans))

# %% [markdown]
# ## Test-block comparison

# %%
for name, result in (("donor", donor), ("receiver", receiver)):
    report, _ = evaluate(result.params, test)
    print(f"{name:9s} rmse {report.rmse:.4f}  mae {report.mae:.4f}  entropy {report.mean_entropy:.4f}")

# %% [markdown]
# With nothing masked, phase 2 is the same computation as phase 1:

# %%
same = train_phase2(replace(cfg, mhim=MhimConfig(t=0, b=0)), donor.params, train, val)
print("identical to donor:", same.params.equals(donor.params))
