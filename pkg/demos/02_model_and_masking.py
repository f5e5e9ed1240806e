# %% [markdown]
# # Attention pooling over a bag, and masks drawn from a donor
#
# A bag is an ordered set of instance embeddings with one regression target.
# The model projects each instance, runs a bidirectional LSTM across the bag,
# scores every position with additive attention and regresses the target from
# the attention-weighted context.

# %%
import numpy as np

from mhimil import MhimConfig, ModelConfig, encode_bag, init_params
from mhimil.dataio import SynthConfig, generate_synthetic
from mhimil.mhim import AttentionRecord, apply_plan, sample_mask

bags = generate_synthetic(SynthConfig(n_bags=8, bag_size_range=(6, 10), relevance_rate=0.1, seed=1))
bag = next(b for b in bags if b.isl.any())
print(bag, "relevant:", np.flatnonzero(bag.isl))

config = ModelConfig(response_dim=16, prefix_dim=8, proj_dim=16, lstm_hidden=8, attn_dim=8, seed=0)
params = init_params(config)
out = encode_bag(params, bag)
print("prediction:", round(out.prediction, 4))
print("attention:", np.round(out.attention, 3))

# %% [markdown]
# ## Drawing a mask plan
#
# `t` instances are masked from the `r` highest-attention ones and `b` from
# the rest. At least half the bag always stays visible.

# %%
record = AttentionRecord(bag.id, out.attention)
cfg = MhimConfig(t=1, b=2)
plan = sample_mask(record, cfg, rng=7)
print("top pool:", plan.top_pool)
print("masked (top / bottom):", plan.top_masked, plan.bottom_masked)

mask = apply_plan(plan, len(bag))
masked = encode_bag(params, bag, mask)
print("attention under mask:", np.round(masked.attention, 3))

# %% [markdown]
# Masked instances still pass through the LSTM; only their attention weight
# is forced to zero.

# %%
assert np.all(masked.attention[mask] == 0.0)
print("sum of visible weights:", masked.attention[~mask].sum())
