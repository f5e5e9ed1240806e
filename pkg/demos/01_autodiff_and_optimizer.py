# %% [markdown]
# # Tape-based gradients and AdamW
#
# Every differentiable operation records a node on the active `Tape`.
# Calling `backward` on a scalar walks the tape in reverse and fills `.grad`
# on the leaves.

# %%
import numpy as np

from mhimil.numcore import (
    LrSchedule,
    OptimizerState,
    Tape,
    Tensor,
    adamw_step,
    backward,
    lr_at,
    masked_softmax,
    max_relative_error,
    numeric_gradient,
)

x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
with Tape() as tape:
    y = (x * x).tanh().sum()
print("nodes on tape:", len(tape))
backward(y)
print("analytic grad:", x.grad)

# %% [markdown]
# Central differences agree with the tape:

# %%
arr = x.data.copy()
numeric = numeric_gradient(lambda: float(np.tanh(arr * arr).sum()), [arr])
print("max relative error:", max_relative_error([x.grad], numeric))

# %% [markdown]
# ## Masked softmax
#
# Masked positions come out as exact zeros, and the rest still sum to one.

# %%
logits = Tensor(np.array([2.0, 1.0, 0.5, -3.0]))
print(masked_softmax(logits, np.array([False, True, False, False])).data)

# %% [markdown]
# ## Warmup-then-decay learning rate and a few AdamW steps on a quadratic

# %%
schedule = LrSchedule(peak_lr=0.1, floor_lr=1e-4, total_steps=50)
print("warmup steps:", schedule.warmup_steps)
print("lr at 0, warmup, end:", lr_at(schedule, 0), lr_at(schedule, schedule.warmup_steps), lr_at(schedule, 50))

params = {"w": np.array([3.0, -2.0])}
state = OptimizerState(weight_decay=0.0)
for step in range(50):
    w = Tensor(params["w"], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
    backward(loss)
    adamw_step(params, {"w": w.grad}, state, lr_at(schedule, step))
print("w after 50 steps:", params["w"])
