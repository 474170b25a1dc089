"""Walkthrough: the 3D CNN's shape ledger and a finite-difference audit.

Prints the stage-by-stage activation shapes of the default architecture,
then rebuilds a reduced model in float64 and checks a sample of analytic
gradients against central differences.
"""

import numpy as np

from dustpipe import LossConfig, ModelConfig, backward, forward, init_params, shape_ledger, wmse_loss

# --- shape ledger ----------------------------------------------------------------
print("default architecture (one 38x5x5 patch, batch axis omitted):")
for stage, shape in shape_ledger(ModelConfig()):
    pretty = "x".join(map(str, shape)) if shape else "scalar"
    print(f"  {stage:8s} {pretty}")

params = init_params(0)
n_params = sum(v.size for v in params.tensors.values())
print(f"\nparameter tensors: {len(params.tensors)}, total values {n_params}")

# --- gradient audit on a reduced model ---------------------------------------------
config = ModelConfig(filters=(2, 3, 4), in_depth=6, patch_size=3)
params = init_params(42, config, dtype=np.float64)
rng = np.random.default_rng(7)
x = rng.uniform(0, 1, size=(4, 1, 6, 3, 3))
y = rng.uniform(0, 1, size=4)
loss_cfg = LossConfig(alpha=1.0)


def loss_of():
    preds, _ = forward(params, x, mode="train", update_running_stats=False)
    return wmse_loss(preds, y, loss_cfg)[0]


preds, trace = forward(params, x, mode="train", update_running_stats=False)
loss, dpreds = wmse_loss(preds, y, loss_cfg)
grads = backward(params, trace, dpreds)
print(f"\nreduced model: loss {loss:.6f} on batch of 4")

step = 1e-4
worst = 0.0
checked = 0
for name, g in grads.items():
    flat = params.tensors[name].ravel()
    for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_of()
        flat[i] = orig - step
        down = loss_of()
        flat[i] = orig
        fd = (up - down) / (2 * step)
        worst = max(worst, abs(fd - g.ravel()[i]) / max(abs(fd), abs(g.ravel()[i]), 1e-6))
        checked += 1
print(f"finite differences vs analytic on {checked} sampled parameters: "
      f"worst relative error {worst:.2e}")
print("(the acceptance suite sweeps every parameter)")
