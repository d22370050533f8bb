# Clean versus noisy gradients at the zero-adapter point.
#
# With Adam-sized batches the minibatch gradient barely changes from one
# draw to the next, so successive gradients point the same way. With a
# batch of 4 plus injected noise and clipping they mostly cancel.

import numpy as np

from circuit_seed import TrainConfig, make_rng, make_task, TargetSpec
from circuit_seed.diagnostics import (
    StructureReport, init_gradient_trace, random_mask, signal_retention, top_k_mask,
)
from circuit_seed.discovery import accumulate

for regime, kind in (("clean", "dense_rank2"), ("noisy", "sparse_b")):
    task = make_task(TargetSpec(kind=kind, seed=1))
    trace = init_gradient_trace(task, TrainConfig.for_regime(regime, seed=1), length=50)
    rep = StructureReport.from_trace(trace)
    print(f"{regime:>5} ({kind}): rank {rep.effective_rank:6.2f}  "
          f"cos {rep.mean_cosine:5.2f}  efficiency {rep.accumulation_efficiency:4.2f}")

# how much of the mean gradient lives in 5% of B?
task = make_task(TargetSpec(kind="sparse_b", seed=1))
g = accumulate(task.fresh_model(), task, 100, 128, make_rng(1)).mean
rng = make_rng(7)
rand = np.mean([signal_retention(g, random_mask(g.shape, 51, rng)) for _ in range(1000)])
print(f"top-51 keeps {signal_retention(g, top_k_mask(g, 51)):.1%} of the gradient energy, "
      f"random 51 keep {rand:.1%} (k/d = {51 / 1024:.1%})")
