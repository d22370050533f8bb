# Two checks that the discovered circuit is a property of the network
# rather than of the Monte-Carlo draw.
#
# 1. Perturbing the frozen projection A slightly leaves the circuit
#    almost unchanged; large perturbations scramble it.
# 2. After full LoRA training, zeroing the highest-Fisher entries of B
#    hurts far more than zeroing the same number of random entries.

from circuit_seed import TargetSpec, TrainConfig, make_rng, make_task, overlap, train
from circuit_seed.diagnostics import knockout_sweep
from circuit_seed.discovery import accumulate, perturb_a, score, select_top_k

task = make_task(TargetSpec(kind="sparse_b", seed=2))
model = task.fresh_model()


def circuit(m):
    stats = accumulate(m, task, 100, 128, make_rng(2))
    return select_top_k(score(stats, "s_hat"), 51)


ref = circuit(model)
for eps in (0.01, 0.1, 0.5, 2.0):
    moved = perturb_a(model, eps, make_rng(2, 3))
    print(f"eps {eps:<4}: overlap with unperturbed circuit {overlap(circuit(moved), ref):.3f}")

lora = train(task, None, TrainConfig.for_regime("noisy", seed=2, train_a=True)).model
fisher = score(accumulate(model, task, 100, 128, make_rng(2)), "f_hat")
circ, rand = knockout_sweep(lora, fisher, (0.0, 0.01, 0.05, 0.2, 0.5, 1.0), task)
print("fraction  circuit  random")
for c, r in zip(circ, rand):
    print(f"{c.fraction_zeroed:8.2f}  {c.relative_mse:7.3f}  {r.relative_mse:6.3f}")
