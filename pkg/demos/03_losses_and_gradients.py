"""Poke at the adaptation objective: term breakdown plus a gradient spot check.

Builds the five networks at toy size, runs one mixed batch through the
generator objective, prints every term, then compares one autograd partial
against a central finite difference.
"""
import numpy as np
import torch

from itl.losses import (LossWeights, UdaBatch, UdaModels, one_hot_labels,
                        uda_discriminator_objective, uda_generator_objective)
from itl.nets import (DiscriminatorSpec, GeneratorSpec, SegmentorSpec,
                      build_discriminator, build_generator, build_segmentor)

torch.manual_seed(0)
rng = np.random.default_rng(0)

gen_spec = GeneratorSpec(down_stages=1, res_blocks=1, base_width=4)
disc_spec = DiscriminatorSpec(down_stages=2, base_width=4)
models = UdaModels(
    g_t2s=build_generator(gen_spec, seed=1),
    g_s2t=build_generator(gen_spec, seed=2),
    d_s=build_discriminator(disc_spec, seed=3),
    d_t=build_discriminator(disc_spec, seed=4),
    d_m=build_discriminator(disc_spec, seed=5),
    f_s=build_segmentor(SegmentorSpec(levels=2, base_width=4), seed=6),
)
for p in models.f_s.parameters():
    p.requires_grad_(False)

x_s = torch.from_numpy(rng.random((2, 4, 8, 8, 8), dtype=np.float32))
x_t = torch.from_numpy(rng.random((2, 4, 8, 8, 8), dtype=np.float32))
y_s = one_hot_labels(torch.from_numpy(rng.integers(0, 4, (2, 8, 8, 8))))
batch = UdaBatch(x_s=x_s, x_t=x_t, y_s=y_s)

weights = LossWeights()
total, breakdown = uda_generator_objective(batch, models, weights)
print("generator objective terms:")
for key in ("adv_t", "adv_s", "cycle", "identity", "semantic", "total"):
    print(f"  {key:9s} {breakdown[key]:.5f}")

for which in ("d_s", "d_t", "d_m"):
    loss = uda_discriminator_objective(which, batch, models)
    print(f"discriminator {which}: {float(loss):.5f}")

# spot check: d total / d w for one generator weight, against central difference
param = models.g_t2s.head.weight
total, _ = uda_generator_objective(batch, models, weights)
g = torch.autograd.grad(total, param)[0][0, 0, 1, 1, 1].item()

h = 1e-3
with torch.no_grad():
    param[0, 0, 1, 1, 1] += h
plus, _ = uda_generator_objective(batch, models, weights)
with torch.no_grad():
    param[0, 0, 1, 1, 1] -= 2 * h
minus, _ = uda_generator_objective(batch, models, weights)
with torch.no_grad():
    param[0, 0, 1, 1, 1] += h

fd = (float(plus) - float(minus)) / (2 * h)
print(f"autograd {g:.6f} vs finite difference {fd:.6f} "
      f"(rel err {abs(g - fd) / max(abs(fd), 1e-9):.2e})")
