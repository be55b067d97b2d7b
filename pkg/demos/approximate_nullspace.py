"""
Learning approximate nullspace noise
====================================

Pretrain the toy ViT on the synthetic desk dataset, learn a token-space
noise whose effect on the output distribution stays below eps, then look at
what scaling and mixing such noises does. Takes about five minutes on one core.
"""

import numpy as np

from nsvit import rng as rngs
from nsvit.noise import NoiseEvaluator, permute_noise
from nsvit.pipeline import desk_pretrained
from nsvit.properties import convex_grid, learn_noise_set, scaling_sweep

pre = desk_pretrained(0)
print(f"pretrained: train acc {pre.train_acc:.3f}  test acc {pre.test_acc:.3f}")

# each candidate must also beat eps on the first 512 training images
confirm = pre.train.subset(slice(0, 512))
noises = learn_noise_set(pre.params, pre.train, m=4, seed=0, eps=0.03, confirm_set=confirm)
for r in noises:
    print(f"steps {r.steps:4d}  minibatch delta {r.delta:.4f}  confirm delta {r.confirm_delta:.4f}  norm {r.noise.norm:.1f}")

# held-out influence, against the same numbers shuffled into random positions
held_out = NoiseEvaluator(pre.params, pre.test.images)
v = noises[0].noise
perm = [held_out(permute_noise(v, rngs.stream(s, rngs.PERMUTATION))).mse_prob for s in range(10)]
m = held_out(v)
print(f"held out: mse prob {m.mse_prob:.4f}  match {m.match_rate:.3f}  permuted median {np.median(perm):.4f}")

# scaling: influence grows roughly like alpha squared
ev = NoiseEvaluator(pre.params, confirm.images)
curve = scaling_sweep(pre.params, None, noises, alphas=(0.25, 0.5, 0.75, 1.0, 1.5, 2.0), evaluator=ev)
for alpha, value in curve.rows():
    print(f"alpha {alpha:4.2f}  mse prob {value:.4f}")

# convex combinations of two noises stay near eps
grid = convex_grid(pre.params, None, noises, [(0, 1), (2, 3)], grid_step=0.25, evaluator=ev)
print("alpha1 + alpha2 = 1:", np.round(grid.on_segment(), 4))
