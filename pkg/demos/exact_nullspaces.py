"""
Exact nullspaces of a vision transformer
========================================

Two places where a ViT provably ignores part of its input: the patch
embedding (a wide-to-narrow linear map) and a family of attention heads
built to share a null direction.
"""

import numpy as np

from nsvit import rng as rngs
from nsvit.attention_null import check_conditions, construct_null_w, synth_head_params, verify_head_invariance
from nsvit.patch_null import compute_patch_nullspace, sample_patch_noise, verify_model_invariance
from nsvit.vit import ModelConfig, ViTParams

# a fresh toy model in float64: 8x8x3 patches (192 numbers) embedded into 64 dims
params = ViTParams.init(ModelConfig(), rngs.stream(0, rngs.MODEL_INIT), np.float64)
basis = compute_patch_nullspace(params)
print("patch dim", params.config.patch_dim, "embed dim", params.config.embed_dim, "nullspace dim", basis.dim)

# noise ten times larger than the images themselves
images = np.random.default_rng(1).uniform(size=(64, 3, 32, 32))
scale = 10 * np.linalg.norm(images.reshape(64, -1), axis=1).mean()
noise = sample_patch_noise(basis, params.config, scale, np.random.default_rng(2))
report = verify_model_invariance(params, images, noise)
print(f"noise norm {noise.norm:.1f}  max logit change {report.max_logit_dev:.2e}  match rate {report.match_rate}")

# the same norm in a random direction changes predictions
g = np.random.default_rng(3).standard_normal((3, 32, 32))
control = verify_model_invariance(params, images, g * scale / np.linalg.norm(g))
print(f"random control: max logit change {control.max_logit_dev:.2f}  match rate {control.match_rate:.2f}")

# clipping the noisy image back to [0, 1] leaves the nullspace
clipped = verify_model_invariance(params, images, noise, clip=True)
print(f"after clipping: max logit change {clipped.max_logit_dev:.2f}")

# attention heads whose bilinear forms are symmetric and share row space
heads = synth_head_params(64, 4, 16, None, rngs.stream(0, "prop1"))
conditions = check_conditions(heads)
print("conditions hold:", conditions.all_pass, " dim S =", conditions.dim_s, " dim S_perp =", conditions.dim_s_perp)

# every row of W is a multiple of one direction w outside all head row spaces
null = construct_null_w(heads, 17, row_scales=np.linspace(-100, 100, 17))
X = np.random.default_rng(4).standard_normal((17, 64))
print("per-head output change:", verify_head_invariance(heads, X, null.W))
