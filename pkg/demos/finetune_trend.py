"""
Fine-tuning with nullspace noise
================================

Alternate between learning an eps-noise and training the model on clean
plus noisy tokens, then compare with Gaussian noise of the same influence.
Takes about ten minutes on one core.
"""

import numpy as np

from nsvit.finetune import TOY_MODEL_LR, FinetuneConfig, finetune, track_trend
from nsvit.pipeline import desk_pretrained
from nsvit.properties import corruption_accuracy, fgsm_accuracy

pre = desk_pretrained(0)
print(f"before: clean {pre.test_acc:.3f}  fgsm {fgsm_accuracy(pre.params, pre.test):.3f}")

for mode in ("nullspace", "random"):
    cfg = FinetuneConfig(rounds=10, mode=mode, model_lr=TOY_MODEL_LR)
    result = finetune(pre.params, pre.train, pre.test, cfg, seed=0)
    for log in result.logs:
        print(f"{mode:9s} round {log.round}  delta {log.delta:.4f}  norm {log.norm:6.2f}  clean {log.clean_acc:.3f}  fgsm {log.fgsm_acc:.3f}")
    norm = next(t for t in track_trend(result.logs) if t.name == "norm")
    corrupted = corruption_accuracy(result.params, pre.test, 0.1, seed=0)
    print(f"{mode}: norm relative to round 0 {np.round(norm.values, 3)}  gaussian corruption acc {corrupted:.3f}")
