"""Train a patch against the shipped victim, paste it on a few held-out images
and watch the search, occlusion and vote undo it."""
import numpy as np

from lisfguard.experiments import attack_images, defend_patched_images, train_default_patch
from lisfguard.scenario import TARGET_CLASS
from lisfguard.victim import default_victim

net = default_victim()
res = train_default_patch(net, steps=300)
print(f"patch success on training images: {res.success_rate:.3f} (base {res.base_rate:.3f})")

held = attack_images(seed=11, n=40)
out = defend_patched_images(net, res.patch, held)
hits = [d for d in out if d.attacked_label == TARGET_CLASS]
print(f"{len(hits)}/{len(out)} held-out images flipped to class {TARGET_CLASS}")
for d in out[:8]:
    print(f"clean {d.clean_label}  attacked {d.attacked_label}  defended {d.verdict_label}"
          f"  adversarial={d.adversarial}  candidates={len(d.candidates)}  masked={list(d.masked_labels)}")
rec = np.mean([d.verdict_label == d.clean_label for d in out])
print(f"recovered accuracy {rec:.3f}")
