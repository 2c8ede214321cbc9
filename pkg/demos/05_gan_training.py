"""Train a generator against a decision tree on toy feature matrices."""

import numpy as np

from codetensor import gan
from codetensor.detectors import bbda, fit

rng = np.random.default_rng(0)
benign = rng.uniform(0, 0.3, (40, 64, 64))
malware = rng.uniform(0, 0.3, (40, 64, 64))
malware[:, 20:32, 16:48] = rng.uniform(0.6, 0.8, (40, 12, 32))  # planted motif

X = np.concatenate([malware, benign])
y = np.array([1] * 40 + [0] * 40)
black_bone = fit("DT", (X, y))
print("detector recall on real malware:", bbda(black_bone, malware))

state, report = gan.train(gan.GanConfig(epochs=30, m=8), malware, benign, black_bone)
for row in state.history[::5]:
    print("step {step:3d}  L_D {loss_d:7.3f}  L_G {loss_g:7.3f}  perceptual {perceptual:.4f}  "
          "generated recall {bbda_generated:.2f}".format(**row))
print(f"recall before {report.bbda_original:.2f}, on generated malware {report.bbda_trained:.2f}")

test = rng.uniform(0, 0.3, (20, 64, 64))
test[:, 20:32, 16:48] = rng.uniform(0.6, 0.8, (20, 12, 32))
retrained = gan.retrain_and_improve(state, black_bone, "DT", malware, benign, test)
print(f"held-out recall: original {retrained.bbda_original:.2f}, retrained {retrained.bbda_trained:.2f}")
