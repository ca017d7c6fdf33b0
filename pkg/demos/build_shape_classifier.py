"""Retrain the shipped shape classifier and write its weights into the package."""
from pathlib import Path

import numpy as np

from rpattn import data, metrics
from rpattn import ndcore as nd

target = Path(metrics.__file__).with_name(metrics.SHIPPED_CLASSIFIER)
clf = metrics.train_shape_classifier()
nd.archive.save(target, clf.state_dict(), {"classes": clf.classes})

held_out = data.synth_generate(99, 300)
labels = np.array([clf.classes.index(" ".join(s.largest_class)) for s in held_out.samples])
probs = metrics.classify(held_out.images(), clf)
print(f"wrote {target}")
print(f"held-out accuracy {np.mean(probs.argmax(1) == labels):.3f}")
print("inception score on real scenes %.3f +- %.3f" % metrics.inception_score(probs))
