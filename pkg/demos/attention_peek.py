"""Show where the trained text encoder's words and phrases attend in one validation image.

Usage: python demos/attention_peek.py [config] [index]
"""
import sys

import numpy as np

from rpattn import damsm, trainer
from rpattn import ndcore as nd
from rpattn.config import load_config
from rpattn.textenc import parse

cfg = load_config(sys.argv[1] if len(sys.argv) > 1 else "configs/desk.json")
i = int(sys.argv[2]) if len(sys.argv) > 2 else 0
text_enc, image_enc = trainer.load_encoders(cfg)
val = trainer.load_split(cfg, "val")
sent = parse(val.captions[i])
with nd.no_grad():
    enc = text_enc.encode([sent])
    b, v = val.boxes([i])
    feats = image_enc(val.images([i]), b, v)

g = image_enc.grid_size
print(val.captions[i])
for t, word in enumerate(sent.words):
    _, alpha = damsm.region_context(enc.words.data[0, t], feats.regular.data[0], cfg.gammas[2])
    cell = int(np.argmax(alpha.data))
    print(f"  word {word:<10} peaks at grid cell ({cell // g}, {cell % g}) weight {alpha.data.max():.2f}")
live = feats.true_grid.data[0][feats.box_valid[0]]
for t, phrase in enumerate(sent.phrases()[:len(live)]):
    _, alpha = damsm.region_context(enc.phrases.data[0, t], live, cfg.gammas[2])
    k = int(np.argmax(alpha.data))
    print(f"  phrase {phrase!r:<24} -> box {k} {' '.join(f'{c:.3f}' for c in b[0, k])} weight {alpha.data.max():.2f}")
