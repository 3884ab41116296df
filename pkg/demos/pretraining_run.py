# %% [markdown]
# A short pretraining run of both variants on a mixed-jitter synthetic corpus.
# Scale iterations up (3000, d_model 64, 2+2 blocks) to see the variants separate.

# %%
import numpy as np

from cupid.model import ModelConfig
from cupid.synthetic import pretraining_corpus
from cupid.training import TrainConfig, train

windows = pretraining_corpus(200, seed=0)
tc = TrainConfig(iterations=60, batch_size=16, seed=0, progress_every=20)

# %%
for variant in ("mtae", "cupid"):
    cfg = ModelConfig(d_model=32, enc_blocks=1, enc_heads=2, dec_blocks=2, dec_heads=2, variant=variant)
    res = train(windows, cfg, tc)
    print(variant, "first", round(res.losses[0], 4), "last-20 mean", round(float(np.mean(res.losses[-20:])), 4))
