# %% [markdown]
# Mask 40% of the patches, encode the rest, and decode with and without the
# spectrogram keys.

# %%
import numpy as np

from cupid import model as M
from cupid.model import ModelConfig
from cupid.synthetic import SynthConfig, generate

cfg = ModelConfig(d_model=32, enc_blocks=1, enc_heads=2, dec_blocks=2, dec_heads=2)
params = M.init_params(cfg, 0)
x = np.stack([w.samples for w in generate(SynthConfig(n_windows=2, seed=0))])
mask = M.random_mask(cfg.n_patches, cfg.mask_ratio, np.random.default_rng(0), batch=2)
print("masked patches per window", mask.count, "of", cfg.n_patches)

# %%
loss, recon = M.forward(params, cfg, x, mask)
loss_mtae, _ = M.forward(params, M.with_variant(cfg, "mtae"), x, mask)
print("reconstruction", recon.shape, "cupid loss", loss.item(), "mtae loss", loss_mtae.item())

# %% representations for downstream probing: mean of encoder tokens, no masking
print("representation", M.represent(params, cfg, x).shape)
