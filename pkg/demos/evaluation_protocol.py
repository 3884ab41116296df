# %% [markdown]
# Patient-disjoint folds, a logistic-regression probe on frozen
# representations, and rank AUC.

# %%
import numpy as np

from cupid import evaluation as E
from cupid import model as M
from cupid.model import ModelConfig
from cupid.synthetic import rhythm_corpus

ws = rhythm_corpus(120, seed=1, windows_per_patient=4)
x = np.stack([w.samples for w in ws])
y = [w.label for w in ws]
pids = [w.patient_id for w in ws]
folds = E.make_folds(pids, n_folds=5, seed=0)
print("fold sizes (patients)", [(len(f.train), len(f.val), len(f.test)) for f in folds])

# %% probe an untrained encoder; real use loads a pretraining checkpoint instead
cfg = ModelConfig(d_model=32, enc_blocks=1, enc_heads=2, dec_blocks=1, dec_heads=2)
reps = M.represent(M.init_params(cfg, 0), cfg, x)
report = E.linear_probe(reps, y, pids, folds)
print(report.summary())

# %% early stopping with patience 5
stopper = E.EarlyStopping(5)
for v in [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]:
    if stopper.step(v):
        break
print("stopped at epoch", stopper.epoch, "best epoch", stopper.best_epoch)
