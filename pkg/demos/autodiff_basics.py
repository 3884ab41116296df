# %% [markdown]
# Reverse-mode autodiff on numpy arrays: build a small graph, backpropagate,
# and compare against central differences.

# %%
import numpy as np

from cupid import autodiff as ad
from cupid.autodiff import Tensor

rng = np.random.default_rng(0)
a = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
b = Tensor(rng.standard_normal((5, 3)), requires_grad=True)

# %%
loss = ad.sum_(ad.gelu(ad.matmul(a, b), approximate="tanh"))
loss.backward()
print("loss", loss.item())
print("dL/da shape", a.grad.shape)

# %% central differences agree with the tape
num = ad.numerical_gradient(lambda: ad.sum_(ad.gelu(ad.matmul(a, b), approximate="tanh")), a)
print("relative error", ad.relative_error(a.grad, num))

# %% no_grad skips graph construction, e.g. for evaluation
with ad.no_grad():
    y = ad.matmul(a, b)
print("requires_grad under no_grad:", y.requires_grad)
