"""
Gradients and attention from scratch
====================================

A tour of the tensor library and the two attention mechanisms the encoders
are built from.
"""

import numpy as np

from pef import autodiff as ad
from pef.autodiff import Tensor
from pef.blocks import XCA, Attention, Init

rng = np.random.default_rng(0)

# define-by-run: every op records its parents, backward walks them in reverse
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
loss = ad.sum_(ad.gelu(ad.matmul(x, w)))
ad.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# the same gradient, checked against central differences
rep = ad.finite_difference_check(lambda t: ad.sum_(ad.gelu(ad.matmul(x, t))), Tensor(w.data))
print(rep)

# token attention builds an N x N map, XCA a (d/h) x (d/h) map per head
init = Init(rng, np.float64)
attn, xca = Attention(16, 2, init), XCA(16, 2, init)
for n in (8, 64, 256):
    tokens = Tensor(rng.standard_normal((1, n, 16)))
    _, a_map = attn(tokens, tokens, tokens, return_weights=True)
    _, x_map = xca(tokens, return_weights=True)
    print(f"N={n:4d}  attention map {a_map.shape}  xca map {x_map.shape}")
