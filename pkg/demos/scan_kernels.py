"""
State-space scans on plain arrays
=================================

A walk from a single discretised state up to the four-way scan over an image.
Run with ``python demos/scan_kernels.py``.
"""

import numpy as np

from pyramid_mamba import tensor as T
from pyramid_mamba.ssm import (Scan4, discretize_zoh, make_params, selective_scan_core, ssm_conv, ssm_kernel,
                               ssm_recurrent)

# one channel, one state, a = -1 held for ln 2 seconds halves the state each step
d = discretize_zoh(make_params(-1.0, 1.0, 1.0, np.log(2.0)))
print("A_bar", d.A_bar.item(), "B_bar", d.B_bar.item())
impulse = np.zeros((1, 6))
impulse[0, 0] = 1.0
print("impulse response", ssm_recurrent(d, impulse).round(4))

# the same system unrolled into a causal convolution kernel
rng = np.random.default_rng(0)
A = -rng.uniform(0.1, 1.5, (3, 4))
d = discretize_zoh(make_params(A, rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), [0.3, 0.1, 0.5]))
x = rng.standard_normal((3, 200))
K = ssm_kernel(d, 200)
print("kernel shape", K.shape, "max |recurrent - conv|", np.abs(ssm_recurrent(d, x) - ssm_conv(x, K)).max())

# selective scan: the step and the input/output maps now change with every token
L, E, N = 8, 2, 3
u = T.tensor(rng.standard_normal((1, L, E)))
delta = T.tensor(np.full((1, L, E), 0.2))
delta.data[0, 4:] = 2.0  # longer steps forget faster
y = selective_scan_core(u, delta, T.tensor(-np.ones((E, N))), T.tensor(np.ones((1, L, N))),
                        T.tensor(np.ones((1, L, N))))
print("selective scan output\n", y.data[0].round(3))

# four traversal orders give every pixel context from all sides
scan = Scan4(channels=4, d_state=8, rng=np.random.default_rng(1), dtype=np.float64)
# the output map depends on the input, so probe with a nudge on a random background
background = rng.standard_normal((1, 4, 6, 6))
img = background.copy()
img[0, :, 2, 3] += 1.0
with T.no_grad():
    base = scan(T.tensor(background)).data
    out = scan(T.tensor(img)).data
reach = np.abs(out - base).sum(axis=1)[0] > 1e-12
print("pixels influenced by (2, 3):\n", reach.astype(int))
