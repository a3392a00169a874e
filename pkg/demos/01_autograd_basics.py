"""
Reverse-mode autograd on the tape
=================================

Every operation on a Tensor records a node on a global tape; backward()
walks the tape in reverse and accumulates gradients into the leaves.
"""

import numpy as np

from xabr.tensor import Tensor, matmul, no_grad, reset_tape, softmax

# a small computation: y = softmax(x W) contracted with a constant
x = Tensor(np.array([[1.0, -2.0, 0.5]]), requires_grad=True)
w = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
c = Tensor(np.array([[0.1, 0.2, 0.3, 0.4]]))

y = (softmax(matmul(x, w)) * c).sum()
print("loss value:", float(y.item()))

y.backward()
print("d loss / d x:", x.grad)

# gradients accumulate: a second backward pass doubles the leaf grads
saved = x.grad.copy()
reset_tape()
x2 = (x * x).sum()
x2.backward()
print("after another backward, x.grad changed by 2x:", x.grad - saved)

# check one entry against a central finite difference
i = 0
h = 1e-4
with no_grad():
    x.data[0, i] += h
    hi = float((softmax(matmul(x, w)) * c).sum().item())
    x.data[0, i] -= 2 * h
    lo = float((softmax(matmul(x, w)) * c).sum().item())
    x.data[0, i] += h
print("numeric estimate:", (hi - lo) / (2 * h))
print("analytic entry:  ", saved[0, i])

# no_grad computations stay off the tape entirely
reset_tape()
with no_grad():
    silent = (x * 2.0).sum()
print("loss built under no_grad has no backward:", silent.requires_grad)
