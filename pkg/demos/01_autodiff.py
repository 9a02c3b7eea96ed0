# The autodiff tape: build a small expression, backprop, compare with finite differences.
import numpy as np

from conslt import tensor as T
from conslt.gradcheck import analytic_grad, max_relative_error, numerical_grad

rng = np.random.default_rng(0)
x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)

def f():
    return T.sum_(T.softmax(x @ w) * np.array([1.0, -1.0]))

print("f =", f().item())
ga, gw = analytic_grad(f, [x, w])
na, nw = numerical_grad(f, [x, w], h=1e-5)
print("d f / d w, tape:\n", gw)
print("d f / d w, central differences:\n", nw)
print("max relative error:", max_relative_error(f, [x, w], h=1e-4))

# Random numbers come from counter-based substreams, so a step's dropout
# masks depend only on (seed, step, pass) and not on how many draws came before.
rs = T.RngState(7)
print(rs.substream(1, 3, 1).random(3))
print(rs.substream(1, 3, 1).random(3))  # same triple, same numbers
