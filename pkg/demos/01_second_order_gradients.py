"""Gradients of gradients with the tape.

A one-step MAML toy: adapt theta on a quadratic, score the adapted point,
and compare the exact meta-gradient with the first-order shortcut.
"""

import numpy as np

from masf.tensor import Tape, Tensor, grad

a, b, rho = 2.0, -1.0, 0.1


def loss(t):
    return 0.5 * a * (t - b) * (t - b)


with Tape():
    theta = Tensor(np.array(0.0), requires_grad=True)
    (g,) = grad(loss(theta), [theta], create_graph=True)   # g still depends on theta
    adapted = theta - rho * g
    (exact,) = grad(loss(adapted), [theta])
    (first,) = grad(loss(adapted), [adapted])

t1 = 0.0 - rho * a * (0.0 - b)
print("adapted point       ", adapted.item(), "expected", t1)
print("exact meta-gradient ", exact.item(), "closed form", a * (t1 - b) * (1 - rho * a))
print("first-order         ", first.item(), "closed form", a * (t1 - b))

# the same numbers through the reference MAML helper
from masf.trainer import maml_meta_gradient

quad = lambda p: 0.5 * a * (p["t"] - b) * (p["t"] - b)
print("helper exact        ", maml_meta_gradient({"t": np.array(0.0)}, [quad], rho, "exact")["t"])
