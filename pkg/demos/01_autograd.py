"""A first look at the autograd engine.

We build a tiny two-layer network by hand, record it on a tape, pull
gradients back through it, and then let finite differences confirm them.
Run with ``python demos/01_autograd.py``.
"""

import numpy as np

from mtomnet import tensor as tn
from mtomnet.gradcheck import check_gradients
from mtomnet.tensor import Tape, Tensor

rng = np.random.default_rng(0)

# float64 throughout so finite differences are meaningful
x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
w1 = Tensor(rng.normal(size=(8, 6)) * 0.4, dtype=np.float64, requires_grad=True)
w2 = Tensor(rng.normal(size=(3, 8)) * 0.4, dtype=np.float64, requires_grad=True)


def loss_fn(*_):
    hidden = tn.gelu(tn.linear(x, w1))
    logp = tn.log_softmax(tn.linear(hidden, w2), axis=-1)
    return tn.scale(tn.tsum(logp[:, 0]), -1.0)


with Tape() as tape:
    loss = loss_fn()
print(f"loss {loss.item():.6f}, {len(tape)} recorded ops")
tape.backward(loss)
print(f"|dL/dw1| = {np.linalg.norm(w1.grad):.6f}, |dL/dw2| = {np.linalg.norm(w2.grad):.6f}")

# The checker perturbs each coordinate and compares slopes with the tape.
res = check_gradients(loss_fn, [w1, w2], h=2e-3, five_point=True)
print(f"finite differences agree to {res.max_rel_error:.2e} over {res.checked} coordinates")

# ReLU has a kink at zero; the checker notices and leaves such points out.
z = Tensor(np.array([-1.0, 0.0, 2.0]), dtype=np.float64)
res = check_gradients(lambda *_: tn.tsum(tn.relu(z)), [z], h=1e-6)
print(f"relu: checked {res.checked}, flagged kinks at {res.flagged}")
