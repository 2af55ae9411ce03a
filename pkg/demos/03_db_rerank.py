"""How the DB re-ranking trades off self and partner evidence.

Each person's label is argmax(P_self^tau * P_other).  A small tau lets the
partner overrule a weak self preference; a large tau makes the choice
follow P_self.  Close calls still flip at tau = 50 (see the README's note
on acceptance criterion 3c).
"""

import numpy as np

from mtomnet.model import db_rerank

p_self = np.array([0.45, 0.35, 0.20])
p_other = np.array([0.05, 0.90, 0.05])
for tau in (0.5, 1, 5, 20, 50):
    a, _ = db_rerank(p_self, p_other, tau)
    print(f"tau {tau:>4}: label {a} (self argmax 0)")

# A uniform partner carries no information and changes nothing.
uniform = np.full(3, 1 / 3)
print("uniform partner keeps", db_rerank(p_self, uniform, 1.0)[0])

rng = np.random.default_rng(2024)
pairs = rng.dirichlet(np.ones(27), size=(1000, 2))
for tau in (5, 50, 500, 5000):
    agree = np.mean(db_rerank(pairs[:, 0], pairs[:, 1], tau)[0] == pairs[:, 0].argmax(-1))
    print(f"tau {tau:>4}: agrees with argmax(P_self) on {agree:.1%} of random 27-class pairs")
