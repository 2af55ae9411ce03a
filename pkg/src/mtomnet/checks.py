"""The gradient-check suite behind ``mtomnet analyze gradcheck``.

Every case builds float64 inputs, contracts the output with a fixed random
tensor to get a scalar, and compares tape gradients with finite differences
at ``points`` random coordinates.  Smooth cases use the five-point stencil;
cases with ReLU or max-pool kinks use the two-point rule with kink flagging.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import model as M
from . import tensor as tn
from .gradcheck import GradCheckResult, check_gradients
from .tensor import Tensor

TOLERANCE = 1e-4
SMOOTH_H = 2e-3
KINK_H = 1e-6
F64 = np.float64


@dataclass
class CaseResult:
    name: str
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        # a case whose every coordinate sat on a kink verified nothing
        return self.result.checked > 0 and self.result.passed(TOLERANCE)

    def line(self) -> str:
        r = self.result
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} max_rel_err={r.max_rel_error:.3e}  checked={r.checked}  kinks={len(r.flagged)}"


def _contract(y: Tensor, w: np.ndarray) -> Tensor:
    return tn.tsum(tn.mul(y, Tensor(w, dtype=F64)))


def _case(rng, fn: Callable[[], Tensor], inputs, smooth: bool = True):
    w = rng.normal(size=fn().shape)
    loss = lambda *_: _contract(fn(), w)
    return loss, inputs, smooth


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, dtype=F64)


def _op_cases(rng):
    # every case has at least 100 coordinates
    a, b = _t(rng, 10, 12), _t(rng, 12, 10)
    x, y = _t(rng, 4, 30), _t(rng, 4, 30)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(4, 30)), dtype=F64)
    W, bias = _t(rng, 5, 30), _t(rng, 5)
    g, be = _t(rng, 30), _t(rng, 30)
    img, ker, kb = _t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3, scale=0.3), _t(rng, 4)
    feat = _t(rng, 2, 4, 6, 6)
    yield "op/matmul", _case(rng, lambda: tn.matmul(a, b), [a, b])
    yield "op/linear", _case(rng, lambda: tn.linear(x, W, bias), [x, W, bias])
    yield "op/add_mul_sub", _case(rng, lambda: tn.sub(tn.mul(tn.add(x, y), y), x), [x, y])
    yield "op/exp_log", _case(rng, lambda: tn.add(tn.exp(tn.scale(x, 0.5)), tn.log(pos)), [x, pos])
    yield "op/gelu", _case(rng, lambda: tn.gelu(x), [x])
    yield "op/sigmoid_tanh", _case(rng, lambda: tn.mul(tn.sigmoid(x), tn.tanh(y)), [x, y])
    yield "op/softmax", _case(rng, lambda: tn.softmax(x, axis=-1), [x])
    yield "op/log_softmax", _case(rng, lambda: tn.log_softmax(x, axis=-1), [x])
    yield "op/layernorm", _case(rng, lambda: tn.layernorm(x, g, be), [x, g, be])
    yield "op/concat_stack_index", _case(
        rng, lambda: tn.stack([tn.concat([x, y], axis=1), tn.concat([y, x], axis=1)])[:, 1:3, 2:50], [x, y])
    yield "op/reshape_transpose_mean", _case(
        rng, lambda: tn.mean(tn.transpose(tn.reshape(x, (12, 10)), (1, 0)), axis=0), [x])
    yield "op/relu", _case(rng, lambda: tn.relu(x), [x], smooth=False)
    yield "op/conv2d", _case(rng, lambda: tn.conv2d(img, ker, kb), [img, ker, kb])
    yield "op/maxpool2d", _case(rng, lambda: tn.maxpool2d(feat), [feat], smooth=False)
    yield "op/global_maxpool", _case(rng, lambda: tn.global_maxpool(feat), [feat], smooth=False)


def _layer_cases(rng):
    r = np.random.default_rng(int(rng.integers(2**31)))
    lin = L.Linear(12, 6, r, F64)
    x = _t(rng, 3, 12)
    yield "layer/linear", _case(rng, lambda: lin(x), [x, *lin.parameters()])

    cnn = L.CnnEncoder(r, F64)
    frames = Tensor(rng.uniform(size=(2, 3, 22, 22)), dtype=F64)
    yield "layer/cnn", _case(rng, lambda: cnn(frames), [frames, *cnn.parameters()], smooth=False)

    gcn = L.GcnEncoder(5, r, F64)
    adj = rng.uniform(size=(5, 5))
    a_hat = L.gcn_normalize(adj + adj.T)
    nodes = _t(rng, 5, 5)
    yield "layer/gcn", _case(rng, lambda: gcn(a_hat, nodes), [nodes, *gcn.parameters()])

    ln = L.LayerNorm(32, F64)
    ln.gain.data = rng.normal(size=32)
    h = _t(rng, 3, 32)
    yield "layer/layernorm", _case(rng, lambda: ln(h), [h, *ln.parameters()])

    lstm = L.BiLstm(6, r, F64, hidden=8)
    seq = _t(rng, 2, 4, 6)

    def run_lstm():
        H, c = L.bilstm_forward(seq, lstm)
        return tn.concat([tn.reshape(H, (-1,)), tn.reshape(c, (-1,))])

    yield "layer/bilstm", _case(rng, run_lstm, [seq, *lstm.parameters()])

    att = L.CrossAttention(128, r, F64)
    q, kv = _t(rng, 2, 128), _t(rng, 2, 128)
    yield "layer/cross_attention", _case(rng, lambda: att(q, kv), [q, kv, *att.parameters()])


def _forward_cases(rng):
    from .model import Cues

    for variant, agg in (("Base", "concat"), ("IC", "concat"), ("CG", "concat"), ("IC", "attention"), ("CG", "attention")):
        model = M.MToMnet(M.MToMnetConfig(variant, agg, dtype="float64"), int(rng.integers(1000)))
        steps, size = 2, 22
        ocr = rng.uniform(size=(27, 27))
        ocr = ocr + ocr.T
        cues = Cues(
            frames=rng.uniform(size=(1, steps, 3, size, size)), boxes=rng.uniform(size=(1, steps, 27, 5)),
            gaze=rng.normal(size=(1, steps, 2, 3)), pose=rng.normal(size=(1, steps, 2, 17, 3)),
            ocr=np.broadcast_to(ocr / ocr.sum(1, keepdims=True), (1, steps, 27, 27)).copy(),
        )
        logits = lambda: tn.concat([tn.reshape(v, (-1,)) for _, v in sorted(M.forward(model, cues).logits.items())])
        named = list(model.named_parameters())
        smooth = [p for n, p in named if not n.startswith("shared.cnn")]
        kinked = [p for n, p in named if n.startswith("shared.cnn")]
        loss, _, _ = _case(rng, logits, [])
        yield f"forward/{variant}-{agg}", (loss, smooth, True)
        yield f"forward/{variant}-{agg}/cnn", (loss, kinked, False)


def run_suite(points: int = 100, seed: int = 0, only: str | None = None) -> list[CaseResult]:
    """Run every case; ``only`` filters by name prefix (op/, layer/, forward/)."""
    rng = np.random.default_rng(seed)
    out = []
    for gen in (_op_cases, _layer_cases, _forward_cases):
        for name, (loss, inputs, smooth) in gen(rng):
            if only and not name.startswith(only):
                continue
            kw = dict(h=SMOOTH_H, five_point=True) if smooth else dict(h=KINK_H)
            res = check_gradients(loss, inputs, coords=points, rng=rng, **kw)
            out.append(CaseResult(name, res))
    return out
