"""MToMnet: shared contextual extractors, two MindNets, and the Base, DB,
IC and CG decision/fusion variants for both dataset modes.

Dataset modes
    ``boss``  per-frame belief classification over 27 objects, one head per
              person applied to every LSTM timestep.
    ``tbd``   five-frame clips, five minds (m1, m2, m12, m21, mc), four
              classes each (occur, disappear, update, null).

Fusion happens in a 64-wide memory space.  Each MindNet summarises its cell
state as ``m = (c_fwd + c_bwd) / 2`` and projects its hidden state with
``FC(h)`` (128 -> 64, GELU, dropout).  IC fuses ``FC(h_i)`` with the partner's
memory, CG with ``cg = GELU(FC(m_1 || m_2))``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from . import container
from . import layers as L
from . import tensor as tn
from .tensor import Tensor

VARIANTS = ("Base", "DB", "IC", "CG")
AGGREGATIONS = ("sum", "mul", "concat", "attention")
MODES = ("boss", "tbd")
MODE_ALIASES = {"per_frame_beliefs": "boss", "five_minds": "tbd"}
NUM_CLASSES = {"boss": 27, "tbd": 4}
TBD_LABELS = ("occur", "disappear", "update", "null")
MINDS = ("m1", "m2", "m12", "m21", "mc")
CLIP_LEN = 5
NUM_OBJECTS = 27  # box slots and OCR nodes
BOX_FIELDS = 5
POSE_JOINTS = 17
POSE_ROOT = 0
# COCO-17 skeleton: nose, eyes, ears, shoulders, elbows, wrists, hips, knees, ankles
POSE_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6), (5, 6), (5, 7), (7, 9),
    (6, 8), (8, 10), (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16),
)
CHECKPOINT_MAGIC = b"MTOM1"
# published parameter totals for concatenation models, and the accepted deviation
REFERENCE_TOTALS = {
    ("Base", "concat", "boss"): 452_374,
    ("IC", "concat", "boss"): 452_630,
    ("CG", "concat", "boss"): 460_886,
    ("Base", "concat", "tbd"): 465_716,
    ("CG", "concat", "tbd"): 474_228,
}
REFERENCE_TOLERANCE = 0.05


def pose_adjacency() -> np.ndarray:
    a = np.zeros((POSE_JOINTS, POSE_JOINTS))
    for i, j in POSE_EDGES:
        a[i, j] = a[j, i] = 1.0
    return a


@dataclass(frozen=True)
class MToMnetConfig:
    variant: str = "Base"
    aggregation: str = "concat"
    tau: float = 2.0
    mode: str = "boss"
    hidden: int = L.HIDDEN
    dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "mode", MODE_ALIASES.get(self.mode, self.mode))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.hidden <= 0 or self.hidden % L.TOKEN_DIM:
            raise ValueError(f"hidden must be a positive multiple of {L.TOKEN_DIM}, got {self.hidden}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES[self.mode]

    @property
    def fused(self) -> bool:
        return self.variant in ("IC", "CG")

    @property
    def state_dim(self) -> int:
        return 2 * self.hidden

    @property
    def head_width(self) -> int:
        """Input width of the classification heads."""
        if not self.fused:
            return self.state_dim
        return self.hidden if self.aggregation in ("sum", "mul") else 2 * self.hidden

    @property
    def gaze_dim(self) -> int:
        return 3 if self.mode == "boss" else 2

    @property
    def pose_dim(self) -> int:
        return 3 if self.mode == "boss" else 2

    def to_manifest(self) -> dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_manifest(cls, manifest: Mapping[str, str]) -> "MToMnetConfig":
        kw = {}
        for f in fields(cls):
            key = f"config.{f.name}"
            if key not in manifest:
                raise container.ValidationError(key, "missing from manifest")
            raw = manifest[key]
            kw[f.name] = float(raw) if f.type == "float" else int(raw) if f.type == "int" else raw
        return cls(**kw)

    def digest(self) -> str:
        text = container.format_manifest(self.to_manifest())
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# inputs and outputs
# --------------------------------------------------------------------------

@dataclass
class Cues:
    """A batch of windows, arrays indexed [B, T, ...]; person axis follows T.

    frames [B,T,3,H,W]; boxes [B,T,27,5]; ocr [B,T,27,27] (boss);
    gaze [B,T,2,g]; pose [B,T,2,17,p]; ego [B,T,2,3,H,W] (tbd).
    """

    frames: np.ndarray
    boxes: np.ndarray
    gaze: np.ndarray
    pose: np.ndarray
    ocr: np.ndarray | None = None
    ego: np.ndarray | None = None

    @property
    def batch(self) -> int:
        return self.frames.shape[0]

    @property
    def steps(self) -> int:
        return self.frames.shape[1]

    def swapped(self) -> "Cues":
        """The same windows with person 1 and person 2 exchanged."""
        flip = lambda a: None if a is None else a[:, :, ::-1].copy()
        return Cues(self.frames, self.boxes, flip(self.gaze), flip(self.pose), self.ocr, flip(self.ego))


@dataclass
class MindNetState:
    H: Tensor  # [B, T, 128]
    c: Tensor  # [B, 128]
    z: Tensor | None = None

    @property
    def h_final(self) -> Tensor:
        return L.final_hidden(self.H)

    @property
    def memory(self) -> Tensor:
        half = self.c.shape[-1] // 2
        return tn.scale(tn.add(self.c[..., :half], self.c[..., half:]), 0.5)


@dataclass
class BeliefOutput:
    """Logits per head: boss ``p1``/``p2`` [B,T,27]; tbd the five minds [B,4]."""

    mode: str
    logits: dict[str, Tensor]
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def probs(self) -> dict[str, np.ndarray]:
        return {k: tn.softmax(v.detach(), axis=-1).data for k, v in self.logits.items()}

    def argmax(self) -> dict[str, np.ndarray]:
        return {k: np.argmax(v.data, axis=-1) for k, v in self.logits.items()}


# --------------------------------------------------------------------------
# modules
# --------------------------------------------------------------------------

def _component_rng(seed: int, index: int) -> np.random.Generator:
    # independent streams, so one component's size never shifts another's init
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


class SharedExtractors(L.Module):
    """Contextual encoders plus the ego-frame CNN, one parameter set each."""

    def __init__(self, cfg: MToMnetConfig, seed: int):
        dt = np.dtype(cfg.dtype)
        self.cnn = L.CnnEncoder(_component_rng(seed, 0), dt)
        self.boxes = L.Linear(NUM_OBJECTS * BOX_FIELDS, cfg.hidden, _component_rng(seed, 1), dt)
        self.ocr = L.GcnEncoder(NUM_OBJECTS, _component_rng(seed, 2), dt, cfg.hidden, cfg.hidden) if cfg.mode == "boss" else None
        self.ego = L.CnnEncoder(_component_rng(seed, 3), dt) if cfg.mode == "tbd" else None

    @property
    def context_cues(self) -> int:
        return 3 if self.ocr is not None else 2


class MindNet(L.Module):
    def __init__(self, cfg: MToMnetConfig, seed: int, index: int):
        dt = np.dtype(cfg.dtype)
        base = 10 + 10 * index
        hid = cfg.hidden
        self.gaze = L.Linear(cfg.gaze_dim, hid, _component_rng(seed, base), dt)
        self.pose = L.GcnEncoder(cfg.pose_dim, _component_rng(seed, base + 1), dt, hid, hid)
        in_dim = hid * 5  # boss: 3 contextual + 2 individual cues; tbd: 2 + 3
        self.ln = L.LayerNorm(in_dim, dt)
        self.lstm = L.BiLstm(in_dim, _component_rng(seed, base + 2), dt, hid)
        n_heads = 1 if cfg.mode == "boss" else 2  # tbd: own belief, belief about the partner
        hrng = _component_rng(seed, base + 3)
        self.heads = [L.Linear(cfg.head_width, cfg.num_classes, hrng, dt) for _ in range(n_heads)]
        self.proj = L.Linear(2 * hid, hid, _component_rng(seed, base + 4), dt) if cfg.fused else None
        self.attn = (L.CrossAttention(hid, _component_rng(seed, base + 5), dt)
                     if cfg.fused and cfg.aggregation == "attention" else None)


class MToMnet(L.Module):
    def __init__(self, cfg: MToMnetConfig, seed: int = 0):
        self.config = cfg
        self.seed = seed
        dt = np.dtype(cfg.dtype)
        self.shared = SharedExtractors(cfg, seed)
        self.minds = [MindNet(cfg, seed, 1), MindNet(cfg, seed, 2)]
        self.cg = L.Linear(2 * cfg.hidden, cfg.hidden, _component_rng(seed, 40), dt) if cfg.variant == "CG" else None
        self.mc_head = L.Linear(cfg.head_width, cfg.num_classes, _component_rng(seed, 41), dt) if cfg.mode == "tbd" else None
        self._pose_a_hat = L.gcn_normalize(pose_adjacency()).astype(dt)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @classmethod
    def tied(cls, cfg: MToMnetConfig, seed: int = 0) -> "MToMnet":
        """Test construction: MindNet 2 is a copy of MindNet 1, and the CG
        weight treats both memories alike, so person swaps are exact."""
        model = cls(cfg, seed)
        for (_, p1), (_, p2) in zip(model.minds[0].named_parameters(), model.minds[1].named_parameters()):
            p2.data = p1.data.copy()
        if model.cg is not None:
            w = model.cg.weight.data
            half = w.shape[1] // 2
            w[:, half:] = w[:, :half]
        return model


# --------------------------------------------------------------------------
# forward pieces
# --------------------------------------------------------------------------

@dataclass
class RunContext:
    training: bool = False
    rng: np.random.Generator | None = None


def _act(x: Tensor, model: MToMnet, ctx: RunContext) -> Tensor:
    return tn.dropout(tn.gelu(x), model.config.dropout, ctx.training, ctx.rng)


def _frames_flat(frames: np.ndarray, dtype) -> tuple[Tensor, tuple[int, ...]]:
    lead = frames.shape[:-3]
    return Tensor(frames.reshape((-1,) + frames.shape[-3:]), dtype=dtype), lead


def _require(cues: Cues, name: str, steps: int, batch: int) -> np.ndarray:
    arr = getattr(cues, name)
    if arr is None:
        raise ValueError(f"missing modality: {name}")
    if arr.shape[:2] != (batch, steps):
        raise ValueError(f"modality {name} covers {arr.shape[:2]} (batch, time), expected {(batch, steps)}")
    return arr


def encode_contextual(model: MToMnet, cues: Cues, ctx: RunContext | None = None) -> Tensor:
    """Per-timestep concatenation of the shared contextual encodings, [B, T, 64k]."""
    ctx = ctx or RunContext()
    sh, dt = model.shared, model.dtype
    b, t = cues.batch, cues.steps
    frames, lead = _frames_flat(cues.frames, dt)
    parts = [tn.reshape(sh.cnn(frames), lead + (-1,))]
    if sh.ocr is not None:
        ocr = _require(cues, "ocr", t, b)
        parts.append(L.gcn_forward(L.gcn_normalize(ocr).astype(dt), Tensor(ocr, dtype=dt), sh.ocr))
    boxes = _require(cues, "boxes", t, b)
    parts.append(sh.boxes(Tensor(boxes.reshape(b, t, -1), dtype=dt)))
    return tn.concat([_act(p, model, ctx) for p in parts], axis=-1)


def encode_individual(model: MToMnet, cues: Cues, index: int, ctx: RunContext | None = None) -> Tensor:
    """Person ``index`` (1 or 2): gaze, pose and (tbd) ego-frame encodings, [B, T, 64k]."""
    if index not in (1, 2):
        raise ValueError(f"mindnet index must be 1 or 2, got {index}")
    ctx = ctx or RunContext()
    mind, dt, p = model.minds[index - 1], model.dtype, index - 1
    b, t = cues.batch, cues.steps
    gaze = _require(cues, "gaze", t, b)[:, :, p]
    pose = _require(cues, "pose", t, b)[:, :, p]
    parts = [mind.gaze(Tensor(gaze, dtype=dt)), L.gcn_forward(model._pose_a_hat, Tensor(pose, dtype=dt), mind.pose)]
    if model.shared.ego is not None:
        ego = _require(cues, "ego", t, b)[:, :, p]
        frames, lead = _frames_flat(ego, dt)
        parts.append(tn.reshape(model.shared.ego(frames), lead + (-1,)))
    return tn.concat([_act(q, model, ctx) for q in parts], axis=-1)


def mindnet_forward(model: MToMnet, x_ctx: Tensor, x_ind: Tensor, index: int) -> MindNetState:
    if x_ctx.shape[:-1] != x_ind.shape[:-1]:
        raise ValueError(f"time axes differ: contextual {x_ctx.shape[:-1]} vs individual {x_ind.shape[:-1]}")
    mind = model.minds[index - 1]
    H, c = L.bilstm_forward(mind.ln(tn.concat([x_ctx, x_ind], axis=-1)), mind.lstm)
    return MindNetState(H, c)


def _summary(model: MToMnet, state: MindNetState) -> Tensor:
    # boss heads read every timestep, tbd heads the whole-window summary
    return state.H if model.config.mode == "boss" else state.h_final


def _heads(model: MToMnet, z1: Tensor, z2: Tensor) -> dict[str, Tensor]:
    m1, m2 = model.minds
    if model.config.mode == "boss":
        return {"p1": m1.heads[0](z1), "p2": m2.heads[0](z2)}
    return {
        "m1": m1.heads[0](z1), "m12": m1.heads[1](z1),
        "m2": m2.heads[0](z2), "m21": m2.heads[1](z2),
        "mc": model.mc_head(tn.mul(z1, z2)),
    }


def base_predict(model: MToMnet, s1: MindNetState, s2: MindNetState) -> BeliefOutput:
    if s1.H.ndim != 3:
        raise ValueError("states must be batched [B, T, 128]")
    return BeliefOutput(model.config.mode, _heads(model, _summary(model, s1), _summary(model, s2)))


def aggregate(model: MToMnet, index: int, p: Tensor, other: Tensor) -> Tensor:
    """``p`` (projected hidden) combined with a memory-space vector per the configured operator."""
    agg = model.config.aggregation
    if other.shape != p.shape:
        other = tn.broadcast_to(tn.reshape(other, other.shape[:1] + (1,) * (p.ndim - 2) + other.shape[-1:]), p.shape)
    if agg == "sum":
        return tn.add(p, other)
    if agg == "mul":
        return tn.mul(p, other)
    if agg == "concat":
        return tn.concat([p, other], axis=-1)
    att = model.minds[index - 1].attn
    if att is None:
        raise ValueError("attention aggregation requested but the model has no attention module")
    return tn.concat([p, att(p, other)], axis=-1)


def _project(model: MToMnet, state: MindNetState, index: int, ctx: RunContext) -> Tensor:
    proj = model.minds[index - 1].proj
    if proj is None:
        raise ValueError("fusion requires an IC or CG model")
    return _act(proj(_summary(model, state)), model, ctx)


def ic_fuse(model: MToMnet, s1: MindNetState, s2: MindNetState, ctx: RunContext | None = None) -> tuple[Tensor, Tensor]:
    """z_i = FC(h_i) aggregated with the partner's memory."""
    ctx = ctx or RunContext()
    z1 = aggregate(model, 1, _project(model, s1, 1, ctx), s2.memory)
    z2 = aggregate(model, 2, _project(model, s2, 2, ctx), s1.memory)
    s1.z, s2.z = z1, z2
    return z1, z2


def common_ground(model: MToMnet, s1: MindNetState, s2: MindNetState, ctx: RunContext | None = None) -> Tensor:
    """GELU(FC(m1 || m2)), evaluated blockwise so tied halves commute exactly."""
    ctx = ctx or RunContext()
    if model.cg is None:
        raise ValueError("common ground requires a CG model")
    w = model.cg.weight
    half = w.shape[1] // 2
    mixed = tn.add(tn.linear(s1.memory, w[:, :half]), tn.linear(s2.memory, w[:, half:]))
    pre = tn.add(mixed, tn.broadcast_to(model.cg.bias, mixed.shape))
    return _act(pre, model, ctx)


def cg_fuse(model: MToMnet, s1: MindNetState, s2: MindNetState, ctx: RunContext | None = None):
    ctx = ctx or RunContext()
    cg = common_ground(model, s1, s2, ctx)
    z1 = aggregate(model, 1, _project(model, s1, 1, ctx), cg)
    z2 = aggregate(model, 2, _project(model, s2, 2, ctx), cg)
    s1.z, s2.z = z1, z2
    return z1, z2, cg


def db_rerank(p1, p2, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Labels ``argmax(P1^tau * P2)`` and ``argmax(P2^tau * P1)`` over the last axis.

    Evaluated as ``tau log P_self + log P_other``; ties go to the lowest index.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    with np.errstate(divide="ignore"):
        l1 = np.log(np.asarray(p1, dtype=np.float64))
        l2 = np.log(np.asarray(p2, dtype=np.float64))
    return np.argmax(tau * l1 + l2, axis=-1), np.argmax(tau * l2 + l1, axis=-1)


def db_labels(out: BeliefOutput, tau: float) -> dict[str, np.ndarray]:
    probs = out.probs()
    if out.mode == "boss":
        a, b = db_rerank(probs["p1"], probs["p2"], tau)
        return {"p1": a, "p2": b}
    m1, m2 = db_rerank(probs["m1"], probs["m2"], tau)
    m12, m21 = db_rerank(probs["m12"], probs["m21"], tau)
    return {"m1": m1, "m2": m2, "m12": m12, "m21": m21, "mc": np.argmax(probs["mc"], axis=-1)}


@dataclass
class ForwardTrace:
    """Intermediate states kept for analysis."""

    s1: MindNetState
    s2: MindNetState
    cg: Tensor | None = None


def forward(model: MToMnet, cues: Cues, training: bool = False, rng: np.random.Generator | None = None,
            trace: bool = False):
    """Full pipeline on a batch of windows.  Returns a BeliefOutput (and a
    ForwardTrace when ``trace``).  Labels follow the variant's decision rule."""
    cfg = model.config
    if cfg.mode == "tbd" and cues.steps != CLIP_LEN:
        raise ValueError(f"tbd windows must have {CLIP_LEN} frames, got {cues.steps}")
    if cues.steps < 1:
        raise ValueError("empty window")
    if training and cfg.dropout > 0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")
    ctx = RunContext(training, rng)
    x_ctx = encode_contextual(model, cues, ctx)
    s1 = mindnet_forward(model, x_ctx, encode_individual(model, cues, 1, ctx), 1)
    s2 = mindnet_forward(model, x_ctx, encode_individual(model, cues, 2, ctx), 2)
    cg = None
    if cfg.variant == "IC":
        z1, z2 = ic_fuse(model, s1, s2, ctx)
        out = BeliefOutput(cfg.mode, _heads(model, z1, z2))
    elif cfg.variant == "CG":
        z1, z2, cg = cg_fuse(model, s1, s2, ctx)
        out = BeliefOutput(cfg.mode, _heads(model, z1, z2))
    else:
        out = base_predict(model, s1, s2)
    out.labels = db_labels(out, cfg.tau) if cfg.variant == "DB" else out.argmax()
    return (out, ForwardTrace(s1, s2, cg)) if trace else out


# --------------------------------------------------------------------------
# parameter accounting and checkpoints
# --------------------------------------------------------------------------

def _group(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "shared":
        return "individual extractors" if parts[1] == "ego" else "contextual extractors"
    if parts[0] == "minds":
        return {
            "gaze": "individual extractors", "pose": "individual extractors",
            "ln": "layer norm", "lstm": "lstm", "heads": "heads",
            "proj": "fusion", "attn": "attention",
        }[parts[2]]
    return {"cg": "fusion", "mc_head": "heads"}[parts[0]]


def count_parameters(model: MToMnet) -> tuple[int, dict[str, int]]:
    """Total trainable parameters and a per-component breakdown."""
    breakdown: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = _group(name)
        breakdown[key] = breakdown.get(key, 0) + p.size
    return sum(breakdown.values()), breakdown


def state_dict(model: MToMnet) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def load_state_dict(model: MToMnet, arrays: Mapping[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing:
        raise container.ValidationError(missing[0], "parameter missing from checkpoint")
    if extra:
        raise container.ValidationError(extra[0], "checkpoint holds an unknown parameter")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise container.ValidationError(name, f"shape {arrays[name].shape} does not match model {p.shape}")
        p.data = np.array(arrays[name], dtype=p.dtype)


def save_checkpoint(model: MToMnet, path, meta: Mapping[str, object] | None = None) -> None:
    if model.dtype != np.float32:
        raise ValueError("checkpoints store float32 parameters; build the model with dtype=float32")
    manifest = {"format": "mtomnet-checkpoint", **model.config.to_manifest(), "seed": model.seed,
                "config_hash": model.config.digest()}
    manifest.update({f"meta.{k}": v for k, v in (meta or {}).items()})
    container.write(path, CHECKPOINT_MAGIC, manifest, state_dict(model))


def load_checkpoint(path) -> tuple[MToMnet, dict[str, str]]:
    """Rebuild the model from a checkpoint; returns (model, manifest)."""
    manifest, arrays = container.read(path, CHECKPOINT_MAGIC)
    cfg = MToMnetConfig.from_manifest(manifest)
    if manifest.get("config_hash") != cfg.digest():
        raise container.ValidationError("config_hash", "does not match the stored config")
    try:
        seed = int(manifest["seed"])
    except (KeyError, ValueError) as exc:
        raise container.ValidationError("seed", "missing or not an integer") from exc
    model = MToMnet(cfg, seed)
    load_state_dict(model, arrays)
    return model, manifest
