"""Loss, Adam, the deterministic epoch loop and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .analyze import MetricReport, boss_report, tbd_report
from .data import Corpus, Episode, Window, batches, collate, episode_windows
from .model import MINDS, MToMnet, forward, save_checkpoint
from .tensor import NonFiniteError, Tape, Tensor

DEFAULT_BATCH = {"boss": 4, "tbd": 64}
EVAL_BATCH = 64
LOG_NAME = "train.log"
CHECKPOINT_NAME = "best.ckpt"

# stream ids under the run seed, kept apart from the model's init streams
_SHUFFLE_STREAM, _DROPOUT_STREAM = 100, 101


class TrainingDiverged(NonFiniteError):
    """A loss or activation went non-finite; carries the epoch and batch."""

    def __init__(self, epoch: int, batch: int, keys, cause: str):
        self.epoch, self.batch, self.keys = epoch, batch, keys
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch} ({cause}); windows {keys}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int | None = None  # None picks the per-mode default
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 1

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def batch_for(self, mode: str) -> int:
        return self.batch_size or DEFAULT_BATCH[mode]


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log_softmax(logits)[target] over every leading position."""
    y = np.asarray(targets)
    k = logits.shape[-1]
    if y.shape != logits.shape[:-1]:
        raise ValueError(f"targets {y.shape} do not match logits {logits.shape[:-1]}")
    if y.size == 0:
        raise ValueError("cross-entropy of an empty batch")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k:
        raise ValueError(f"targets must be integer classes in [0, {k})")
    z = logits.data.reshape(-1, k).astype(np.float64)
    flat = y.reshape(-1)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    n = flat.size
    loss = float(np.mean(logz - z[np.arange(n), flat]))

    def rule(g):
        p = np.exp(z - logz[:, None])
        p[np.arange(n), flat] -= 1.0
        return ((g * p / n).reshape(logits.shape).astype(logits.dtype),)

    return tn.custom_op(np.asarray(loss, dtype=logits.dtype), (logits,), rule, "cross_entropy")


def model_loss(logits: dict[str, Tensor], labels: np.ndarray, mode: str) -> Tensor:
    """Unweighted sum over heads: both persons (boss, averaged over frames)
    or the five minds (tbd)."""
    if mode == "boss":
        terms = [cross_entropy(logits[f"p{i + 1}"], labels[..., i]) for i in range(2)]
    else:
        terms = [cross_entropy(logits[m], labels[:, j]) for j, m in enumerate(MINDS)]
    total = terms[0]
    for t in terms[1:]:
        total = tn.add(total, t)
    return total


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              config: TrainConfig) -> None:
    """Bias-corrected Adam update in place.  A ``None`` gradient counts as zero."""
    if not len(params) == len(grads) == len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = 0.0
        elif g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if state.m[i].shape != p.shape:
            raise ValueError(f"optimizer state {i} has shape {state.m[i].shape}, parameter has {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = config.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + config.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _eval_batches(windows: Sequence[Window]):
    # boss episodes may differ in length; batch windows of equal length together
    by_len: dict[int, list[Window]] = {}
    for w in windows:
        by_len.setdefault(w.cues["frames"].shape[0], []).append(w)
    for length in sorted(by_len):
        group = by_len[length]
        for i in range(0, len(group), EVAL_BATCH):
            yield collate(group[i:i + EVAL_BATCH])


def predict(model: MToMnet, episodes: Sequence[Episode]):
    """Eval-mode labels and truths.  boss: [frames, 2]; tbd: [clips, 5],
    plus false-belief flags for tbd."""
    mode = model.config.mode
    for ep in episodes:
        if ep.mode != mode:
            raise ModeMismatch(f"model is {mode} but episode {ep.id} is {ep.mode}")
    windows = [w for ep in episodes for w in episode_windows(ep)]
    if not windows:
        raise ValueError("empty split")
    preds, truths, flags = [], [], []
    for b in _eval_batches(windows):
        out = forward(model, b.cues)
        if mode == "boss":
            preds.append(np.stack([out.labels["p1"], out.labels["p2"]], -1).reshape(-1, 2))
            truths.append(b.labels.reshape(-1, 2))
        else:
            preds.append(np.stack([out.labels[m] for m in MINDS], -1))
            truths.append(b.labels)
            flags.append(b.false_belief)
    flags_arr = np.concatenate(flags) if flags else None
    return np.concatenate(preds), np.concatenate(truths), flags_arr


class ModeMismatch(ValueError):
    pass


def evaluate(model: MToMnet, episodes: Sequence[Episode]) -> MetricReport:
    preds, truths, _ = predict(model, episodes)
    return boss_report(preds, truths) if model.config.mode == "boss" else tbd_report(preds, truths)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float

    def line(self) -> str:
        return f"{self.epoch},{self.train_loss!r},{self.val_metric!r}\n"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -math.inf
    best_state: dict[str, np.ndarray] | None = None

    @property
    def best_metric_logged(self) -> float:
        return max(r.val_metric for r in self.history)


def _stream(seed: int, idx: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, idx])))


def read_log(path) -> list[EpochRecord]:
    records = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split(",")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected epoch,train_loss,val_metric")
        records.append(EpochRecord(int(parts[0]), float(parts[1]), float(parts[2])))
    return records


def train(model: MToMnet, train_eps: Sequence[Episode], val_eps: Sequence[Episode], config: TrainConfig,
          out_dir=None, on_epoch: Callable[[MToMnet, EpochRecord], bool] | None = None) -> TrainResult:
    """Run the epoch loop.  With ``out_dir`` the log is appended per epoch and
    the best checkpoint is rewritten on every strict val improvement.
    ``on_epoch`` may return True to end the run early (test harnesses)."""
    mode = model.config.mode
    if not train_eps:
        raise ValueError("empty split: train")
    if not val_eps:
        raise ValueError("empty split: val")
    for ep in (*train_eps, *val_eps):
        if ep.mode != mode:
            raise ModeMismatch(f"model is {mode} but episode {ep.id} is {ep.mode}")
    windows = [w for ep in train_eps for w in episode_windows(ep)]
    if mode == "boss" and len({w.cues["frames"].shape[0] for w in windows}) > 1:
        raise ValueError("boss training episodes must share one length")
    batch_size = config.batch_for(mode)
    shuffle_rng, dropout_rng = _stream(config.seed, _SHUFFLE_STREAM), _stream(config.seed, _DROPOUT_STREAM)
    params = model.parameters()
    state = AdamState.for_params(params)
    log_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path, ckpt_path = out_dir / LOG_NAME, out_dir / CHECKPOINT_NAME
        log_path.write_text("")
    result = TrainResult()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for bi, b in enumerate(batches(windows, batch_size, shuffle_rng)):
            try:
                with Tape() as tape:
                    out = forward(model, b.cues, training=True, rng=dropout_rng)
                    loss = model_loss(out.logits, b.labels, mode)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError("loss")
                tape.backward(loss)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, bi, b.keys, str(exc)) from exc
            adam_step(params, [p.grad for p in params], state, config)
            model.zero_grad()
            total += value
            count += 1
        report = evaluate(model, val_eps)
        rec = EpochRecord(epoch, total / count, float(report.selection_metric))
        result.history.append(rec)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(rec.line())
        if rec.val_metric > result.best_metric:
            result.best_epoch, result.best_metric = epoch, rec.val_metric
            result.best_state = {k: v.copy() for k, v in _named_data(model).items()}
            if ckpt_path is not None:
                save_checkpoint(model, ckpt_path, {
                    "epoch": epoch, "metric": repr(rec.val_metric), "train_seed": config.seed,
                    **{f"train.{k}": getattr(config, k) for k in TrainConfig.keys()},
                })
        if on_epoch is not None and on_epoch(model, rec):
            break
    return result


def _named_data(model: MToMnet) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters()}


def train_corpus(model: MToMnet, corpus: Corpus, config: TrainConfig, out_dir=None, **kw) -> TrainResult:
    return train(model, corpus.episodes(corpus.split("train")), corpus.episodes(corpus.split("val")),
                 config, out_dir, **kw)
