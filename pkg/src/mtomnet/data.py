"""Episode schema, the MTEP1 episode file, feature normalisation, clipping,
corpus manifests/splits and batching."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import container
from .container import ValidationError
from .layers import MIN_FRAME
from .model import BOX_FIELDS, CLIP_LEN, MINDS, NUM_CLASSES, NUM_OBJECTS, POSE_JOINTS, POSE_ROOT, Cues

EPISODE_MAGIC = b"MTEP1"
MANIFEST_NAME = "manifest.txt"
SPLITS = ("train", "val", "test")
_ARRAYS = ("frames", "boxes", "gaze", "pose", "ocr", "ego", "labels", "false_belief")


@dataclass
class Episode:
    """One recorded interaction.

    Per-frame arrays share the leading T axis; individual cues carry a
    person axis of length 2 after T.  ``labels`` is [T, 2] (boss, object
    class per person) or [T // 5, 5] (tbd, one row per clip in mind order
    m1, m2, m12, m21, mc).  ``extras`` holds int32 bookkeeping arrays such
    as the synthetic event log.
    """

    id: str
    mode: str
    frames: np.ndarray  # [T, 3, H, W]
    boxes: np.ndarray  # [T, 27, 5]
    gaze: np.ndarray  # [T, 2, g]
    pose: np.ndarray  # [T, 2, 17, p]
    labels: np.ndarray
    ocr: np.ndarray | None = None  # [T, 27, 27], boss
    ego: np.ndarray | None = None  # [T, 2, 3, H, W], tbd
    false_belief: np.ndarray | None = None  # [T // 5, 5], tbd
    normalized: bool = False
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.frames.shape[0]

    @property
    def num_clips(self) -> int:
        return self.steps // CLIP_LEN


def _fail(name: str, msg: str):
    raise ValidationError(name, msg)


def validate(ep: Episode) -> Episode:
    """Check every Episode invariant; raises ValidationError naming the field."""
    if ep.mode not in NUM_CLASSES:
        _fail("mode", f"must be boss or tbd, got {ep.mode!r}")
    if not ep.id or any(c in ep.id for c in "\n/\\="):
        _fail("id", f"invalid episode id {ep.id!r}")
    if ep.frames.ndim != 4 or ep.frames.shape[1] != 3:
        _fail("frames", f"expected [T, 3, H, W], got {ep.frames.shape}")
    steps, _, h, w = ep.frames.shape
    if steps < 1:
        _fail("frames", "episode has no frames")
    if h < MIN_FRAME or w < MIN_FRAME:
        _fail("frames", f"frame {h}x{w} is below the {MIN_FRAME}x{MIN_FRAME} minimum")
    dim = 3 if ep.mode == "boss" else 2
    expect = {
        "frames": (steps, 3, h, w),
        "boxes": (steps, NUM_OBJECTS, BOX_FIELDS),
        "gaze": (steps, 2, dim),
        "pose": (steps, 2, POSE_JOINTS, dim),
    }
    if ep.mode == "boss":
        expect["ocr"] = (steps, NUM_OBJECTS, NUM_OBJECTS)
        expect["labels"] = (steps, 2)
    else:
        expect["ego"] = (steps, 2, 3, h, w)
        expect["labels"] = (steps // CLIP_LEN, len(MINDS))
        expect["false_belief"] = expect["labels"]
    for name in _ARRAYS:
        arr = getattr(ep, name)
        if name not in expect:
            if arr is not None:
                _fail(name, f"not used in {ep.mode} mode")
            continue
        if arr is None:
            _fail(name, f"required in {ep.mode} mode")
        if arr.shape != expect[name]:
            _fail(name, f"shape {arr.shape} disagrees with expected {expect[name]}")
        if np.issubdtype(arr.dtype, np.floating) and not np.isfinite(arr).all():
            _fail(name, "contains non-finite values")
    k = NUM_CLASSES[ep.mode]
    if not np.issubdtype(ep.labels.dtype, np.integer):
        _fail("labels", "must be integer class ids")
    if ep.labels.size and (ep.labels.min() < 0 or ep.labels.max() >= k):
        _fail("labels", f"class ids must lie in [0, {k})")
    if ep.false_belief is not None and not np.isin(ep.false_belief, (0, 1)).all():
        _fail("false_belief", "flags must be 0 or 1")
    if (ep.boxes[..., 4] == 0).any() and ep.boxes[ep.boxes[..., 4] == 0].any():
        _fail("boxes", "absent slots must be all-zero")
    if ep.ocr is not None and (ep.ocr < 0).any():
        _fail("ocr", "must be non-negative")
    return ep


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def _episode_arrays(ep: Episode) -> dict[str, np.ndarray]:
    arrays = {}
    for name in _ARRAYS:
        arr = getattr(ep, name)
        if arr is not None:
            arrays[name] = arr.astype(np.int32) if name in ("labels", "false_belief") else arr.astype(np.float32)
    for name, arr in ep.extras.items():
        arrays[f"extra.{name}"] = np.asarray(arr, dtype=np.int32)
    return arrays


def save_episode(ep: Episode, path) -> None:
    validate(ep)
    manifest = {
        "id": ep.id,
        "mode": ep.mode,
        "T": ep.steps,
        "frame_h": ep.frames.shape[2],
        "frame_w": ep.frames.shape[3],
        "normalized": int(ep.normalized),
    }
    container.write(path, EPISODE_MAGIC, manifest, _episode_arrays(ep))


def load_episode(path) -> Episode:
    manifest, arrays = container.read(path, EPISODE_MAGIC)
    for key in ("id", "mode", "T", "frame_h", "frame_w", "normalized"):
        if key not in manifest:
            _fail(key, "missing from manifest")
    try:
        steps, fh, fw = int(manifest["T"]), int(manifest["frame_h"]), int(manifest["frame_w"])
    except ValueError as exc:
        raise ValidationError("T", f"manifest dimensions are not integers: {exc}") from exc
    known = {n: arrays.pop(n) for n in _ARRAYS if n in arrays}
    extras = {n[len("extra."):]: arrays.pop(n) for n in list(arrays) if n.startswith("extra.")}
    if arrays:
        _fail(sorted(arrays)[0], "unknown array in episode file")
    for name in ("frames", "boxes", "gaze", "pose", "labels"):
        if name not in known:
            _fail(name, "array missing from episode file")
    for name, arr in known.items():
        if name in ("labels", "false_belief"):
            continue
        if arr.shape[0] != steps:
            _fail(name, f"has {arr.shape[0]} frames but manifest T = {steps}")
    if known["frames"].shape[2:] != (fh, fw):
        _fail("frames", f"extent {known['frames'].shape[2:]} disagrees with manifest {(fh, fw)}")
    ep = Episode(
        id=manifest["id"], mode=manifest["mode"], normalized=manifest["normalized"] == "1",
        extras=extras, **known,
    )
    return validate(ep)


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def normalize_features(ep: Episode) -> Episode:
    """Frames to [0, 1]; boxes to frame-relative coordinates; unit gaze;
    pose centred on the root joint and scaled by skeleton height.

    Raw frames are 0..255 intensities and boxes pixel coordinates.  The
    result carries ``normalized=True`` and is returned unchanged by later
    calls.
    """
    if ep.normalized:
        return ep
    _, _, h, w = ep.frames.shape
    if h == 0 or w == 0:
        raise ValueError("zero-extent frames")
    boxes = ep.boxes.astype(np.float32).copy()
    boxes[..., 0:4:2] /= w
    boxes[..., 1:4:2] /= h
    gaze = ep.gaze.astype(np.float64)
    norm = np.linalg.norm(gaze, axis=-1, keepdims=True)
    gaze = np.divide(gaze, norm, out=np.zeros_like(gaze), where=norm > 0)
    pose = ep.pose.astype(np.float64)
    pose = pose - pose[..., POSE_ROOT:POSE_ROOT + 1, :]
    height = pose[..., 1].max(axis=-1) - pose[..., 1].min(axis=-1)
    height = np.where(height > 0, height, 1.0)[..., None, None]
    return replace(
        ep,
        frames=(ep.frames / np.float32(255)).astype(np.float32),
        ego=None if ep.ego is None else (ep.ego / np.float32(255)).astype(np.float32),
        boxes=boxes,
        gaze=gaze.astype(np.float32),
        pose=(pose / height).astype(np.float32),
        normalized=True,
    )


# --------------------------------------------------------------------------
# windows
# --------------------------------------------------------------------------

@dataclass
class Window:
    """A contiguous slice of an episode plus its aligned targets."""

    episode: str
    start: int
    cues: dict[str, np.ndarray]
    labels: np.ndarray  # boss [t, 2]; tbd [5]
    false_belief: np.ndarray | None = None  # tbd [5]


def _slice(ep: Episode, start: int, stop: int) -> dict[str, np.ndarray]:
    out = {}
    for name in ("frames", "boxes", "gaze", "pose", "ocr", "ego"):
        arr = getattr(ep, name)
        if arr is not None:
            out[name] = arr[start:stop]
    return out


def make_clips(ep: Episode) -> list[Window]:
    """Non-overlapping five-frame windows of a tbd episode; a trailing
    remainder is dropped with a warning."""
    if ep.mode != "tbd":
        raise ValueError(f"make_clips needs a tbd episode, got {ep.mode}")
    if ep.steps < CLIP_LEN:
        raise ValueError(f"episode {ep.id} has {ep.steps} frames, fewer than one {CLIP_LEN}-frame clip")
    if ep.steps % CLIP_LEN:
        warnings.warn(f"episode {ep.id}: dropping {ep.steps % CLIP_LEN} trailing frames", stacklevel=2)
    return [
        Window(ep.id, k * CLIP_LEN, _slice(ep, k * CLIP_LEN, (k + 1) * CLIP_LEN), ep.labels[k], ep.false_belief[k])
        for k in range(ep.num_clips)
    ]


def episode_windows(ep: Episode) -> list[Window]:
    """Training samples: the whole episode (boss) or its clips (tbd)."""
    if ep.mode == "boss":
        return [Window(ep.id, 0, _slice(ep, 0, ep.steps), ep.labels)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return make_clips(ep)


@dataclass
class Batch:
    cues: Cues
    labels: np.ndarray  # boss [B, T, 2]; tbd [B, 5]
    false_belief: np.ndarray | None
    keys: list[tuple[str, int]]


def collate(windows: Sequence[Window]) -> Batch:
    if not windows:
        raise ValueError("empty batch")
    lengths = {w.cues["frames"].shape[0] for w in windows}
    if len(lengths) != 1:
        raise ValueError(f"batch windows differ in length: {sorted(lengths)}")
    stack = lambda name: None if name not in windows[0].cues else np.stack([w.cues[name] for w in windows])
    cues = Cues(frames=stack("frames"), boxes=stack("boxes"), gaze=stack("gaze"), pose=stack("pose"),
                ocr=stack("ocr"), ego=stack("ego"))
    fb = None if windows[0].false_belief is None else np.stack([w.false_belief for w in windows])
    return Batch(cues, np.stack([w.labels for w in windows]), fb, [(w.episode, w.start) for w in windows])


def batches(windows: Sequence[Window], size: int, rng: np.random.Generator | None = None) -> Iterable[Batch]:
    """Consecutive batches, optionally in a seeded shuffled order."""
    if size <= 0:
        raise ValueError("batch size must be positive")
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    for i in range(0, len(order), size):
        yield collate([windows[j] for j in order[i:i + size]])


# --------------------------------------------------------------------------
# corpus
# --------------------------------------------------------------------------

def write_path_list(path, entries: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{e}\n" for e in entries))


def read_path_list(path) -> list[str]:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    return [ln for ln in lines if ln and not ln.startswith("#")]


def default_splits(ids: Sequence[str], rng: np.random.Generator) -> dict[str, list[str]]:
    """Seeded 75 / 12.5 / 12.5 split; val and test get at least one entry
    each once there are three or more episodes."""
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_val = n_test = max(1, round(n * 0.125)) if n >= 3 else 0
    n_train = n - n_val - n_test
    return {
        "train": sorted(order[:n_train]),
        "val": sorted(order[n_train:n_train + n_val]),
        "test": sorted(order[n_train + n_val:]),
    }


@dataclass
class Corpus:
    root: Path
    entries: list[str]  # episode paths relative to root
    _cache: dict[str, Episode] = field(default_factory=dict, repr=False)

    def load(self, entry: str) -> Episode:
        if entry not in self._cache:
            self._cache[entry] = normalize_features(load_episode(self.root / entry))
        return self._cache[entry]

    def episodes(self, entries: Sequence[str] | None = None) -> list[Episode]:
        return [self.load(e) for e in (self.entries if entries is None else entries)]

    def mode(self) -> str:
        if not self.entries:
            raise ValueError(f"corpus {self.root} is empty")
        return self.load(self.entries[0]).mode

    def split(self, name_or_path) -> list[str]:
        """Entries of a named split (train/val/test) or of a split file."""
        path = Path(name_or_path)
        if str(name_or_path) in SPLITS:
            path = self.root / "splits" / f"{name_or_path}.txt"
        entries = read_path_list(path)
        unknown = sorted(set(entries) - set(self.entries))
        if unknown:
            raise ValidationError(str(path), f"lists {unknown[0]!r}, which is not in the corpus manifest")
        return entries


def write_corpus(root, episodes: Sequence[Episode], split_rng: np.random.Generator) -> Corpus:
    root = Path(root)
    (root / "episodes").mkdir(parents=True, exist_ok=True)
    (root / "splits").mkdir(exist_ok=True)
    entries = []
    for ep in episodes:
        entry = f"episodes/{ep.id}.mtep"
        save_episode(ep, root / entry)
        entries.append(entry)
    write_path_list(root / MANIFEST_NAME, entries)
    for name, members in default_splits(entries, split_rng).items():
        write_path_list(root / "splits" / f"{name}.txt", members)
    return Corpus(root, entries)


def load_corpus(root) -> Corpus:
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    entries = read_path_list(manifest)
    if len(set(entries)) != len(entries):
        raise ValidationError(str(manifest), "lists an episode twice")
    return Corpus(root, entries)


def check_splits(splits: dict[str, Sequence[str]], entries: Sequence[str]) -> None:
    """Splits must be disjoint and together cover the corpus."""
    seen: dict[str, str] = {}
    for name, members in splits.items():
        for m in members:
            if m in seen:
                raise ValidationError(name, f"{m!r} also appears in split {seen[m]!r}")
            seen[m] = name
    missing = sorted(set(entries) - set(seen))
    if missing:
        raise ValidationError("splits", f"{missing[0]!r} is in no split")
