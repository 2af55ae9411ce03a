"""Rule-driven synthetic episodes.

A 4x4 grid: the top three rows hold objects, the bottom row holds the two
agents' seats (columns 0 and 3) and the door (columns 1 and 2, where a
hidden agent stands).  Objects are coloured blobs, one colour per class;
agents are drawn as outlines, white when present and grey when hidden.

tbd worlds track one selected object whose cell (or absence, -1) is the
content of every mind.  Events happen only on frame 2 of a clip and agents
may only come and go on frame 1, so each clip holds at most one change.

Visibility rules
    agent i sees an event     it is in the room (present or hidden) and
                              attends the cell where the change shows
    j is visible to i         i is in the room and j is present (not hidden)
    m_i  <- world             if i sees the event
    m_ij <- world             if i and j see it and j is visible to i
    m_c  <- world             if both see it and both are present

A clip's label compares a mind's content at the clip's start and end;
its false-belief flag is set when the content at the end differs from
the world.

boss worlds: agent 1 intends a target object that task events change;
agent 2's belief follows agent 1's attended object whenever their
attention is joint.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .data import Episode
from .layers import MIN_FRAME
from .model import CLIP_LEN, NUM_OBJECTS, POSE_JOINTS

GRID = 4
OBJECT_CELLS = GRID * (GRID - 1)
SEAT = {0: (GRID - 1, 0), 1: (GRID - 1, GRID - 1)}
DOOR = {0: (GRID - 1, 1), 1: (GRID - 1, 2)}
BACKGROUND = 64.0
ABSENT, PRESENT, HIDDEN = 0, 1, 2
APPEAR, MOVE, REMOVE, TARGET = 0, 1, 2, 3
OCCUR, DISAPPEAR, UPDATE, NULL = 0, 1, 2, 3
# unit-height stick figure, y pointing down, root (nose) at the origin
POSE_TEMPLATE = np.array([
    (0.0, 0.0), (-0.05, -0.03), (0.05, -0.03), (-0.1, 0.0), (0.1, 0.0),
    (-0.2, 0.2), (0.2, 0.2), (-0.3, 0.45), (0.3, 0.45), (-0.35, 0.65), (0.35, 0.65),
    (-0.15, 0.6), (0.15, 0.6), (-0.15, 0.8), (0.15, 0.8), (-0.15, 1.0), (0.15, 1.0),
])
RIGHT_SHOULDER, RIGHT_WRIST = 6, 10
INITIALLY_ABSENT = 0.3  # chance a tbd world starts without its object


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 1
    episode_count: int = 16
    mode: str = "boss"
    steps: int = 20
    frame_size: int = 32
    object_count: int = 6
    move_rate: float = 0.5
    leave_rate: float = 0.2
    attend_rate: float = 0.8
    joint_attend_rate: float = 0.5
    false_belief_rate: float = 0.2
    gaze_noise: float = 0.05

    RATES = ("move_rate", "leave_rate", "attend_rate", "joint_attend_rate", "false_belief_rate")

    def __post_init__(self):
        for name in self.RATES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.mode not in ("boss", "tbd"):
            raise ValueError(f"mode must be boss or tbd, got {self.mode!r}")
        if not 1 <= self.object_count <= OBJECT_CELLS:
            raise ValueError(f"object_count must lie in [1, {OBJECT_CELLS}], got {self.object_count}")
        if self.frame_size < MIN_FRAME:
            raise ValueError(f"frame_size must be at least {MIN_FRAME}, got {self.frame_size}")
        if self.episode_count < 1:
            raise ValueError(f"episode_count must be positive, got {self.episode_count}")
        if self.steps < (CLIP_LEN if self.mode == "tbd" else 1):
            raise ValueError(f"steps too small for {self.mode} mode: {self.steps}")
        if self.gaze_noise < 0:
            raise ValueError(f"gaze_noise must be non-negative, got {self.gaze_noise}")

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def class_color(k: int) -> np.ndarray:
    """27 distinct RGB colours from three intensity levels per channel."""
    levels = (0.0, 128.0, 255.0)
    return np.array([levels[k // 9], levels[(k // 3) % 3], levels[k % 3]], dtype=np.float32)


def _cell_box(cell: tuple[int, int], size: int) -> tuple[int, int, int, int]:
    cs = size // GRID
    r, c = cell
    return c * cs, r * cs, (c + 1) * cs, (r + 1) * cs


def _cell_of(index: int) -> tuple[int, int]:
    return divmod(index, GRID)


def _centre(cell: tuple[int, int], size: int) -> np.ndarray:
    x1, y1, x2, y2 = _cell_box(cell, size)
    return np.array([(x1 + x2) / 2, (y1 + y2) / 2])


class _Canvas:
    def __init__(self, size: int):
        self.size = size

    def render(self, objects: dict[int, int], agents: dict[int, int]) -> np.ndarray:
        """objects: class -> object cell index; agents: person -> presence."""
        img = np.full((3, self.size, self.size), BACKGROUND, dtype=np.float32)
        for k, idx in objects.items():
            x1, y1, x2, y2 = _cell_box(_cell_of(idx), self.size)
            img[:, y1 + 1:y2 - 1, x1 + 1:x2 - 1] = class_color(k)[:, None, None]
        for person, state in agents.items():
            if state == ABSENT:
                continue
            cell = SEAT[person] if state == PRESENT else DOOR[person]
            x1, y1, x2, y2 = _cell_box(cell, self.size)
            shade = 255.0 if state == PRESENT else 160.0
            img[:, y1, x1:x2] = img[:, y2 - 1, x1:x2] = shade
            img[:, y1:y2, x1] = img[:, y1:y2, x2 - 1] = shade
        return img

    def boxes(self, objects: dict[int, int]) -> np.ndarray:
        out = np.zeros((NUM_OBJECTS, 5), dtype=np.float32)
        for k, idx in objects.items():
            out[k] = (*_cell_box(_cell_of(idx), self.size), 1.0)
        return out


def _agent_cues(rng, cfg: SyntheticConfig, person: int, state: int, attended: int, dim: int):
    """Raw gaze (unit direction plus noise) and pose (pixel coordinates)."""
    if state == ABSENT:
        return np.zeros(dim, np.float32), np.zeros((POSE_JOINTS, dim), np.float32)
    size = cfg.frame_size
    cs = size // GRID
    origin = _centre(SEAT[person] if state == PRESENT else DOOR[person], size)
    d2 = _centre(_cell_of(attended), size) - origin
    d = np.append(d2, -cs) if dim == 3 else d2
    d = d / np.linalg.norm(d)
    gaze = d + rng.normal(0.0, cfg.gaze_noise, size=dim)
    unit2 = d2 / np.linalg.norm(d2)
    theta = 0.5 * np.arctan2(unit2[0], -unit2[1])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    joints = POSE_TEMPLATE @ rot.T
    joints[RIGHT_WRIST] = joints[RIGHT_SHOULDER] + 0.5 * unit2  # pointing arm
    joints = joints * cs + origin - np.array([0.0, 0.3 * cs]) + rng.normal(0.0, 0.01 * cs, size=joints.shape)
    if dim == 3:
        depth = np.sin(theta) * POSE_TEMPLATE[:, :1] * cs
        joints = np.concatenate([joints, depth], axis=1)
    return gaze.astype(np.float32), joints.astype(np.float32)


def _ego_view(frame: np.ndarray, state: int, attended: int, size: int) -> np.ndarray:
    """What an agent sees: the 3x3-cell neighbourhood of its attended cell."""
    if state == ABSENT:
        return np.zeros_like(frame)
    r, c = _cell_of(attended)
    cs = size // GRID
    mask = np.zeros((size, size), dtype=bool)
    mask[max(r - 1, 0) * cs:min(r + 2, GRID) * cs, max(c - 1, 0) * cs:min(c + 2, GRID) * cs] = True
    return np.where(mask, frame, 0.0).astype(np.float32)


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


# --------------------------------------------------------------------------
# clip labels
# --------------------------------------------------------------------------

def transition_label(before: int, after: int) -> int:
    if before == after:
        return NULL
    if before < 0:
        return OCCUR
    if after < 0:
        return DISAPPEAR
    return UPDATE


# --------------------------------------------------------------------------
# tbd
# --------------------------------------------------------------------------

def _random_other(rng, exclude: set[int]) -> int:
    options = [i for i in range(OBJECT_CELLS) if i not in exclude]
    return int(rng.choice(options))


def _tbd_episode(cfg: SyntheticConfig, index: int, initially_absent: float = INITIALLY_ABSENT) -> Episode:
    rng = _rng(cfg.seed, index)
    size, steps = cfg.frame_size, cfg.steps
    canvas = _Canvas(size)
    classes = rng.choice(NUM_OBJECTS, size=cfg.object_count, replace=False)
    selected, distractors = int(classes[0]), [int(k) for k in classes[1:]]
    cells = rng.choice(OBJECT_CELLS, size=cfg.object_count, replace=False)
    fixed = {k: int(c) for k, c in zip(distractors, cells[1:])}
    free = [i for i in range(OBJECT_CELLS) if i not in fixed.values()]
    world = int(cells[0]) if rng.random() >= initially_absent else -1
    world_init = world
    presence = [PRESENT, PRESENT]
    minds = {m: world for m in ("m1", "m2", "m12", "m21", "mc")}

    frames = np.empty((steps, 3, size, size), np.float32)
    ego = np.empty((steps, 2, 3, size, size), np.float32)
    boxes = np.empty((steps, NUM_OBJECTS, 5), np.float32)
    gaze = np.empty((steps, 2, 2), np.float32)
    pose = np.empty((steps, 2, POSE_JOINTS, 2), np.float32)
    agent_state = np.zeros((steps, 2, 2), np.int32)
    events, labels, flags = [], [], []

    def attention(event_cell: int | None, forced: tuple[bool, bool] = (False, False)) -> list[int]:
        if event_cell is not None:
            out = []
            for p in range(2):
                if presence[p] != ABSENT and (forced[p] or rng.random() < cfg.attend_rate):
                    out.append(event_cell)
                else:
                    out.append(_random_other(rng, {event_cell}))
            return out
        if rng.random() < cfg.joint_attend_rate:
            shared = _random_other(rng, set())
            return [shared, shared]
        return [_random_other(rng, set()), _random_other(rng, set())]

    for k in range(steps // CLIP_LEN + (1 if steps % CLIP_LEN else 0)):
        start = {m: v for m, v in minds.items()}
        sally = (
            k < steps // CLIP_LEN and world >= 0 and presence == [PRESENT, PRESENT]
            and len(free) > 1 and rng.random() < cfg.false_belief_rate
        )
        for t in range(k * CLIP_LEN, min((k + 1) * CLIP_LEN, steps)):
            phase = t - k * CLIP_LEN
            event_cell, forced = None, (False, False)
            if phase == 1:
                if sally:
                    presence[1] = ABSENT
                else:
                    for p in range(2):
                        if rng.random() < cfg.leave_rate:
                            if presence[p] == PRESENT:
                                presence[p] = HIDDEN if rng.random() < 0.5 else ABSENT
                            else:
                                presence[p] = PRESENT
            if phase == 2 and (sally or rng.random() < cfg.move_rate):
                if world < 0:
                    kind, new = APPEAR, int(rng.choice(free))
                    seen_at = new
                elif sally or rng.random() < 0.5:
                    kind, new = MOVE, int(rng.choice([c for c in free if c != world]))
                    seen_at = new
                else:
                    kind, new, seen_at = REMOVE, -1, world
                event_cell, forced = seen_at, (sally, False)
                events.append((t, kind, world, new))
                world = new
            attended = attention(event_cell, forced)
            if event_cell is not None:
                sees = [presence[p] != ABSENT and attended[p] == event_cell for p in range(2)]
                vis = lambda i, j: presence[i] != ABSENT and presence[j] == PRESENT
                if sees[0]:
                    minds["m1"] = world
                if sees[1]:
                    minds["m2"] = world
                if sees[0] and sees[1] and vis(0, 1):
                    minds["m12"] = world
                if sees[0] and sees[1] and vis(1, 0):
                    minds["m21"] = world
                if sees[0] and sees[1] and presence == [PRESENT, PRESENT]:
                    minds["mc"] = world
            objects = dict(fixed)
            if world >= 0:
                objects[selected] = world
            frames[t] = canvas.render(objects, {0: presence[0], 1: presence[1]})
            boxes[t] = canvas.boxes(objects)
            for p in range(2):
                gaze[t, p], pose[t, p] = _agent_cues(rng, cfg, p, presence[p], attended[p], 2)
                ego[t, p] = _ego_view(frames[t], presence[p], attended[p], size)
                agent_state[t, p] = (presence[p], attended[p])
        if k < steps // CLIP_LEN:
            labels.append([transition_label(start[m], minds[m]) for m in ("m1", "m2", "m12", "m21", "mc")])
            flags.append([int(minds[m] != world) for m in ("m1", "m2", "m12", "m21", "mc")])

    extras = {
        "world_init": np.array([world_init], np.int32),
        "events": np.array(events, np.int32).reshape(-1, 4),
        "agent_state": agent_state,
    }
    return Episode(
        id=f"tbd_{cfg.seed}_{index:04d}", mode="tbd", frames=frames, boxes=boxes, gaze=gaze, pose=pose,
        ego=ego, labels=np.array(labels, np.int32).reshape(-1, 5), false_belief=np.array(flags, np.int32).reshape(-1, 5),
        extras=extras,
    )


def replay_event_log(ep: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Recompute tbd labels and false-belief flags from the stored event log
    and per-frame agent states alone.  Independent oracle for the generator."""
    init = int(ep.extras["world_init"][0])
    state = ep.extras["agent_state"]
    by_frame = {int(e[0]): e for e in ep.extras["events"]}
    world = init
    order = ("m1", "m2", "m12", "m21", "mc")
    mind = dict.fromkeys(order, init)
    history = [dict(mind)]  # content at each clip boundary
    worlds = [world]
    for t in range(ep.steps):
        if t in by_frame:
            _, kind, old, new = (int(v) for v in by_frame[t])
            shown = old if kind == REMOVE else new
            world = new
            pres, att = state[t, :, 0], state[t, :, 1]
            in_room = pres != ABSENT
            see = in_room & (att == shown)
            both = see[0] and see[1]
            if see[0]:
                mind["m1"] = world
            if see[1]:
                mind["m2"] = world
            if both and in_room[0] and pres[1] == PRESENT:
                mind["m12"] = world
            if both and in_room[1] and pres[0] == PRESENT:
                mind["m21"] = world
            if both and pres[0] == PRESENT and pres[1] == PRESENT:
                mind["mc"] = world
        if (t + 1) % CLIP_LEN == 0:
            history.append(dict(mind))
            worlds.append(world)
    labels = np.array([[transition_label(a[m], b[m]) for m in order] for a, b in zip(history, history[1:])], np.int32)
    flags = np.array([[int(b[m] != w) for m in order] for b, w in zip(history[1:], worlds[1:])], np.int32)
    return labels.reshape(-1, 5), flags.reshape(-1, 5)


def sally_anne_episode(frame_size: int = 32) -> Episode:
    """The scripted leave-then-move story as one five-frame tbd clip:
    agent 2 leaves on frame 1, the object moves on frame 2 while agent 1
    watches."""
    cfg = SyntheticConfig(seed=0, episode_count=1, mode="tbd", steps=CLIP_LEN, frame_size=frame_size,
                          object_count=1, move_rate=0.0, leave_rate=0.0, attend_rate=1.0,
                          joint_attend_rate=0.0, false_belief_rate=1.0)
    return _tbd_episode(cfg, 0, initially_absent=0.0)


# --------------------------------------------------------------------------
# boss
# --------------------------------------------------------------------------

def _boss_episode(cfg: SyntheticConfig, index: int) -> Episode:
    rng = _rng(cfg.seed, index)
    size, steps = cfg.frame_size, cfg.steps
    canvas = _Canvas(size)
    classes = [int(k) for k in rng.choice(NUM_OBJECTS, size=cfg.object_count, replace=False)]
    cells = [int(c) for c in rng.choice(OBJECT_CELLS, size=cfg.object_count, replace=False)]
    objects = dict(zip(classes, cells))
    target = classes[int(rng.integers(len(classes)))]
    belief2 = target

    frames = np.empty((steps, 3, size, size), np.float32)
    boxes = np.empty((steps, NUM_OBJECTS, 5), np.float32)
    gaze = np.empty((steps, 2, 3), np.float32)
    pose = np.empty((steps, 2, POSE_JOINTS, 3), np.float32)
    labels = np.empty((steps, 2), np.int32)
    agent_state = np.zeros((steps, 2, 2), np.int32)
    events = []
    for t in range(steps):
        if t > 0 and len(classes) > 1 and rng.random() < cfg.move_rate:
            target = int(rng.choice([k for k in classes if k != target]))
            events.append((t, TARGET, -1, target))
        a1 = objects[target] if rng.random() < cfg.attend_rate else int(rng.integers(OBJECT_CELLS))
        if rng.random() < cfg.joint_attend_rate:
            a2 = a1
            at_cell = [k for k, c in objects.items() if c == a1]
            if at_cell:
                belief2 = at_cell[0]
        else:
            a2 = int(rng.integers(OBJECT_CELLS))
        frames[t] = canvas.render(objects, {0: PRESENT, 1: PRESENT})
        boxes[t] = canvas.boxes(objects)
        for p, att in enumerate((a1, a2)):
            gaze[t, p], pose[t, p] = _agent_cues(rng, cfg, p, PRESENT, att, 3)
            agent_state[t, p] = (PRESENT, att)
        labels[t] = (target, belief2)
    extras = {"events": np.array(events, np.int32).reshape(-1, 4), "agent_state": agent_state}
    return Episode(id=f"boss_{cfg.seed}_{index:04d}", mode="boss", frames=frames, boxes=boxes,
                   gaze=gaze, pose=pose, labels=labels, extras=extras)


def ocr_matrix(episodes) -> np.ndarray:
    """Row-normalised object co-occurrence counts over the given episodes
    (diagonal: episodes containing the object).  Unseen classes get zero rows."""
    counts = np.zeros((NUM_OBJECTS, NUM_OBJECTS))
    for ep in episodes:
        present = np.flatnonzero(ep.boxes[..., 4].any(axis=0))
        counts[np.ix_(present, present)] += 1
    rows = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0).astype(np.float32)


def generate_synthetic(cfg: SyntheticConfig) -> list[Episode]:
    """Raw (unnormalised) episodes; same config, same bytes."""
    if cfg.mode == "tbd":
        return [_tbd_episode(cfg, i) for i in range(cfg.episode_count)]
    episodes = [_boss_episode(cfg, i) for i in range(cfg.episode_count)]
    ocr = ocr_matrix(episodes)
    for ep in episodes:
        ep.ocr = np.broadcast_to(ocr, (ep.steps,) + ocr.shape).copy()
    return episodes
