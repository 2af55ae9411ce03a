"""Evaluation artefacts: macro-F1, false-belief accuracy, PCA of MindNet
states with a separability score, and the paired t-test."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import MINDS, TBD_LABELS

ORDERS = {"first": ("m1", "m2"), "second": ("m12", "m21"), "joint": ("mc",)}
EMPTY = "empty"
SEPARABILITY_DIRECTIONS = 180


def _as_labels(x, k: int, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.round(arr)):
            raise ValueError(f"{name} must hold integer class ids")
        arr = arr.astype(np.int64)
    arr = arr.astype(np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= k):
        raise ValueError(f"{name} has a class outside [0, {k})")
    return arr


def confusion_matrix(preds, truths, k: int) -> np.ndarray:
    """Rows are truths, columns predictions."""
    p, t = _as_labels(preds, k, "preds"), _as_labels(truths, k, "truths")
    if p.shape != t.shape:
        raise ValueError(f"preds and truths differ in length: {p.size} vs {t.size}")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def f1_from_confusion(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)  # 2TP + FP + FN
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(preds, truths, k: int) -> tuple[np.ndarray, float]:
    """Per-class F1 (0/0 counts as 0) and their unweighted mean over all k classes."""
    per_class = f1_from_confusion(confusion_matrix(preds, truths, k))
    return per_class, float(per_class.mean())


def accuracy(preds, truths) -> float:
    p, t = np.asarray(preds).reshape(-1), np.asarray(truths).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("preds and truths differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(p == t))


# --------------------------------------------------------------------------
# metric reports
# --------------------------------------------------------------------------

@dataclass
class MetricReport:
    mode: str
    n: int
    accuracy: float
    per_person: dict[str, float] = field(default_factory=dict)
    per_mind_f1: dict[str, float] = field(default_factory=dict)
    macro_f1_mean: float | None = None

    @property
    def selection_metric(self) -> float:
        """Validation accuracy in boss mode, mean per-mind macro-F1 in tbd mode."""
        return self.accuracy if self.mode == "boss" else self.macro_f1_mean

    def rows(self) -> list[tuple[str, str]]:
        rows = [("mode", self.mode), ("n", str(self.n)), ("accuracy", repr(self.accuracy))]
        rows += [(f"accuracy.{k}", repr(v)) for k, v in self.per_person.items()]
        rows += [(f"macro_f1.{k}", repr(v)) for k, v in self.per_mind_f1.items()]
        if self.macro_f1_mean is not None:
            rows.append(("macro_f1.mean", repr(self.macro_f1_mean)))
        rows.append(("selection_metric", repr(self.selection_metric)))
        return rows

    def write_csv(self, path) -> None:
        write_csv(path, ("metric", "value"), self.rows())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        values = dict(read_csv(path, ("metric", "value")))
        try:
            rep = cls(values["mode"], int(values["n"]), float(values["accuracy"]))
        except KeyError as exc:
            raise ValueError(f"{path}: report lacks {exc.args[0]!r}") from exc
        for key, v in values.items():
            if key.startswith("accuracy."):
                rep.per_person[key.split(".", 1)[1]] = float(v)
            elif key == "macro_f1.mean":
                rep.macro_f1_mean = float(v)
            elif key.startswith("macro_f1."):
                rep.per_mind_f1[key.split(".", 1)[1]] = float(v)
        return rep

    def text(self) -> str:
        lines = [f"{k:<22}{v}" for k, v in self.rows()]
        return "\n".join(lines) + "\n"


def boss_report(preds: np.ndarray, truths: np.ndarray) -> MetricReport:
    """preds/truths [N, 2] (frame, person)."""
    per = {f"p{i + 1}": accuracy(preds[:, i], truths[:, i]) for i in range(2)}
    return MetricReport("boss", int(truths.shape[0]), accuracy(preds, truths), per_person=per)


def tbd_report(preds: np.ndarray, truths: np.ndarray) -> MetricReport:
    """preds/truths [N, 5] (clip, mind)."""
    f1 = {m: macro_f1(preds[:, j], truths[:, j], len(TBD_LABELS))[1] for j, m in enumerate(MINDS)}
    return MetricReport("tbd", int(truths.shape[0]), accuracy(preds, truths),
                        per_mind_f1=f1, macro_f1_mean=float(np.mean(list(f1.values()))))


# --------------------------------------------------------------------------
# false beliefs
# --------------------------------------------------------------------------

@dataclass
class FalseBeliefReport:
    """Accuracies restricted to flagged clips; ``None`` marks an empty subset."""

    per_mind: dict[str, float | None]
    per_order: dict[str, float | None]
    flagged: dict[str, int]
    # counts[mind][label] = (all clips, flagged clips)
    counts: dict[str, dict[str, tuple[int, int]]]

    def count_rows(self) -> list[tuple]:
        return [(m, lab, *self.counts[m][lab]) for m in MINDS for lab in TBD_LABELS]

    def accuracy_rows(self) -> list[tuple]:
        fmt = lambda v: EMPTY if v is None else repr(v)
        rows = [("mind", m, self.flagged[m], fmt(self.per_mind[m])) for m in MINDS]
        rows += [("order", o, sum(self.flagged[m] for m in ms), fmt(self.per_order[o])) for o, ms in ORDERS.items()]
        return rows

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "false_belief_counts.csv", ("mind", "label", "count", "false_belief"), self.count_rows())
        write_csv(out / "false_belief_accuracy.csv", ("subset", "name", "flagged", "accuracy"), self.accuracy_rows())
        (out / "false_belief.txt").write_text(self.text())

    def text(self) -> str:
        head = f"{'mind':<6}" + "".join(f"{lab:>16}" for lab in TBD_LABELS)
        lines = ["label counts: all (false belief)", head]
        for m in MINDS:
            cells = "".join(f"{f'{a} ({b})':>16}" for a, b in (self.counts[m][lab] for lab in TBD_LABELS))
            lines.append(f"{m:<6}{cells}")
        lines += ["", "accuracy on false-belief clips"]
        for kind, name, n, acc in self.accuracy_rows():
            lines.append(f"{kind:<6}{name:<8}n={n:<6}{acc}")
        return "\n".join(lines) + "\n"


def false_belief_counts(truths: np.ndarray, flags: np.ndarray) -> dict[str, dict[str, tuple[int, int]]]:
    truths, flags = np.asarray(truths), np.asarray(flags).astype(bool)
    return {
        m: {lab: (int(np.sum(truths[:, j] == c)), int(np.sum((truths[:, j] == c) & flags[:, j])))
            for c, lab in enumerate(TBD_LABELS)}
        for j, m in enumerate(MINDS)
    }


def false_belief_accuracy(preds, truths, flags) -> FalseBeliefReport:
    """preds, truths, flags: [N clips, 5 minds] in mind order m1, m2, m12, m21, mc."""
    preds, truths, flags = np.asarray(preds), np.asarray(truths), np.asarray(flags).astype(bool)
    if not preds.shape == truths.shape == flags.shape or preds.ndim != 2 or preds.shape[1] != len(MINDS):
        raise ValueError(f"expected aligned [N, 5] arrays, got {preds.shape}, {truths.shape}, {flags.shape}")
    hit = preds == truths
    per_mind, flagged = {}, {}
    for j, m in enumerate(MINDS):
        sel = flags[:, j]
        flagged[m] = int(sel.sum())
        per_mind[m] = float(hit[sel, j].mean()) if sel.any() else None
    per_order = {}
    for o, ms in ORDERS.items():
        cols = [MINDS.index(m) for m in ms]
        sel = flags[:, cols]
        per_order[o] = float(hit[:, cols][sel].mean()) if sel.any() else None
    return FalseBeliefReport(per_mind, per_order, flagged, false_belief_counts(truths, flags))


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

@dataclass
class PcaResult:
    components: np.ndarray  # [2, D], orthonormal rows
    explained_ratio: np.ndarray  # [2]
    points: np.ndarray  # [N, 2]
    groups: np.ndarray  # [N]
    separability: float

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for g in np.unique(self.groups):
            path = out / f"pca_mindnet{g}.txt"
            rows = self.points[self.groups == g]
            path.write_text("".join(f"{x!r} {y!r}\n" for x, y in rows.tolist()))
            paths.append(path)
        write_csv(out / "pca_summary.csv", ("quantity", "value"), [
            ("explained_ratio.pc1", repr(float(self.explained_ratio[0]))),
            ("explained_ratio.pc2", repr(float(self.explained_ratio[1]))),
            ("separability", repr(self.separability)),
            ("samples", str(len(self.groups))),
        ])
        (out / "pca_components.txt").write_text(
            "".join(" ".join(repr(v) for v in row) + "\n" for row in self.components.tolist()))
        return paths


def best_threshold_accuracy(values: np.ndarray, groups: np.ndarray) -> float:
    """Best accuracy of a single threshold on ``values`` separating two groups
    (either side may hold either group)."""
    order = np.argsort(values, kind="stable")
    v, g = values[order], groups[order]
    labels = np.unique(g)
    if labels.size < 2:
        return 1.0
    pos = (g == labels[0]).astype(int)
    n, total_pos = len(v), pos.sum()
    left_pos = np.concatenate([[0], np.cumsum(pos)])  # positives among the first i
    i = np.arange(n + 1)
    # only cut between distinct values
    valid = np.concatenate([[True], v[1:] != v[:-1], [True]])
    correct = left_pos + (n - i) - (total_pos - left_pos)  # left predicted group 0
    best = max(correct[valid].max(), (n - correct)[valid].max())
    return float(best / n)


def separability_score(points: np.ndarray, groups: np.ndarray, directions: int = SEPARABILITY_DIRECTIONS) -> float:
    """Accuracy of the best linear threshold classifier in the PC1/PC2 plane,
    searched over ``directions`` evenly spaced orientations."""
    angles = np.arange(directions) * np.pi / directions
    best = 0.0
    for a in angles:
        best = max(best, best_threshold_accuracy(points @ np.array([np.cos(a), np.sin(a)]), groups))
    return best


def pca_project(states, groups) -> PcaResult:
    """Top-two principal components of ``states`` [N, D] (rows labelled by
    MindNet id in ``groups``)."""
    x = np.asarray(states, dtype=np.float64)
    groups = np.asarray(groups)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError(f"PCA needs at least 3 samples as an [N, D] array, got {x.shape}")
    if groups.shape != (x.shape[0],):
        raise ValueError("groups must label every sample")
    if x.shape[1] < 2:
        raise ValueError("PCA to two components needs at least two features")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / x.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    top = vecs[:, :2].T.copy()
    for row in top:  # fix the sign so the largest-magnitude entry is positive
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = vals.clip(min=0).sum()
    ratios = vals[:2].clip(min=0) / total if total > 0 else np.zeros(2)
    points = centred @ top.T
    return PcaResult(top, ratios, points, groups, separability_score(points, groups))


# --------------------------------------------------------------------------
# paired t-test
# --------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float, xc: float | None = None) -> float:
    """I_x(a, b).  ``xc`` may supply 1 - x computed without cancellation."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    xc = 1.0 - x if xc is None else xc
    if x == 0.0 or xc == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(xc)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) for Student's t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    denom = df + t * t
    return betainc_regularized(df / 2.0, 0.5, df / denom, t * t / denom)


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t >= 0 else tail


@dataclass
class TTestResult:
    t: float
    df: int
    p: float
    significant: bool
    degenerate: bool = False
    pairing: str = ""

    def rows(self) -> list[tuple[str, str]]:
        return [("t", repr(self.t)), ("df", str(self.df)), ("p", repr(self.p)),
                ("significant", str(int(self.significant))), ("degenerate", str(int(self.degenerate))),
                ("pairing", self.pairing)]


def paired_t_test(a: Sequence[float], b: Sequence[float], alpha: float = 0.05, pairing: str = "") -> TTestResult:
    """Two-sided paired t-test on d = a - b.

    Zero-variance differences are degenerate: p = 1 when the mean is zero,
    p = 0 otherwise.  ``pairing`` names the pairing axis (seeds, episodes)
    and is carried into reports.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-d and of equal length")
    n = a.size
    if n < 2:
        raise ValueError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, n - 1, 1.0, False, True, pairing)
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0, True, True, pairing)
    t = mean / (sd / math.sqrt(n))
    p = min(1.0, max(0.0, student_t_sf2(t, n - 1)))
    return TTestResult(t, n - 1, p, p < alpha, False, pairing)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path, header: Sequence[str] | None = None) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV file")
    if header is not None and tuple(rows[0]) != tuple(header):
        raise ValueError(f"{path}: header {rows[0]} does not match {list(header)}")
    return rows[1:]
