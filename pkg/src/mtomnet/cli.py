"""``mtomnet`` command line: generate, train, eval and analyze.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure,
5 incompatible inputs (mode mismatch).
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import analyze as A
from . import model as M
from .container import CorruptFileError, ValidationError
from .data import Corpus, load_corpus, write_corpus, episode_windows, collate
from .synthetic import SyntheticConfig, generate_synthetic, replay_event_log
from .tensor import NonFiniteError
from .train import CHECKPOINT_NAME, ModeMismatch, TrainConfig, evaluate, predict, train_corpus

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MODE = 0, 2, 3, 4, 5
RUN_MARKER = ".mtomnet-running"
CONFIG_ECHO = "resolved_config.txt"

# one flat namespace; "seed" and "mode" are shared between the sections
_MODEL_KEYS = ("variant", "aggregation", "tau", "mode", "hidden", "dropout")
_SCHEMA: dict[str, type] = {}
for _cls, _keys in ((SyntheticConfig, SyntheticConfig.keys()), (M.MToMnetConfig, _MODEL_KEYS),
                    (TrainConfig, TrainConfig.keys())):
    _defaults = _cls()
    for _k in _keys:
        _v = getattr(_defaults, _k)
        _SCHEMA.setdefault(_k, type(_v) if _v is not None else int)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(EXIT_CONFIG, f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise CliError(EXIT_CONFIG, f"{source}:{n}: key {key!r} given twice")
        out[key] = value
    return out


def _coerce(key: str, value: str):
    kind = _SCHEMA[key]
    try:
        if kind is bool:
            return {"1": True, "true": True, "0": False, "false": False}[value.lower()]
        return kind(value)
    except (ValueError, KeyError):
        raise CliError(EXIT_CONFIG, f"config key {key!r}: cannot read {value!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    values: dict[str, object]

    @classmethod
    def load(cls, path: str | None, overrides: dict[str, str]) -> "RunConfig":
        raw: dict[str, str] = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from exc
            raw = parse_config_text(text, str(path))
        raw.update(overrides)  # flags win
        unknown = sorted(set(raw) - set(_SCHEMA))
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config key {unknown[0]!r}")
        return cls({k: _coerce(k, v) for k, v in raw.items()})

    def _build(self, cls, keys, **extra):
        kw = {k: self.values[k] for k in keys if k in self.values}
        kw.update(extra)
        try:
            return cls(**kw)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"invalid config: {exc}") from exc

    def synthetic(self) -> SyntheticConfig:
        return self._build(SyntheticConfig, SyntheticConfig.keys())

    def model(self, mode: str) -> M.MToMnetConfig:
        if "mode" in self.values and M.MODE_ALIASES.get(self.values["mode"], self.values["mode"]) != mode:
            raise CliError(EXIT_MODE, f"config mode {self.values['mode']!r} does not match the corpus mode {mode!r}")
        return self._build(M.MToMnetConfig, [k for k in _MODEL_KEYS if k != "mode"], mode=mode)

    def train(self) -> TrainConfig:
        return self._build(TrainConfig, TrainConfig.keys())

    def echo(self, resolved: list) -> str:
        """Resolved values in the config file format; reading it back
        reproduces the run."""
        lines = []
        for obj in resolved:
            lines.append(f"# {type(obj).__name__}")
            for f in fields(obj):
                value = getattr(obj, f.name)
                if f.name not in _SCHEMA:
                    continue
                lines.append(f"# {f.name} = per-mode default" if value is None else f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

@contextlib.contextmanager
def run_directory(out: Path):
    """Create ``out`` and hold a live-run marker in it for the duration."""
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / RUN_MARKER
        marker.touch(exist_ok=False)
    except FileExistsError:
        raise CliError(EXIT_IO, f"{out} holds a live run marker ({RUN_MARKER}); another run is writing there") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot prepare {out}: {exc.strerror}") from exc
    try:
        yield out
    finally:
        marker.unlink(missing_ok=True)


def _open_corpus(path) -> Corpus:
    try:
        corpus = load_corpus(path)
        corpus.mode()
        return corpus
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc


def _open_checkpoint(path):
    try:
        return M.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"no checkpoint at {path}") from exc


def _episodes(corpus: Corpus, split):
    try:
        return corpus.episodes(corpus.split(split))
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"no split file {exc.filename}") from exc


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = str(args.seed)
    return out


def _split_name(split) -> str:
    return Path(str(split)).stem


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    run = RunConfig.load(args.config, _overrides(args))
    cfg = run.synthetic()
    with run_directory(Path(args.out)) as out:
        episodes = generate_synthetic(cfg)
        split_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 7])))
        write_corpus(out, episodes, split_rng)
        (out / CONFIG_ECHO).write_text(run.echo([cfg]))
    print(f"wrote {len(episodes)} {cfg.mode} episodes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config, _overrides(args))
    corpus = _open_corpus(args.corpus)
    mcfg, tcfg = run.model(corpus.mode()), run.train()
    with run_directory(Path(args.out)) as out:
        (out / CONFIG_ECHO).write_text(run.echo([mcfg, tcfg]))
        model = M.MToMnet(mcfg, tcfg.seed)
        total, _ = M.count_parameters(model)
        print(f"training {mcfg.variant}/{mcfg.aggregation} ({mcfg.mode}, {total:,} parameters) for {tcfg.epochs} epochs")

        def progress(_, rec) -> bool:
            print(f"epoch {rec.epoch:>4}  loss {rec.train_loss:.5f}  val {rec.val_metric:.5f}", flush=True)
            return False

        try:
            res = train_corpus(model, corpus, tcfg, out, on_epoch=progress)
        except NonFiniteError as exc:
            raise CliError(EXIT_NUMERIC, str(exc)) from exc
    print(f"best val metric {res.best_metric!r} at epoch {res.best_epoch}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _open_checkpoint(args.checkpoint)
    corpus = _open_corpus(args.corpus)
    if corpus.mode() != model.config.mode:
        raise CliError(EXIT_MODE, f"checkpoint is {model.config.mode} but corpus is {corpus.mode()}")
    report = evaluate(model, _episodes(corpus, args.split))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{_split_name(args.split)}.csv")
    report.write_csv(out)
    print(report.text(), end="")
    print(f"report written to {out}")
    return EXIT_OK


def _collect_states(model, episodes):
    """MindNet hidden states at each window's final timestep (eval mode)."""
    states, groups = [], []
    for ep in episodes:
        for w in episode_windows(ep):
            b = collate([w])
            _, trace = M.forward(model, b.cues, trace=True)
            for g, s in ((1, trace.s1), (2, trace.s2)):
                states.append(s.H.data[0, -1])
                groups.append(g)
    return np.array(states, dtype=np.float64), np.array(groups)


def cmd_pca(args) -> int:
    model, _ = _open_checkpoint(args.checkpoint)
    corpus = _open_corpus(args.corpus)
    if corpus.mode() != model.config.mode:
        raise CliError(EXIT_MODE, f"checkpoint is {model.config.mode} but corpus is {corpus.mode()}")
    states, groups = _collect_states(model, _episodes(corpus, args.split))
    res = A.pca_project(states, groups)
    res.write(args.out)
    print(f"PCA of {len(groups)} states: explained ratio {res.explained_ratio[0]:.4f}, {res.explained_ratio[1]:.4f}; "
          f"separability {res.separability:.4f}")
    return EXIT_OK


def cmd_false_belief(args) -> int:
    corpus = _open_corpus(args.corpus)
    if corpus.mode() != "tbd":
        raise CliError(EXIT_MODE, "false-belief analysis needs a tbd corpus")
    episodes = _episodes(corpus, args.split) if args.split else corpus.episodes()
    if args.checkpoint:
        model, _ = _open_checkpoint(args.checkpoint)
        if model.config.mode != "tbd":
            raise CliError(EXIT_MODE, f"checkpoint is {model.config.mode}, not tbd")
        preds, truths, flags = predict(model, episodes)
    else:
        truths = np.concatenate([ep.labels for ep in episodes])
        flags = np.concatenate([ep.false_belief for ep in episodes])
        preds = np.full_like(truths, M.TBD_LABELS.index(args.constant))
    report = A.false_belief_accuracy(preds, truths, flags)
    report.write(args.out)
    print(report.text(), end="")
    if args.verify_oracle:
        for ep in episodes:
            if "events" not in ep.extras:
                raise CliError(EXIT_MODE, f"episode {ep.id} has no event log to replay")
            labels, fb = replay_event_log(ep)
            if not (np.array_equal(labels, ep.labels) and np.array_equal(fb, ep.false_belief)):
                print(f"oracle mismatch in episode {ep.id}", file=sys.stderr)
                return EXIT_NUMERIC
        print(f"event-log replay agrees on all {len(episodes)} episodes")
    return EXIT_OK


def _samples(paths: list[str], metric: str) -> list[float]:
    values = []
    for p in paths:
        try:
            rep = A.MetricReport.read_csv(p)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {p}: {exc.strerror}") from exc
        except ValueError:
            rep = None
        if rep is not None:
            values.append(float(rep.selection_metric if metric == "selection_metric" else dict(rep.rows())[metric]))
            continue
        try:
            values.extend(float(x) for x in Path(p).read_text().split())
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, f"{p}: neither a metric report nor a list of numbers") from exc
    return values


def cmd_ttest(args) -> int:
    a, b = _samples(args.a, args.metric), _samples(args.b, args.metric)
    try:
        res = A.paired_t_test(a, b, pairing=args.pairing)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    rows = res.rows()
    if args.out:
        A.write_csv(args.out, ("quantity", "value"), rows)
    for k, v in rows:
        print(f"{k:<12}{v}")
    return EXIT_OK


def cmd_count_params(args) -> int:
    if args.checkpoint:
        model, _ = _open_checkpoint(args.checkpoint)
    else:
        try:
            cfg = M.MToMnetConfig(args.variant, args.aggregation, mode=args.mode)
        except ValueError as exc:
            raise CliError(EXIT_CONFIG, str(exc)) from exc
        model = M.MToMnet(cfg, 0)
    cfg = model.config
    total, breakdown = M.count_parameters(model)
    print(f"{cfg.variant} {cfg.aggregation} ({cfg.mode})")
    for group, n in breakdown.items():
        print(f"  {group:<24}{n:>10,}")
    print(f"  {'total':<24}{total:>10,}")
    ref = M.REFERENCE_TOTALS.get((cfg.variant, cfg.aggregation, cfg.mode))
    if ref is None:
        print("  no reference total for this configuration")
        return EXIT_OK
    dev = (total - ref) / ref
    ok = abs(dev) <= M.REFERENCE_TOLERANCE
    print(f"  reference {ref:,}: deviation {dev:+.2%} ({'within' if ok else 'OUTSIDE'} ±{M.REFERENCE_TOLERANCE:.0%})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_gradcheck(args) -> int:
    from .checks import run_suite

    results = run_suite(points=args.points, seed=args.seed, only=args.only)
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} cases within tolerance")
    return EXIT_NUMERIC if failed else EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtomnet", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def config_flags(sp, seed_help):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help=seed_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic corpus")
    config_flags(g, "generator seed")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a model on a corpus")
    config_flags(t, "initialisation, shuffle and dropout seed")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", required=True, help="split name (train/val/test) or split file")
    e.add_argument("--out", help="report path (default: next to the checkpoint)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="post-hoc analyses")
    asub = a.add_subparsers(dest="analysis", required=True)

    pca = asub.add_parser("pca", help="PCA of MindNet hidden states")
    pca.add_argument("--checkpoint", required=True)
    pca.add_argument("--corpus", required=True)
    pca.add_argument("--split", default="test")
    pca.add_argument("--out", required=True)
    pca.set_defaults(fn=cmd_pca)

    fb = asub.add_parser("false-belief", help="accuracy on false-belief clips and label counts")
    fb.add_argument("--corpus", required=True)
    fb.add_argument("--split", help="restrict to a split (default: whole corpus)")
    src = fb.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--constant", choices=M.TBD_LABELS, help="score a constant predictor")
    fb.add_argument("--verify-oracle", action="store_true", help="replay each episode's event log against its labels")
    fb.add_argument("--out", required=True)
    fb.set_defaults(fn=cmd_false_belief)

    tt = asub.add_parser("ttest", help="paired t-test between two sets of runs")
    tt.add_argument("--a", nargs="+", required=True, help="metric reports or number lists")
    tt.add_argument("--b", nargs="+", required=True)
    tt.add_argument("--pairing", required=True, help="what pairs the samples (e.g. seeds, episodes)")
    tt.add_argument("--metric", default="selection_metric")
    tt.add_argument("--out")
    tt.set_defaults(fn=cmd_ttest)

    cp = asub.add_parser("count-params", help="parameter breakdown and reference comparison")
    cp.add_argument("--variant", default="Base", choices=M.VARIANTS)
    cp.add_argument("--aggregation", default="concat", choices=M.AGGREGATIONS)
    cp.add_argument("--mode", default="boss")
    cp.add_argument("--checkpoint")
    cp.set_defaults(fn=cmd_count_params)

    gc = asub.add_parser("gradcheck", help="finite-difference check of every op, layer and forward path")
    gc.add_argument("--points", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--only", help="name prefix filter, e.g. layer/")
    gc.set_defaults(fn=cmd_gradcheck)
    return p


def _apply_threads():
    value = os.environ.get("MTOM_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise CliError(EXIT_CONFIG, f"MTOM_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _apply_threads():
            return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ModeMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODE
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptFileError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
