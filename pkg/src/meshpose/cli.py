"""Command-line front end: ``meshpose {synth,fit,train,eval,plot,audit,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 partial failure
(some instances or scenes failed; the run still completed).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

from . import __version__
from .evaluation import (Frame, bev_svg, box_to_label, confidence_scores,
                         difficulty_from_mask, evaluate, label_to_box, label_to_detection, mask_bbox,
                         mask_touches_border, mesh_to_box)
from .fitting import FitConfig, InstanceProblem, fit_problem
from .formats import LabelParseError, read_labels, write_labels
from .geometry import EmptyObject, FilterConfig
from .gradcheck import format_rows, run_suite
from .learner import EncoderParams, TrainConfig, predict_instance, train
from .losses import LossWeights
from .manifold import car_manifold
from .synth import NoiseSpec, SynthConfig, audit_scene, corrupt, list_scenes, read_scene, sample_scene, write_scene

log = logging.getLogger("meshpose")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    threads: int = 1
    n_scenes: int = 10


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    learn_shape: bool = False
    checkpoint_every: int = 0  # write a checkpoint every this many epochs; 0: final only


@dataclass(frozen=True)
class EvalSection:
    iou_threshold: float = 0.7


@dataclass(frozen=True)
class PlotSection:
    x_min: float = -20.0
    x_max: float = 20.0
    z_min: float = 0.0
    z_max: float = 50.0
    scale: float = 12.0


# seeds come from [run] only, so they are not settable per section
SECTIONS = {
    "run": (RunSection, ()),
    "synth": (SynthConfig, ()),
    "noise": (NoiseSpec, ("seed",)),
    "fit": (FitConfig, ("seed", "filter")),
    "filter": (FilterConfig, ("seed",)),
    "losses": (LossWeights, ()),
    "train": (TrainSection, ()),
    "eval": (EvalSection, ()),
    "plot": (PlotSection, ()),
}


def _parse_value(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(t) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(repr(float(t)) for t in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _section_keys(name: str) -> dict:
    cls, hidden = SECTIONS[name]
    default = cls()
    return {f.name: getattr(default, f.name) for f in fields(cls) if f.name not in hidden}


class RunConfig:
    """Effective configuration: defaults, then the INI file, then ``--set`` overrides."""

    def __init__(self, values: dict):
        self.values = values
        try:
            self.run = RunSection(**values["run"])
            self.synth = SynthConfig(**values["synth"])
            self.noise = NoiseSpec(**values["noise"], seed=self.run.seed)
            fil = FilterConfig(**values["filter"])
            self.fit = FitConfig(**values["fit"], seed=self.run.seed, filter=fil)
            self.losses = LossWeights(**values["losses"])
            self.train = TrainSection(**values["train"])
            self.eval = EvalSection(**values["eval"])
            self.plot = PlotSection(**values["plot"])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        if self.run.threads < 1 or self.run.n_scenes < 0:
            raise UsageError("run.threads must be positive and run.n_scenes non-negative")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.lr < 0:
            raise UsageError("train: epochs >= 0, batch_size >= 1 and lr >= 0 are required")

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        values = {name: _section_keys(name) for name in SECTIONS}
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, strict=True)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise UsageError(f"cannot read config {path}: {exc}") from None
            except configparser.Error as exc:
                raise UsageError(f"{path}: {exc}") from None
            for section in parser.sections():
                for key, text in parser.items(section):
                    cls._assign(values, section, key, text, str(path))
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            lhs, text = item.split("=", 1)
            section, key = lhs.split(".", 1)
            cls._assign(values, section.strip(), key.strip(), text, "--set")
        return cls(values)

    @staticmethod
    def _assign(values, section, key, text, origin):
        if section not in values:
            raise UsageError(f"{origin}: unknown section [{section}]")
        if key not in values[section]:
            raise UsageError(f"{origin}: unknown key {section}.{key}")
        values[section][key] = _parse_value(text, values[section][key], f"{section}.{key}")

    def as_dict(self) -> dict:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(kv.items())}
                for s, kv in sorted(self.values.items())}

    def to_ini(self) -> str:
        lines = []
        for s, kv in self.as_dict().items():
            lines.append(f"[{s}]")
            lines += [f"{k} = {_format_value(v)}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        """Hash of everything that affects results; the thread count does not."""
        d = self.as_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "threads"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    manifest = {"command": command, "version": __version__, "config": cfg.as_dict(), "config_hash": cfg.digest()}
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_ini())


def prepare_output(out: Path, force: bool, owned=()) -> None:
    """Refuse a non-empty directory unless ``force``; with it, clear only what we write."""
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"{out} is not empty (use --force to overwrite)")
        for name in owned:
            p = out / name
            if p.is_dir():
                shutil.rmtree(p)
            elif p.exists():
                p.unlink()
    out.mkdir(parents=True, exist_ok=True)


def ordered_map(fn, items, threads: int):
    """``map`` on a thread pool; results always come back in input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


def require_dataset(path: Path) -> list[Path]:
    if not path.is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    return list_scenes(path)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    prepare_output(out, args.force, ("scenes", "manifest.json", "config.ini"))
    manifold = car_manifold()

    def one(idx):
        scene = sample_scene(cfg.synth, cfg.run.seed, idx, manifold)
        write_scene(out, scene, corrupt(scene, cfg.noise), cfg.noise)
        return idx

    done = ordered_map(one, range(cfg.run.n_scenes), cfg.run.threads)
    write_manifest(out, "synth", cfg, {"n_scenes": len(done)})
    log.info("wrote %d scenes to %s", len(done), out)
    return EXIT_OK


@dataclass
class InstanceOutcome:
    index: int
    box: object = None
    bbox2d: tuple = (0.0, 0.0, 0.0, 0.0)
    truncated: bool = False
    difficulty: str = "hard"
    single: float = 0.0
    result: dict | None = None
    error: str | None = None


def _fit_scene(path: Path, cfg: RunConfig, params: EncoderParams | None, learn_shape: bool):
    rec = read_scene(path)
    manifold = car_manifold()
    outcomes = []
    for i, mask in enumerate(rec.masks):
        oc = InstanceOutcome(i)
        try:
            problem = InstanceProblem(rec.depth, mask, rec.K, manifold, cfg.losses, cfg.fit, rec.triplet(i))
            if params is None:
                res = fit_problem(problem, cfg.fit)
                state, bd, oc.result = res.best, res.breakdown, res.to_dict()
            else:
                pred = predict_instance(params, problem, learn_shape)
                state, bd = pred.state, pred.breakdown
                oc.result = {"state": state.to_dict(), "breakdown": bd.as_dict(),
                             "per_bin_losses": [float(v) for v in pred.per_bin_losses], "best_bin": pred.best_bin}
            oc.box = mesh_to_box(manifold, state.z, state.pose)
            oc.bbox2d = mask_bbox(mask)
            oc.truncated = mask_touches_border(mask)
            oc.difficulty = difficulty_from_mask(mask)
            oc.single = bd.single
        except (EmptyObject, FloatingPointError, ValueError) as exc:
            oc.error = str(exc)
        outcomes.append(oc)
    return rec.index, outcomes


def cmd_fit(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    scenes = require_dataset(data)
    if not scenes:
        log.info("no scenes in %s; nothing to fit", data)
        return EXIT_OK
    params, learn_shape = None, False
    if args.checkpoint:
        params, learn_shape = _load_checkpoint(Path(args.checkpoint))
    prepare_output(out, args.force, ("labels", "results", "manifest.json", "config.ini"))
    results = ordered_map(lambda p: _fit_scene(p, cfg, params, learn_shape), scenes, cfg.run.threads)

    ok = [oc for _, ocs in results for oc in ocs if oc.error is None]
    scores = iter(confidence_scores([oc.single for oc in ok], [oc.difficulty for oc in ok]) if ok else [])
    (out / "labels").mkdir(exist_ok=True)
    (out / "results").mkdir(exist_ok=True)
    n_failed = 0
    for idx, outcomes in results:
        labels, records = [], []
        for oc in outcomes:
            if oc.error is not None:
                n_failed += 1
                log.error("scene %06d instance %d failed: %s", idx, oc.index, oc.error)
                records.append({"instance": oc.index, "error": oc.error})
                continue
            score = float(next(scores))
            labels.append(box_to_label(oc.box, oc.bbox2d, float(oc.truncated), 0, score))
            records.append({"instance": oc.index, "difficulty": oc.difficulty, "score": score,
                            "box": oc.box.to_dict(), **oc.result})
        write_labels(out / "labels" / f"{idx:06d}.txt", labels)
        (out / "results" / f"{idx:06d}.json").write_text(json.dumps(records, indent=1, sort_keys=True) + "\n")
    write_manifest(out, "fit", cfg, {"data": str(data), "checkpoint": args.checkpoint, "n_scenes": len(results),
                                      "n_failed": n_failed})
    log.info("fitted %d scenes, %d instance failures", len(results), n_failed)
    return EXIT_PARTIAL if n_failed else EXIT_OK


def _load_checkpoint(path: Path):
    if not path.exists() or not Path(str(path) + ".json").exists():
        raise UsageError(f"checkpoint {path} (or its .json manifest) not found")
    try:
        params = EncoderParams.load(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None
    extra = json.loads(Path(str(path) + ".json").read_text()).get("extra", {})
    return params, bool(extra.get("learn_shape", False))


def _scene_problems(path: Path, cfg: RunConfig):
    rec = read_scene(path)
    manifold = car_manifold()
    probs = []
    for i, mask in enumerate(rec.masks):
        try:
            probs.append(InstanceProblem(rec.depth, mask, rec.K, manifold, cfg.losses, cfg.fit, rec.triplet(i)))
        except EmptyObject as exc:
            log.warning("scene %06d instance %d skipped: %s", rec.index, i, exc)
    return probs


def cmd_train(args, cfg: RunConfig) -> int:
    data, out = Path(args.data), Path(args.out)
    scenes = require_dataset(data)
    prepare_output(out, args.force, ("encoder.bin", "encoder.bin.json", "checkpoints", "loss.csv",
                                     "manifest.json", "config.ini"))
    problems = [p for ps in ordered_map(lambda s: _scene_problems(s, cfg), scenes, cfg.run.threads) for p in ps]
    if not problems:
        raise UsageError(f"no usable instances in {data}")
    t = cfg.train
    tcfg = TrainConfig(t.epochs, t.batch_size, t.lr, cfg.run.seed, cfg.fit.n_bins, t.learn_shape, cfg.losses,
                       None, cfg.run.threads)
    extra = {"learn_shape": t.learn_shape, "config_hash": cfg.digest()}

    def checkpoint(epoch, params, history):
        log.info("epoch %d: mean loss %.6g (%d used, %d skipped)", *history.rows[-1])
        if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            params.save(out / "checkpoints" / f"epoch_{epoch + 1:04d}.bin", extra)

    params, history = train(problems, tcfg, callback=checkpoint)
    params.save(out / "encoder.bin", extra)
    (out / "loss.csv").write_text(history.to_csv())
    write_manifest(out, "train", cfg, {"data": str(data), "n_instances": len(problems),
                                        "final_loss": history.final_loss})
    print(f"final loss {history.final_loss!r}")
    return EXIT_OK


def _load_frames(data: Path, pred: Path | None):
    scenes = require_dataset(data)
    if pred is not None and not (pred / "labels").is_dir():
        raise UsageError(f"prediction directory {pred} has no labels/ subdirectory")
    frames = []
    for path in scenes:
        idx = int(path.name)
        try:
            gt_labels = read_labels(path / "label.txt")
            meta = json.loads((path / "meta.json").read_text())
            dets = []
            if pred is not None:
                lab_path = pred / "labels" / f"{idx:06d}.txt"
                if not lab_path.exists():
                    raise UsageError(f"missing prediction file {lab_path}")
                dets = [label_to_detection(lab) for lab in read_labels(lab_path)]
        except (LabelParseError, OSError) as exc:
            raise UsageError(str(exc)) from None
        frames.append((idx, Frame([label_to_box(g) for g in gt_labels], list(meta["difficulty"]), dets)))
    return frames


def cmd_eval(args, cfg: RunConfig) -> int:
    data, pred = Path(args.data), Path(args.pred)
    if not pred.is_dir():
        raise UsageError(f"prediction directory {pred} does not exist")
    frames = _load_frames(data, pred)
    report = evaluate([f for _, f in frames], cfg.eval.iou_threshold)
    out = Path(args.out) if args.out else pred
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "pr.csv").write_text(report.pr_csv())
    table = report.to_table()
    (out / "table.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_plot(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    pred = Path(args.pred) if args.pred else None
    frames = _load_frames(data, pred)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    p = cfg.plot
    for idx, fr in frames:
        svg = bev_svg(fr.gts, [d.box for d in fr.dets], (p.x_min, p.x_max), (p.z_min, p.z_max), p.scale)
        (out / f"{idx:06d}.svg").write_text(svg)
    log.info("wrote %d plots to %s", len(frames), out)
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    scenes = require_dataset(Path(args.data))
    results = ordered_map(audit_scene, scenes, cfg.run.threads)
    print(f"{'scene':<8} {'surface [m]':>12} {'triplet L1':>11}  result")
    for r in results:
        print(f"{r.path.name:<8} {r.surface_error:>12.3e} {r.triplet_error:>11.3e}  "
              f"{'ok' if r.ok else 'FAIL: ' + '; '.join(r.problems)}")
    bad = sum(not r.ok for r in results)
    print(f"{len(results) - bad}/{len(results)} scenes passed")
    return EXIT_PARTIAL if bad else EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    rows = run_suite(args.instances, cfg.run.seed)
    print(format_rows(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_PARTIAL


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "train": cmd_train, "eval": cmd_eval, "plot": cmd_plot,
            "audit": cmd_audit, "gradcheck": cmd_gradcheck}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshpose", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file with [section] key = value entries")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="shortcut for --set run.seed=N")
    common.add_argument("--threads", type=int, help="shortcut for --set run.threads=N")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of scenes (run.n_scenes)")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("fit", parents=[common], help="fit every instance of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="predict with a trained encoder instead of fitting")
    p.add_argument("--no-posecd", action="store_true", help="plain chamfer on the main position")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train the encoder on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-posecd", action="store_true")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="AP of predicted labels against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True, help="output directory of fit (with labels/)")
    p.add_argument("--out", help="report directory (default: --pred)")

    p = sub.add_parser("plot", parents=[common], help="bird's-eye-view SVG per frame")
    p.add_argument("--data", required=True)
    p.add_argument("--pred")
    p.add_argument("--out", required=True)

    p = sub.add_parser("audit", parents=[common], help="re-render scenes and check self-consistency")
    p.add_argument("--data", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    return parser


def _effective_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads={args.threads}")
    if getattr(args, "n", None) is not None:
        overrides.append(f"run.n_scenes={args.n}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    if getattr(args, "no_posecd", False):
        overrides.append("fit.pose_cd=false")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"meshpose: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
