"""Command-line entry point: ``heattrack synth | track | eval``.

Every command reads an optional flat ``key = value`` config file (``#``
starts a comment) whose keys are the field names of the synth, align,
detect, pipeline and eval configurations. Exit codes are a stable contract:

    0  success
    2  input or configuration error
    3  I/O error while writing outputs
    4  pipeline error (the message names the frame)
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import typing
from pathlib import Path

from . import __version__, align, detect, metrics, synth, track, volume

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_PIPELINE = 0, 2, 3, 4

logger = logging.getLogger(__name__)

_SECTIONS = {
    "synth": synth.SynthConfig,
    "align": align.AlignConfig,
    "detect": detect.DetectConfig,
    "pipeline": track.PipelineConfig,
    "eval": metrics.EvalConfig,
}
_ALIASES = {"align_lr": "learning_rate", "align_max_iters": "max_iters", "heatmap_sigma": "sigma"}
# nested configs are assembled from their own sections
_NESTED = {"align", "detect"}


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class InputError(ValueError):
    pass


def _key_table():
    table = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if section == "pipeline" and f.name in _NESTED:
                continue
            if f.name in table:
                raise RuntimeError(f"config key {f.name!r} is ambiguous")
            table[f.name] = (section, hints[f.name])
    return table


KEYS = _key_table()


def _parse_value(text, kind):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind in (int, float, str):
        return kind(text)
    if typing.get_origin(kind) is tuple:
        args = typing.get_args(kind)
        parts = [p.strip() for p in text.replace("x", ",").split(",") if p.strip()]
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(parts)}")
        return tuple(a(p) for a, p in zip(args, parts))
    raise ValueError(f"unsupported type {kind}")


def parse_config(text):
    """Parse config text into ``{section: {field: value}}``.

    Raises
    ------
    ConfigError
        With the 1-based line number of the first offending line.
    """
    out = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        section, kind = KEYS[key]
        try:
            out[section][key] = _parse_value(value, kind)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno) from None
    return out


def load_config(path=None, seed=None):
    """Read a config file (or defaults) and build the typed configurations."""
    values = {name: {} for name in _SECTIONS}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror or exc}") from None
        values = parse_config(text)
    if seed is not None:
        values["synth"]["seed"] = int(seed)
    try:
        cfgs = {name: _SECTIONS[name](**values[name]) for name in ("synth", "align", "detect", "eval")}
        cfgs["pipeline"] = track.PipelineConfig(align=cfgs["align"], detect=cfgs["detect"], **values["pipeline"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return cfgs


def config_snapshot(cfgs):
    snap = {}
    for name, cfg in cfgs.items():
        d = dataclasses.asdict(cfg)
        if name == "pipeline":
            for nested in _NESTED:
                d.pop(nested)
        snap[name] = d
    return snap


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command, cfgs, inputs, outputs, extra=None):
    manifest = {
        "tool": "heattrack",
        "version": __version__,
        "command": command,
        "seed": cfgs["synth"].seed,
        "config": config_snapshot(cfgs),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_synth(args):
    cfgs = load_config(args.config, args.seed)
    try:
        frames, gt = synth.generate(cfgs["synth"])
    except synth.SynthError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    try:
        synth.write_sequence(out, frames, gt)
        names = [f"frame_{t:04d}.cvol" for t in range(len(frames))] + ["gt.csv"]
        write_manifest(out / "manifest.json", "synth", cfgs, [], names)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {out}: {exc.strerror or exc}")
    print(f"wrote {len(frames)} frames and gt.csv to {out}")
    return EXIT_OK


def _frame_paths(frames_dir):
    d = Path(frames_dir)
    if not d.is_dir():
        raise InputError(f"frames directory {d} does not exist")
    paths = sorted(d.glob("frame_*.cvol"))
    if len(paths) < 2:
        raise InputError(f"need at least two frame_*.cvol files in {d}, found {len(paths)}")
    return paths


def cmd_track(args):
    cfgs = load_config(args.config, args.seed)
    flags = {}
    if args.no_registration:
        flags["use_registration"] = False
    if args.no_finetune:
        flags["use_fine_tune"] = False
    if args.no_pairwise:
        flags["use_pairwise"] = False
    cfgs["pipeline"] = dataclasses.replace(cfgs["pipeline"], **flags)
    cfg = cfgs["pipeline"]

    paths = _frame_paths(args.frames)
    vols = []
    for p in paths:
        try:
            vols.append(volume.load(p))
        except (volume.VolumeFileError, OSError) as exc:
            raise InputError(f"{p}: {exc}") from None

    out = Path(args.out)
    log_dir = out.parent / f"{out.stem}_align"
    logs = []
    tracks = track.run_sequence(vols, cfg, callback=lambda res: logs.append((res.frame, res.align_log)))

    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        track.write_trajectories(out, tracks, cfg.min_track_length)
        written = [out.name]
        if any(log is not None for _, log in logs):
            log_dir.mkdir(exist_ok=True)
        for frame, log in logs:
            if log is not None:
                name = log_dir / f"pair_{frame - 1:04d}_{frame:04d}.csv"
                log.to_csv(name)
                written.append(f"{log_dir.name}/{name.name}")
        write_manifest(out.with_suffix(".manifest.json"), "track", cfgs, paths, written)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write outputs: {exc.strerror or exc}")
    print(f"wrote {sum(1 for t in tracks if len(t) >= cfg.min_track_length)} trajectories to {out}")
    return EXIT_OK


def cmd_eval(args):
    cfgs = load_config(args.config, args.seed)
    try:
        pred = track.read_trajectories(args.pred)
        gt = track.read_trajectories(args.gt)
    except track.TrajectoryCSVError as exc:
        raise InputError(str(exc)) from None
    except OSError as exc:
        raise InputError(f"cannot read {exc.filename}: {exc.strerror}") from None
    report = metrics.evaluate(pred, gt, cfgs["eval"])
    print(report.summary())
    out = Path(args.out) if args.out else Path(args.pred).with_suffix(".eval.csv")
    try:
        report.to_csv(out)
        report.frames_to_csv(out.with_suffix(".frames.csv"))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {out}: {exc.strerror or exc}")
    return EXIT_OK


def _fail(code, message):
    print(f"error: {message}", file=sys.stderr)
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="heattrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--seed", type=int, help="override the random seed")
        p.add_argument("--out", required=out_help is not None, help=out_help or "report CSV path")

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    common(p, "output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="track cells through a directory of frame_*.cvol volumes")
    p.add_argument("frames", help="directory holding frame_%%04d.cvol files")
    common(p, "trajectory CSV path")
    p.add_argument("--no-registration", action="store_true", help="skip alignment (zero field)")
    p.add_argument("--no-finetune", action="store_true", help="cap alignment at the short budget")
    p.add_argument("--no-pairwise", action="store_true", help="detect from the current frame only")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted trajectories against ground truth")
    p.add_argument("pred", help="predicted trajectory CSV")
    p.add_argument("gt", help="ground-truth trajectory CSV")
    common(p, None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_INPUT, f"config: {exc}")
    except InputError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except track.PipelineError as exc:
        return _fail(EXIT_PIPELINE, f"pipeline failed at {exc}")


if __name__ == "__main__":
    sys.exit(main())
