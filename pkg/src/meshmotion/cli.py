"""Command-line pipeline: synth -> register -> bake -> track -> evaluate.

Every subcommand reads one JSON config (``--config``), applies ``--set key=value``
overrides (dotted keys, JSON values), and writes its outputs atomically: results are
assembled in a hidden temporary directory next to the target and renamed into place.

Exit codes: 0 success, 1 usage or invalid input, 2 missing input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive
from .attach import AttachmentMap, AttachThresholds, build_attachment
from .ingest import frame_name, load_and_normalize_mesh, load_observations, read_landmarks_jsonl, write_image_png
from .metrics import EvalReport, Trajectory, evaluate
from .register import Registration, RegistrationConfig, RegistrationError, fit_registration, registered_body, triangulate_joints
from .render import camera_look_at, load_cameras, render_preview, ring_cameras, save_cameras
from .synth import SynthSpec, bake_mesh_features, generate_sequence, write_dataset
from .track import TrackConfig, TrackError, track_sequence, write_track_outputs

logger = logging.getLogger("meshmotion")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3

# Video-generation prompt for users who bring their own footage. ACTION is replaced by
# the requested motion; the wording asks for a moving, evenly lit, unoccluded full body
# seen by a static camera, which is what the observation extractors need.
PROMPT_TEMPLATE = (
    "A documentary-style shot of a person ACTION.\n"
    "The person is ACTION with energy and large, clear movements.\n"
    "Plain light grey figure, realistic human proportions and motion.\n"
    "Full body visible in a wide shot, sharp and detailed.\n"
    "Even, bright, uniform lighting without dark shadows.\n"
    "Static camera, no zoom, no camera motion."
)


class UsageError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


@dataclass
class Paths:
    data: str = "data"  # dataset directory (observations, camera, views)
    output: str = "out"  # pipeline outputs (register/, bake/, track/, eval/)
    mesh: str | None = None  # input mesh; defaults to <data>/mesh.obj
    model: str | None = None  # body model archive; None builds the procedural model


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    prompt: str = PROMPT_TEMPLATE  # documentation passthrough, not used by any computation
    seed: int = 0
    resolution: tuple = (384, 640)
    smooth_window: int = 5
    alignment: str = "translation"  # evaluation alignment
    synth: SynthSpec = field(default_factory=SynthSpec)
    register: RegistrationConfig = field(default_factory=RegistrationConfig)
    attach: AttachThresholds = field(default_factory=AttachThresholds)
    track: TrackConfig = field(default_factory=TrackConfig)

    def __post_init__(self):
        if isinstance(self.paths, dict):
            self.paths = Paths(**self.paths)
        self.resolution = tuple(int(x) for x in self.resolution)
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise UsageError(f"resolution must be two positive integers, got {self.resolution}")
        if self.smooth_window < 1:
            raise UsageError("smooth_window must be >= 1")

    def effective(self) -> PipelineConfig:
        """Copy with the shared seed and resolution pushed into the module configs."""
        cfg = config_from_dict(config_to_dict(self))
        cfg.synth.seed = cfg.seed
        cfg.synth.resolution = tuple(cfg.resolution)
        cfg.track.seed = cfg.seed
        return cfg


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"config section {where or 'root'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise UsageError(f"unknown config keys in {where or 'root'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            value = _from_dict(type(current), {**asdict(current), **value}, f"{where}.{name}".strip("."))
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {where or 'root'}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    return _from_dict(PipelineConfig, data, "")


def config_to_dict(cfg: PipelineConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | None, overrides=(), seed: int | None = None, disable=()) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingInput(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {p} is not valid JSON: {exc}") from exc
    for item in overrides:
        apply_override(data, item)
    if seed is not None:
        data["seed"] = seed
    if disable:
        track = data.setdefault("track", {})
        track["disable"] = sorted(set(track.get("disable", [])) | set(disable))
    return config_from_dict(data)


@contextmanager
def atomic_dir(target: Path):
    """Yield a temporary directory that replaces ``target`` only if the block completes."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    try:
        yield tmp
        if target.exists():
            old = target.with_name(f".{target.name}.old-{os.getpid()}")
            os.replace(target, old)
            os.replace(tmp, target)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, target)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


# ---------------------------------------------------------------- shared loaders


def _require(path: Path, what: str) -> Path:
    if not Path(path).exists():
        raise MissingInput(f"{what} not found: {path}")
    return Path(path)


def _model(cfg: PipelineConfig):
    from .body import build_procedural_body, load_body_model

    if cfg.paths.model is None:
        return build_procedural_body()
    return load_body_model(_require(Path(cfg.paths.model), "body model archive"))


def _mesh(cfg: PipelineConfig):
    path = Path(cfg.paths.mesh) if cfg.paths.mesh else Path(cfg.paths.data) / "mesh.obj"
    return load_and_normalize_mesh(_require(path, "input mesh"))


def _out(cfg: PipelineConfig, name: str) -> Path:
    return Path(cfg.paths.output) / name


def _registration(cfg, model, mesh) -> Registration:
    path = _out(cfg, "register") / "registration.json"
    if not path.exists():
        logger.info("no registration at %s; running register first", path)
        cmd_register(cfg, model=model, mesh=mesh)
    return Registration.load(path)


def _attachment(cfg, model, mesh, reg) -> AttachmentMap:
    path = _out(cfg, "attach") / "attachment.zip"
    if path.exists():
        att = AttachmentMap.load(path)
        if att.num_vertices == len(mesh.vertices) and att.n_body_vertices == model.num_vertices:
            return att
        logger.info("stale attachment at %s; rebuilding", path)
    att = build_attachment(mesh, registered_body(model, reg), model, cfg.attach)
    with atomic_dir(path.parent) as tmp:
        att.save(tmp / path.name)
    return att


def _vertex_features(cfg, mesh) -> np.ndarray:
    path = _out(cfg, "bake") / "vertex_features.zip"
    if not path.exists():
        logger.info("no baked features at %s; running bake first", path)
        cmd_bake(cfg, mesh=mesh)
    return read_archive(path)[0]["features"]


# ---------------------------------------------------------------- subcommands


def cmd_make_model(cfg: PipelineConfig, **_) -> Path:
    from .body import build_procedural_body

    if cfg.paths.model is None:
        raise UsageError("make-model needs paths.model (the archive to write)")
    target = Path(cfg.paths.model)
    model = build_procedural_body()
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    try:
        model.save(tmp / target.name)
        if target.is_dir():
            shutil.rmtree(target)
        os.replace(tmp / target.name, target)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    return target


def cmd_synth(cfg: PipelineConfig, model=None, **_) -> Path:
    model = model or _model(cfg)
    seq = generate_sequence(cfg.synth, model)
    target = Path(cfg.paths.data)
    with atomic_dir(target) as tmp:
        write_dataset(seq, tmp)
    return target


def cmd_render_views(cfg: PipelineConfig, mesh=None, **_) -> Path:
    """Shaded renders of the input mesh from the registration ring, for an external
    landmark detector; writes cameras.json and one PNG per view."""
    mesh = mesh or _mesh(cfg)
    s = cfg.synth
    cams = ring_cameras(s.registration_azimuths, s.registration_elevations, 2.5, image_size=(s.registration_size,) * 2)
    target = _out(cfg, "views")
    with atomic_dir(target) as tmp:
        save_cameras(tmp / "cameras.json", cams)
        for i, cam in enumerate(cams):
            write_image_png(tmp / f"{frame_name(i)}.png", render_preview(mesh.vertices, mesh.faces, cam))
    return target


def cmd_register(cfg: PipelineConfig, model=None, mesh=None, **_) -> Path:
    model = model or _model(cfg)
    mesh = mesh or _mesh(cfg)
    views_dir = Path(cfg.paths.data) / "views" / "registration"
    cams = load_cameras(_require(views_dir / "cameras.json", "registration cameras"))
    frames = read_landmarks_jsonl(_require(views_dir / "landmarks.jsonl", "registration landmarks"))
    if len(frames) != len(cams):
        raise UsageError(f"{len(cams)} registration cameras but {len(frames)} landmark frames")
    joints = triangulate_joints(list(zip(cams, frames)))
    result = fit_registration(mesh, joints, model, cfg.register)
    reg = result.registration
    body = registered_body(model, reg)
    target = _out(cfg, "register")
    with atomic_dir(target) as tmp:
        reg.save(tmp / "registration.json")
        (tmp / "joints.json").write_text(json.dumps({"positions": joints.positions.tolist(), "confidence": joints.confidence.tolist()}))
        cam = camera_look_at((0.0, 0.1, 2.5), image_size=(512, 512))
        write_image_png(tmp / "preview_mesh.png", render_preview(mesh.vertices, mesh.faces, cam))
        write_image_png(tmp / "preview_body.png", render_preview(body.vertices, model.faces, cam, color=(0.55, 0.7, 0.9)))
        _write_history(tmp / "history.csv", result.history)
    return target


def cmd_bake(cfg: PipelineConfig, mesh=None, **_) -> Path:
    mesh = mesh or _mesh(cfg)
    bake_dir = Path(cfg.paths.data) / "views" / "bake"
    cams = load_cameras(_require(bake_dir / "cameras.json", "bake cameras"))
    from .archive import read_raw_array

    images = [read_raw_array(_require(bake_dir / "features" / f"{frame_name(i)}.f32", "bake feature image")).astype(np.float64) for i in range(len(cams))]
    feats = bake_mesh_features(mesh.vertices, mesh.faces, cams, images)
    target = _out(cfg, "bake")
    with atomic_dir(target) as tmp:
        write_archive(tmp / "vertex_features.zip", {"features": feats}, meta={"kind": "vertex-features"}, dtypes={"features": "float64"})
    return target


def cmd_track(cfg: PipelineConfig, model=None, mesh=None, **_) -> Path:
    model = model or _model(cfg)
    mesh = mesh or _mesh(cfg)
    data = Path(cfg.paths.data)
    camera = load_cameras(_require(data / "camera.json", "video camera"))[0]
    obs = load_observations(_require(data, "observation directory"), smooth_window=cfg.smooth_window)
    reg = _registration(cfg, model, mesh)
    att = _attachment(cfg, model, mesh, reg)
    feats = _vertex_features(cfg, mesh)
    result = track_sequence(mesh.faces, att, model, reg, obs, feats, camera, cfg.track)
    target = _out(cfg, "track")
    with atomic_dir(target) as tmp:
        write_track_outputs(result, att, model, mesh.faces, tmp)
        (tmp / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1))
    logger.info("tracked %d frames in %.1f s -> %s", len(obs), result.seconds, target)
    return target


def cmd_evaluate(cfg: PipelineConfig, pred: str | None = None, gt: str | None = None, **_) -> EvalReport:
    pred_dir = Path(pred) if pred else _out(cfg, "track")
    gt_dir = Path(gt) if gt else Path(cfg.paths.data) / "gt"
    p = Trajectory.load(_require(pred_dir / "trajectory.zip", "predicted trajectory"))
    g = Trajectory.load(_require(gt_dir / "trajectory.zip", "ground-truth trajectory"))
    report = evaluate(p.joints, g.joints, p.vertices, g.vertices, cfg.alignment)
    target = _out(cfg, "eval")
    with atomic_dir(target) as tmp:
        report.to_json(tmp / "report.json")
        report.to_csv(tmp / "report.csv")
    print(f"MPJPE {report.mpjpe:.6g}  PVE {report.pve:.6g}  Accel {report.accel:.6g}  ({cfg.alignment} alignment)")
    return report


def cmd_prompt(cfg: PipelineConfig, action: str | None = None, **_) -> str:
    text = cfg.prompt if action is None else cfg.prompt.replace("ACTION", action)
    print(text)
    return text


def cmd_config(cfg: PipelineConfig, **_) -> dict:
    d = config_to_dict(cfg.effective())
    print(json.dumps(d, indent=1))
    return d


def _write_history(path: Path, history) -> None:
    import csv

    keys = sorted({k for h in history for k in h})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, restval="")
        w.writeheader()
        w.writerows(history)


COMMANDS = {
    "make-model": cmd_make_model,
    "synth": cmd_synth,
    "render-views": cmd_render_views,
    "register": cmd_register,
    "bake": cmd_bake,
    "track": cmd_track,
    "evaluate": cmd_evaluate,
    "prompt": cmd_prompt,
    "config": cmd_config,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value (dotted key, JSON value)")
    common.add_argument("--seed", type=int, help="global seed (synthetic noise and tracking batches)")
    common.add_argument("--dry-run", action="store_true", help="validate the config and inputs, then exit")
    common.add_argument("--disable", action="append", default=[], metavar="TERM", help="switch off a tracking loss term (ablation)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="meshmotion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "evaluate":
            sp.add_argument("--pred", help="directory holding the predicted trajectory.zip")
            sp.add_argument("--gt", help="directory holding the ground-truth trajectory.zip")
        if name == "prompt":
            sp.add_argument("--action", help="text substituted for the ACTION placeholder")
        if name == "synth":
            sp.add_argument("--frames", type=int, help="shorthand for --set synth.frames=N")
    return parser


def _dry_run_checks(cfg: PipelineConfig, command: str) -> None:
    needs_model = command in ("synth", "register", "track")
    if needs_model and cfg.paths.model is not None:
        _require(Path(cfg.paths.model), "body model archive")
    data = Path(cfg.paths.data)
    if command in ("register", "bake", "track", "render-views"):
        _require(Path(cfg.paths.mesh) if cfg.paths.mesh else data / "mesh.obj", "input mesh")
    if command == "register":
        _require(data / "views" / "registration" / "cameras.json", "registration cameras")
    if command == "track":
        _require(data / "camera.json", "video camera")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if getattr(args, "frames", None) is not None:
            overrides.append(f"synth.frames={args.frames}")
        cfg = load_config(args.config, overrides, args.seed, args.disable).effective()
        if args.dry_run:
            _dry_run_checks(cfg, args.command)
            print(f"{args.command}: config valid (dry run)")
            return EXIT_OK
        extra = {k: getattr(args, k) for k in ("pred", "gt", "action") if hasattr(args, k)}
        COMMANDS[args.command](cfg, **extra)
        return EXIT_OK
    except FileNotFoundError as exc:
        print(f"meshmotion: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrackError, RegistrationError, FloatingPointError) as exc:
        if isinstance(exc, FloatingPointError) or "non-finite" in str(exc):
            print(f"meshmotion: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"meshmotion: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"meshmotion: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
