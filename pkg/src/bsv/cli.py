"""Command line entry point: ``bsv simulate | register | volumes | evaluate | generate``.

Every subcommand reads an optional INI config (``--config``); command line
flags override it. Exit codes identify the failing stage, see ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import __version__
from .arap import RegistrationConfig, write_energy_csv
from .io import (load_cloud, load_landmarks, load_mesh, load_transform, save_cloud, save_depth,
                 save_label_grid, save_landmarks, save_mesh, save_transform)
from .labels import landmarks_from_labels
from .metrics import SCHEMA, aggregate, write_aggregate_csv, write_report_csv, write_report_json
from .pipeline import (StageError, box_subject, box_template, build_report, bundled_subject,
                       estimate_volumes, fit_template, ground_truth_volumes, humanoid_template,
                       prepare_target, run_seed, run_subject, simulate_scan, view_cloud)
from .scan import DEFAULT_CAMERA_HEIGHT, DEFAULT_SEPARATION, ErrorCondition, NoiseModel

logger = logging.getLogger("bsv")

CAPTURE_SCHEMA = "bsv.capture/1"

EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "input": 3,
    "simulate": 4,
    "label": 5,
    "clean": 6,
    "register": 7,
    "volumes": 8,
    "ground-truth": 8,
    "evaluate": 9,
}

BOXES = {"box1": (0.52, 0.589, 0.558), "box2": (0.208, 0.204, 1.038)}


class CliError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------- config

def load_config(path: Optional[str]) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path:
        if not os.path.isfile(path):
            raise CliError("input", "config file %s not found" % path)
        cfg.read(path)
    return cfg


def _get(cfg, section, key, fallback=None, cast=str):
    if not cfg.has_option(section, key):
        return fallback
    raw = cfg.get(section, key).strip()
    if raw == "":
        return fallback
    try:
        return cast(raw)
    except ValueError as exc:
        raise CliError("usage", "[%s] %s: %s" % (section, key, exc))


def registration_config(cfg) -> RegistrationConfig:
    kw = {}
    for key, cast in (("per_cell_weight", float), ("regularization_alpha", float),
                      ("inner_sweeps", int), ("correspondence_weight", float),
                      ("max_distance", float), ("distortion_limit", float)):
        v = _get(cfg, "registration", key, cast=cast)
        if v is not None:
            kw[key] = v
    sched = _get(cfg, "registration", "schedule")
    if sched:
        kw["schedule"] = RegistrationConfig.parse_schedule(sched)
    try:
        return RegistrationConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise CliError("usage", "registration config: %s" % exc)


def noise_model(cfg) -> NoiseModel:
    return NoiseModel(depth_sigma_at_1m=_get(cfg, "noise", "depth_sigma_at_1m", 0.005, float))


def _condition(args, cfg) -> ErrorCondition:
    raw = args.condition or _get(cfg, "capture", "condition", "noer")
    try:
        return ErrorCondition.parse(raw)
    except ValueError as exc:
        raise CliError("usage", str(exc))


def _seed(args, cfg, required=False) -> Optional[int]:
    seed = args.seed if args.seed is not None else _get(cfg, "run", "seed", None, int)
    if seed is None and required:
        raise CliError("usage", "a seed is required (--seed or [run] seed)")
    return seed


def _out(args, cfg) -> str:
    out = args.out or _get(cfg, "paths", "out")
    if not out:
        raise CliError("usage", "an output directory is required (--out or [paths] out)")
    os.makedirs(out, exist_ok=True)
    return out


def _path(args_value, cfg, key, required=True):
    p = args_value or _get(cfg, "paths", key)
    if p is None:
        if required:
            raise CliError("usage", "missing path: [paths] %s" % key)
        return None
    if not os.path.exists(p):
        raise CliError("input", "%s does not exist" % p)
    return p


def _load_mesh(path):
    try:
        return load_mesh(path)
    except (OSError, ValueError) as exc:
        raise CliError("input", "cannot read mesh %s: %s" % (path, exc))


def _staged(stage, fn, *a, **k):
    try:
        return fn(*a, **k)
    except (CliError, StageError):
        raise
    except Exception as exc:
        raise CliError(stage, "%s: %s" % (type(exc).__name__, exc)) from exc


# ---------------------------------------------------------------- subcommands

def cmd_generate(args, cfg):
    """Write one of the bundled shapes (subject, template or a benchmark box)."""
    out = _out(args, cfg)
    if args.shape == "humanoid":
        mesh, _, lm = bundled_subject()
        save_landmarks(os.path.join(out, "landmarks3d.json"), lm)
    elif args.shape == "template":
        mesh = humanoid_template()
    elif args.shape == "cube":
        mesh = box_template()
    else:
        mesh = box_subject(BOXES[args.shape])
    path = os.path.join(out, args.shape + ".ply")
    save_mesh(path, mesh)
    print(path)
    return 0


def cmd_simulate(args, cfg):
    cond = _condition(args, cfg)
    seed = _seed(args, cfg, required=True)
    out = _out(args, cfg)
    mesh = _load_mesh(_path(args.mesh, cfg, "ground_truth"))
    lm_path = _path(None, cfg, "landmarks", required=False)
    lm3d = None
    if lm_path:
        lm3d = {k: np.asarray(v) for k, v in load_landmarks(lm_path).items()}
    elif mesh.labels is not None:
        lm3d = _staged("label", landmarks_from_labels, mesh)
    scan = _staged("simulate", simulate_scan, mesh, cond, seed,
                   separation=_get(cfg, "capture", "separation", DEFAULT_SEPARATION, float),
                   camera_height=_get(cfg, "capture", "camera_height", DEFAULT_CAMERA_HEIGHT, float),
                   noise=noise_model(cfg), landmarks3d=lm3d,
                   label_errors=_get(cfg, "capture", "label_errors", "yes") in ("yes", "true", "1"))
    for name, view in scan.views():
        cloud = _staged("label", view_cloud, view, name)
        save_cloud(os.path.join(out, name + "_cloud.ply"), cloud)
        save_depth(os.path.join(out, name + "_depth.bin"), view.depth, view.camera)
        save_transform(os.path.join(out, name + "_transform.json"), view.transform)
        if view.raw_mask is not None:
            save_label_grid(os.path.join(out, name + "_parts.bin"), view.raw_mask)
        if view.landmarks is not None:
            save_landmarks(os.path.join(out, name + "_landmarks.json"), view.landmarks)
    with open(os.path.join(out, "capture.json"), "w") as fh:
        json.dump({"schema": CAPTURE_SCHEMA, "synthetic": True, "condition": cond.display,
                   "seed": seed}, fh, indent=1)
    return 0


def _clean_enabled(cfg, capture_dir) -> bool:
    mode = (_get(cfg, "clean", "enabled", "auto") or "auto").lower()
    if mode in ("yes", "true", "1", "on"):
        return True
    if mode in ("no", "false", "0", "off"):
        return False
    if mode != "auto":
        raise CliError("usage", "[clean] enabled must be auto, yes or no")
    meta = os.path.join(capture_dir, "capture.json")
    if os.path.isfile(meta):
        with open(meta) as fh:
            return not json.load(fh).get("synthetic", False)
    return True


def cmd_register(args, cfg):
    src = args.clouds or _get(cfg, "paths", "clouds")
    if not src or not os.path.isdir(src):
        raise CliError("input", "capture directory %r not found" % src)
    out = _out(args, cfg)
    try:
        views = [load_cloud(os.path.join(src, n + "_cloud.ply")) for n in ("front", "back")]
        tfs = [load_transform(os.path.join(src, n + "_transform.json")) for n in ("front", "back")]
    except (OSError, ValueError, KeyError) as exc:
        raise CliError("input", "cannot read capture: %s" % exc)
    template_path = _path(args.template, cfg, "template", required=False)
    if template_path:
        template = _load_mesh(template_path)
    elif views[0].labels is None:
        template = box_template()
    else:
        template = humanoid_template()
    target = _staged("clean", prepare_target, views[0], views[1], tfs[0], tfs[1],
                     _get(cfg, "clean", "neighbors", 600, int), _get(cfg, "clean", "std_ratio", 0.05, float),
                     _clean_enabled(cfg, src))
    save_cloud(os.path.join(out, "merged_cloud.ply"), target)
    fit = _staged("register", fit_template, template, target, registration_config(cfg))
    save_mesh(os.path.join(out, "aligned_template.ply"), fit.aligned_template)
    save_mesh(os.path.join(out, "fitted.ply"), fit.mesh)
    write_energy_csv(os.path.join(out, "energy.csv"), fit.log)
    return 0


def cmd_volumes(args, cfg):
    out = _out(args, cfg)
    fitted = _load_mesh(_path(args.fitted, cfg, "fitted"))
    gt_path = _path(args.ground_truth, cfg, "ground_truth", required=False)
    gt = _staged("ground-truth", ground_truth_volumes, _load_mesh(gt_path)) if gt_path else None
    est = _staged("volumes", estimate_volumes, fitted)
    mass = args.mass if args.mass is not None else _get(cfg, "report", "mass", None, float)
    report = build_report(est, gt, _condition(args, cfg), _get(cfg, "report", "subject", ""),
                          _seed(args, cfg), mass)
    write_report_json(os.path.join(out, "volumes.json"), report)
    write_report_csv(os.path.join(out, "volumes.csv"), report)
    failed = [e.name for e in report.entries() if e.error]
    for e in report.entries():
        print("%-14s %s" % (e.name, e.error or "%.6f m3%s" % (
            e.volume, "" if e.rve is None else "  RVE %.2f%%" % e.rve)))
    if failed:
        logger.warning("segments failed: %s", ", ".join(failed))
    return 0


def _subjects(cfg):
    names = [s.strip() for s in (_get(cfg, "evaluate", "subjects", "bundled") or "bundled").split(",") if s.strip()]
    for name in names:
        if name == "bundled":
            mesh, _, lm = bundled_subject()
            yield name, mesh, lm
        elif name in BOXES:
            yield name, box_subject(BOXES[name]), None
        else:
            mesh = _load_mesh(name)
            lm = landmarks_from_labels(mesh) if mesh.labels is not None else None
            yield os.path.splitext(os.path.basename(name))[0], mesh, lm


def cmd_evaluate(args, cfg):
    out = _out(args, cfg)
    seed = _seed(args, cfg, required=True)
    conds = _get(cfg, "evaluate", "conditions", "cali,l515,l5ca,noer")
    conds = [ErrorCondition.parse(c) for c in conds.split(",")] if not args.condition else [_condition(args, cfg)]
    repeats = _get(cfg, "evaluate", "repeats", 1, int)
    config = registration_config(cfg)
    clean = (_get(cfg, "clean", "enabled", "auto") or "auto").lower() in ("yes", "true", "1", "on")
    reports, failures = [], []
    for name, mesh, lm in _subjects(cfg):
        template = humanoid_template() if mesh.labels is not None else box_template()
        for cond in conds:
            for rep in range(repeats):
                s = run_seed(seed, name, cond.value, rep)
                try:
                    res = run_subject(mesh, template, cond, s, config, landmarks3d=lm, clean=clean,
                                      name=name, noise=noise_model(cfg),
                                      sor_neighbors=_get(cfg, "clean", "neighbors", 600, int),
                                      sor_ratio=_get(cfg, "clean", "std_ratio", 0.05, float))
                except StageError as exc:
                    failures.append((name, cond, rep, str(exc)))
                    logger.error("%s/%s/%d failed: %s", name, cond.display, rep, exc)
                    continue
                reports.append(res.report)
                write_report_json(os.path.join(out, "%s_%s_%d.json" % (name, cond.value, rep)), res.report)
                logger.info("%s %s #%d whole-body RVE %.2f%%", name, cond.display, rep,
                            res.report.whole_body.rve)
    if reports:
        write_aggregate_csv(os.path.join(out, "aggregate.csv"), aggregate(reports))
    if failures:
        with open(os.path.join(out, "failures.json"), "w") as fh:
            json.dump([{"subject": n, "condition": c.display, "repeat": r, "error": e}
                       for n, c, r, e in failures], fh, indent=1)
        raise CliError("evaluate", "%d of %d runs failed" % (len(failures), len(failures) + len(reports)))
    return 0


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bsv", description="Two-view body volume estimation.")
    p.add_argument("--version", action="version",
                   version="bsv %s (report %s, capture %s)" % (__version__, SCHEMA, CAPTURE_SCHEMA))
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with [paths], [capture], [registration], ... sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--condition", choices=[c.value for c in ErrorCondition])
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("generate", help="write a bundled mesh"))
    g.add_argument("shape", choices=["humanoid", "template", "cube"] + sorted(BOXES))
    s = common(sub.add_parser("simulate", help="render front/back captures of a mesh"))
    s.add_argument("--mesh", help="ground-truth mesh (overrides [paths] ground_truth)")
    r = common(sub.add_parser("register", help="clean, merge and fit the template"))
    r.add_argument("--clouds", help="capture directory written by simulate")
    r.add_argument("--template")
    v = common(sub.add_parser("volumes", help="whole-body and segment volumes of a fitted mesh"))
    v.add_argument("--fitted")
    v.add_argument("--ground-truth", dest="ground_truth")
    v.add_argument("--mass", type=float, help="real body mass in kg, for the mass error")
    common(sub.add_parser("evaluate", help="subjects x conditions sweep with aggregate table"))
    return p


COMMANDS = {"generate": cmd_generate, "simulate": cmd_simulate, "register": cmd_register,
            "volumes": cmd_volumes, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except StageError as exc:
        print("error [%s]: %s" % (exc.stage, exc.error), file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)
    except CliError as exc:
        print("error [%s]: %s" % (exc.stage, exc), file=sys.stderr)
        return EXIT_CODES.get(exc.stage, 1)


if __name__ == "__main__":
    sys.exit(main())
