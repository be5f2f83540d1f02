"""Run manifest: one JSON file per output directory recording the config
snapshot, artifact paths with their formats, per-stage wall-clock, and the
tool version.  Loading re-checks that every referenced artifact exists and
still parses, so a manifest is a liveness certificate for its directory.
"""

import json
import os

from . import __version__
from .datasynth import load_container
from .nncore import load_checkpoint
from .recognition import REPORT_HEADER

MANIFEST_NAME = "manifest.json"

ARTIFACT_KINDS = ("container", "checkpoint", "report", "losslog", "config")


class ManifestError(ValueError):
    pass


def new_manifest(cfg_lines):
    return {
        "tool": "occludiff",
        "version": __version__,
        "config": list(cfg_lines),
        "stages": {},
        "artifacts": {},
    }


def record_stage(man, stage, seconds):
    man["stages"][stage] = {"seconds": round(float(seconds), 3)}


def add_artifact(man, name, path, kind, base_dir):
    if kind not in ARTIFACT_KINDS:
        raise ManifestError(f"unknown artifact kind {kind!r}; expected {ARTIFACT_KINDS}")
    rel = os.path.relpath(path, base_dir)
    man["artifacts"][name] = {"path": rel, "kind": kind}


def save_manifest(out_dir, man):
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _check_artifact(path, kind):
    if kind == "container":
        load_container(path)
    elif kind == "checkpoint":
        load_checkpoint(path)
    elif kind == "report":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
        if header != REPORT_HEADER:
            raise ManifestError(f"{path}: report header {header!r} != {REPORT_HEADER!r}")
    elif kind == "losslog":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
        if header != "epoch,mean_loss":
            raise ManifestError(f"{path}: loss log header {header!r} != 'epoch,mean_loss'")
    elif kind == "config":
        with open(path, "r", encoding="utf-8") as fh:
            fh.read()


def load_manifest(out_dir, check=True):
    """Read the manifest; with check=True every artifact must exist and pass
    its format's integrity check."""
    path = os.path.join(out_dir, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            man = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    for key in ("tool", "version", "config", "stages", "artifacts"):
        if key not in man:
            raise ManifestError(f"{path}: missing field '{key}'")
    if check:
        for name, entry in man["artifacts"].items():
            apath = os.path.join(out_dir, entry["path"])
            if not os.path.exists(apath):
                raise ManifestError(f"artifact '{name}' missing: {apath}")
            try:
                _check_artifact(apath, entry["kind"])
            except ManifestError:
                raise
            except Exception as exc:
                raise ManifestError(f"artifact '{name}' failed integrity check: {exc}") from exc
    return man


def load_or_new_manifest(out_dir, cfg_lines):
    """Reuse the directory's manifest when present (without artifact checks,
    since a stage may be about to overwrite things); otherwise start fresh."""
    try:
        man = load_manifest(out_dir, check=False)
    except ManifestError:
        return new_manifest(cfg_lines)
    man["config"] = list(cfg_lines)
    man["version"] = __version__
    return man
