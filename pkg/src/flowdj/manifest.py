"""Run manifests: atomic output directories with integrity digests.

Every CLI command materialises its outputs in a temporary sibling directory,
writes a manifest listing each file with its sha256, and renames the whole
directory into place, so a run leaves either a complete manifest or nothing.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import subprocess
from datetime import datetime, timezone

from .errors import IntegrityFailure, InvalidArgument

MANIFEST_NAME = "manifest.json"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=cwd, capture_output=True, text=True, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "untracked"


def write_run_dir(out_dir, command: str, config: dict, seeds, files: dict) -> None:
    """Create out_dir atomically with the given {name: text} files plus manifest."""
    out_dir = os.fspath(out_dir)
    if os.path.exists(out_dir):
        raise InvalidArgument(f"output directory {out_dir} already exists")
    started = datetime.now(timezone.utc).isoformat()
    tmp = out_dir.rstrip("/") + ".partial"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    try:
        entries = []
        for name, text in files.items():
            path = os.path.join(tmp, name)
            with open(path, "w", encoding="utf-8", newline="\n") as f:
                f.write(text)
            entries.append({"path": name, "sha256": file_sha256(path)})
        manifest = {
            "command": command,
            "config": config,
            "seeds": list(seeds),
            "git": git_describe(),
            "started_at": started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "outputs": entries,
        }
        with open(os.path.join(tmp, MANIFEST_NAME), "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)
            f.write("\n")
        os.rename(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_manifest(run_dir) -> dict:
    path = os.path.join(os.fspath(run_dir), MANIFEST_NAME)
    if not os.path.exists(path):
        raise InvalidArgument(f"no {MANIFEST_NAME} in {run_dir}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def verify_run_dir(run_dir) -> dict:
    """Check every manifest-listed file's digest; raise IntegrityFailure naming offenders."""
    run_dir = os.fspath(run_dir)
    manifest = load_manifest(run_dir)
    for entry in manifest.get("outputs", []):
        path = os.path.join(run_dir, entry["path"])
        if not os.path.exists(path):
            raise IntegrityFailure(f"missing output file {path}")
        if file_sha256(path) != entry["sha256"]:
            raise IntegrityFailure(f"digest mismatch for {path}")
    return manifest
