"""
Run manifests: what a chain of pipeline commands produced and from which config.

Artifact paths are stored relative to the run directory. Wall-clock times
live in their own `timestamps` section so that two runs of the same config
produce manifests that agree everywhere else.
"""

from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from shm.nonlin.util import MalformedFile, read_json, write_json

MANIFEST_VERSION = "run-manifest/1"
MANIFEST_NAME = "manifest.json"


class MalformedManifest(ValueError):
    pass


def package_version():
    try:
        return version("shm-nonlin")
    except PackageNotFoundError:
        return "unknown"


class RunManifest:
    """Record of one run directory.

    Attributes:
        root: Run directory
        config_hash: Hash of the experiment config that produced the run
        tool_version: Version of this package
        seeds: Task name → seed
        artifacts: Stage → key → path relative to `root` (or a list of them)
        results: Stage → small JSON-able results (chosen lag, thresholds, ...)
        warnings: Non-fatal problems flagged during the run
        timestamps: Stage → completion time (ISO 8601, UTC)
    """

    def __init__(self, root, config_hash, tool_version=None, seeds=None, artifacts=None,
                 results=None, warnings=None, timestamps=None):
        self.root = Path(root)
        self.config_hash = config_hash
        self.tool_version = tool_version or package_version()
        self.seeds = dict(seeds or {})
        self.artifacts = dict(artifacts or {})
        self.results = dict(results or {})
        self.warnings = list(warnings or [])
        self.timestamps = dict(timestamps or {})

    def __repr__(self):
        return f"{__class__.__name__}({str(self.root)!r}, stages={sorted(self.artifacts)})"

    @property
    def path(self):
        return self.root / MANIFEST_NAME

    def relative(self, path):
        return Path(path).relative_to(self.root).as_posix()

    def resolve(self, rel):
        return self.root / rel

    def add(self, stage, key, path):
        "Register an artifact (a path or a list of paths) under `stage`/`key`."
        if isinstance(path, (list, tuple)):
            value = [self.relative(p) for p in path]
        else:
            value = self.relative(path)
        self.artifacts.setdefault(stage, {})[key] = value

    def get(self, stage, key):
        "Absolute path(s) of an artifact; FileNotFoundError if it was never produced."
        try:
            value = self.artifacts[stage][key]
        except KeyError:
            raise FileNotFoundError(
                f"{self.path}: no {stage!r} artifact {key!r}; run the {stage!r} stage first"
            ) from None
        if isinstance(value, list):
            return [self.resolve(v) for v in value]
        return self.resolve(value)

    def stamp(self, stage):
        self.timestamps[stage] = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def warn(self, stage, message):
        self.warnings.append({"stage": stage, "message": message})

    def all_paths(self):
        for stage, entries in self.artifacts.items():
            for key, value in entries.items():
                for rel in value if isinstance(value, list) else [value]:
                    yield stage, key, rel

    def check(self):
        "Raise `MalformedManifest` for the first listed artifact that does not exist."
        for stage, key, rel in self.all_paths():
            if not self.resolve(rel).exists():
                raise MalformedManifest(f"{self.path}: {stage}/{key} lists missing file {rel!r}")
        return self

    def to_dict(self):
        return dict(
            version=MANIFEST_VERSION,
            config_hash=self.config_hash,
            tool_version=self.tool_version,
            seeds=self.seeds,
            artifacts=self.artifacts,
            results=self.results,
            warnings=self.warnings,
            timestamps=self.timestamps,
        )

    def save(self):
        self.root.mkdir(parents=True, exist_ok=True)
        write_json(self.path, self.to_dict())
        return self.path


def load_manifest(path):
    """Read a manifest file (or the manifest of a run directory).

    Raises:
        MalformedManifest: If the file is unreadable or incomplete
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise MalformedManifest(f"{path}: no such manifest")
    try:
        d = read_json(path)
    except MalformedFile as e:
        raise MalformedManifest(str(e)) from e
    if not isinstance(d, dict) or d.get("version") != MANIFEST_VERSION:
        found = d.get("version") if isinstance(d, dict) else None
        raise MalformedManifest(f"{path}: manifest version {found!r}, expected {MANIFEST_VERSION!r}")
    try:
        return RunManifest(
            path.parent,
            d["config_hash"],
            tool_version=d["tool_version"],
            seeds=d["seeds"],
            artifacts=d["artifacts"],
            results=d["results"],
            warnings=d["warnings"],
            timestamps=d["timestamps"],
        )
    except KeyError as e:
        raise MalformedManifest(f"{path}: missing field {e}") from e


def open_manifest(root, config_hash):
    """Continue the manifest in `root`, or start a new one.

    Raises:
        MalformedManifest: If `root` holds a run of a different config
    """
    root = Path(root)
    if not (root / MANIFEST_NAME).exists():
        return RunManifest(root, config_hash)
    m = load_manifest(root)
    if m.config_hash != config_hash:
        raise MalformedManifest(
            f"{m.path} was produced by config {m.config_hash[:12]}, not {config_hash[:12]}; "
            f"use a fresh output directory"
        )
    return m
