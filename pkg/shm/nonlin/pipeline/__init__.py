from shm.nonlin.pipeline.commands import cmd_analyze, cmd_report, cmd_simulate, cmd_train_baseline
from shm.nonlin.pipeline.config import ConfigError, ExperimentConfig, StateSpec, load_config, parse_config
from shm.nonlin.pipeline.manifest import MalformedManifest, RunManifest, load_manifest

__all__ = [
    "cmd_analyze",
    "cmd_report",
    "cmd_simulate",
    "cmd_train_baseline",
    "ConfigError",
    "ExperimentConfig",
    "StateSpec",
    "load_config",
    "parse_config",
    "MalformedManifest",
    "RunManifest",
    "load_manifest",
]
