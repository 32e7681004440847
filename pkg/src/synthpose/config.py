"""Shared run configuration: one file, flag overrides, resolved resources."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .body import KinematicTree, default_tree, load_tree
from .camera import CameraDistribution, default_distribution, load_distribution
from .engine import (
    ActionCatalog,
    SubjectCatalog,
    default_actions,
    default_subjects,
    load_actions,
    load_subjects,
)
from .fitting import FitConfig
from .occlusion import default_scene, load_scene
from .quality import Thresholds

CONFIG_FORMAT = "synthpose-config"

_PATH_KEYS = ("tree", "scene", "subjects", "actions", "camera_distribution")


@dataclass
class Config:
    """Run configuration; null paths fall back to the built-in defaults."""

    seed: int = 0
    paths: dict = field(default_factory=dict)
    thresholds: Thresholds = field(default_factory=Thresholds)
    fit: FitConfig = field(default_factory=FitConfig)
    pipeline: dict = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def load(cls, path: str | Path | None) -> "Config":
        """Read a config file; every referenced file must exist at load time."""
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        doc = json.loads(path.read_text())
        if doc.get("format") != CONFIG_FORMAT:
            raise ValueError(f"{path}: not a {CONFIG_FORMAT} file")
        paths = doc.get("paths", {})
        base = path.parent
        resolved = {}
        for key, value in paths.items():
            if value is None:
                continue
            target = Path(value)
            if not target.is_absolute():
                target = base / target
            if key in _PATH_KEYS and not target.exists():
                raise FileNotFoundError(f"config references missing {key} file: {target}")
            resolved[key] = str(target)
        return cls(
            seed=int(doc.get("seed", 0)),
            paths=resolved,
            thresholds=Thresholds.from_dict(doc["thresholds"]) if "thresholds" in doc
            else Thresholds(),
            fit=FitConfig.from_dict(doc["fit"]) if "fit" in doc else FitConfig(),
            pipeline=dict(doc.get("pipeline", {})),
            source=str(path),
        )

    # resource resolution: a named file when configured, else the built-in

    def tree(self) -> KinematicTree:
        if "tree" in self.paths:
            return load_tree(self.paths["tree"])
        return default_tree()

    def scene(self) -> list:
        if "scene" in self.paths:
            return load_scene(self.paths["scene"])
        return default_scene()

    def subjects(self) -> SubjectCatalog:
        if "subjects" in self.paths:
            return load_subjects(self.paths["subjects"])
        return default_subjects()

    def actions(self, joint_count: int = 24) -> ActionCatalog:
        if "actions" in self.paths:
            return load_actions(self.paths["actions"])
        return default_actions(joint_count)

    def camera_distribution(self) -> CameraDistribution:
        if "camera_distribution" in self.paths:
            return load_distribution(self.paths["camera_distribution"])
        return default_distribution()


def write_default_config(path: str | Path) -> None:
    """Emit a template config documenting every knob at its default."""
    doc = {
        "format": CONFIG_FORMAT,
        "version": 1,
        "seed": 0,
        "paths": {key: None for key in _PATH_KEYS} | {"out": "out"},
        "thresholds": Thresholds().to_dict(),
        "fit": FitConfig().to_dict(),
        "pipeline": {
            "sequences": 10,
            "gen_workers": 1,
            "fit_workers": 1,
            "max_attempts": 3,
            "lease_seconds": 30.0,
            "nack_probability": 0.0,
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
