"""Checkpoints: a text manifest plus one MAMS blob per parameter group.

Directory layout::

    manifest.txt      key = value lines (values JSON-encoded)
    backbone.mams     parameters of the group in order, then BN running buffers
    expansion.mams
    momentum.mams     (only when the model has a momentum branch)
    fusion.mams       (only when fusion is enabled)
    head.mams
"""

from __future__ import annotations

import json
import os
from typing import Dict, Optional

import numpy as np

from . import mamsio
from .errors import InputError
from .model import GROUPS, ModelConfig, ModelGraph, build_model

MANIFEST = "manifest.txt"


def write_manifest(path, fields: Dict) -> None:
    with open(path, "w") as fh:
        for key, value in fields.items():
            fh.write(f"{key} = {json.dumps(value, sort_keys=True)}\n")


def read_manifest(path) -> Dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = json.loads(value)
    return out


def save_checkpoint(model: ModelGraph, directory, step: int = 0, m: Optional[float] = None,
                    seed: Optional[int] = None, extra: Optional[Dict] = None) -> None:
    os.makedirs(directory, exist_ok=True)
    fields = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    fields.update({"step": step, "m": m, "seed": seed})
    groups = model.groups()
    fields["groups"] = [name for name in GROUPS if name in groups]
    if extra:
        fields.update(extra)
    write_manifest(os.path.join(directory, MANIFEST), fields)
    for name, group in groups.items():
        arrays = [p.data for p in group.params] + list(group.buffers)
        mamsio.save(os.path.join(directory, f"{name}.mams"), arrays)


def load_checkpoint(directory):
    """Rebuild the model from the manifest and restore every group. Returns (model, manifest)."""
    manifest = read_manifest(os.path.join(directory, MANIFEST))
    cfg_fields = {k[len("model."):]: v for k, v in manifest.items() if k.startswith("model.")}
    model = build_model(ModelConfig(**cfg_fields), np.random.default_rng(0))
    groups = model.groups()
    if sorted(groups) != sorted(manifest.get("groups", [])):
        raise InputError(f"{directory}: manifest lists groups {manifest.get('groups')}, model has {sorted(groups)}")
    for name, group in groups.items():
        arrays = mamsio.load_all(os.path.join(directory, f"{name}.mams"))
        targets = [p.data for p in group.params] + list(group.buffers)
        if len(arrays) != len(targets):
            raise InputError(f"{name}.mams holds {len(arrays)} tensors, expected {len(targets)}")
        for dst, src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise InputError(f"{name}.mams: shape {src.shape} does not match model {dst.shape}")
            dst[...] = src
    return model, manifest
