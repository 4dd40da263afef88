"""Named-tensor checkpoints: one ``.npy`` file per tensor plus a JSON manifest
carrying shape, dtype and a content hash for every tensor."""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

CHECKPOINT_FORMAT = 1
MANIFEST = "manifest.json"


class CheckpointError(RuntimeError):
    """Missing, corrupt, or architecture-incompatible checkpoint."""


def tensor_hash(arr: np.ndarray) -> str:
    arr = np.asarray(arr, order="C")  # keeps 0-d tensors 0-d
    h = hashlib.sha256()
    h.update(f"{arr.dtype.str}|{arr.shape}|".encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class ModelCheckpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind: str, config: dict, module: torch.nn.Module) -> "ModelCheckpoint":
        tensors = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(kind, dict(config), tensors)

    def load_into(self, module: torch.nn.Module) -> None:
        expected = module.state_dict()
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise CheckpointError(f"tensor names differ from architecture (missing={missing}, unexpected={extra})")
        state = {}
        for name, ref in expected.items():
            arr = self.tensors[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"tensor {name}: shape {arr.shape} != architecture {tuple(ref.shape)}")
            state[name] = torch.from_numpy(np.array(arr, copy=True)).to(ref.dtype)
        module.load_state_dict(state)

    def hashes(self) -> dict[str, str]:
        return {k: tensor_hash(v) for k, v in sorted(self.tensors.items())}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.hashes().items():
            h.update(f"{k}={v};".encode())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "config": self.config,
            "tensors": [
                {
                    "name": name,
                    "file": f"{name}.npy",
                    "shape": list(arr.shape),
                    "dtype": arr.dtype.str,
                    "sha256": tensor_hash(arr),
                }
                for name, arr in sorted(self.tensors.items())
            ],
        }

    def save(self, path) -> Path:
        """Write atomically: build in a sibling temp dir, then swap it in."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}-"))
        try:
            for name, arr in self.tensors.items():
                np.save(tmp / f"{name}.npy", np.asarray(arr, order="C"), allow_pickle=False)
            (tmp / MANIFEST).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
            if path.exists():
                old = path.with_name(f".{path.name}-old")
                if old.exists():
                    shutil.rmtree(old)
                os.replace(path, old)
                os.replace(tmp, path)
                shutil.rmtree(old)
            else:
                os.replace(tmp, path)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
        return path

    @classmethod
    def load(cls, path) -> "ModelCheckpoint":
        path = Path(path)
        mpath = path / MANIFEST
        if not mpath.is_file():
            raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
        try:
            man = json.loads(mpath.read_text())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{mpath}: unreadable manifest ({exc.msg})") from None
        if man.get("format_version") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{mpath}: unsupported format version {man.get('format_version')!r}")
        tensors = {}
        for entry in man["tensors"]:
            arr = np.load(path / entry["file"], allow_pickle=False)
            if list(arr.shape) != entry["shape"] or arr.dtype.str != entry["dtype"]:
                raise CheckpointError(f"{path}: tensor {entry['name']} does not match its manifest entry")
            if tensor_hash(arr) != entry["sha256"]:
                raise CheckpointError(f"{path}: tensor {entry['name']} fails its content hash")
            tensors[entry["name"]] = arr
        return cls(man["kind"], man["config"], tensors)


def changed_tensors(before: ModelCheckpoint, after: ModelCheckpoint) -> set[str]:
    """Names whose content hash differs (or that exist on one side only)."""
    hb, ha = before.hashes(), after.hashes()
    return {k for k in hb.keys() | ha.keys() if hb.get(k) != ha.get(k)}
