"""Versioned checkpoint containers with architecture hashing."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .errors import InvalidArgument, MissingData

FORMAT = "armswap-ckpt"
VERSION = 1


def arch_hash(meta: dict, *modules: torch.nn.Module) -> str:
    """Hash of architecture metadata plus every parameter/buffer name and shape."""
    h = hashlib.sha256(json.dumps(meta, sort_keys=True, default=str).encode())
    for m in modules:
        for name, t in m.state_dict().items():
            h.update(f"{name}:{tuple(t.shape)};".encode())
    return h.hexdigest()[:16]


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save(path, kind: str, arch: str, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": FORMAT, "version": VERSION, "kind": kind, "arch_hash": arch, **payload}, tmp)
    tmp.replace(path)


def load(path, kind: str | None = None, expect_arch: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingData(f"checkpoint {path} not found")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT:
        raise InvalidArgument(f"{path} is not an armswap checkpoint")
    if ckpt["version"] != VERSION:
        raise InvalidArgument(f"{path}: unsupported checkpoint version {ckpt['version']}")
    if kind is not None and ckpt["kind"] != kind:
        raise InvalidArgument(f"{path} holds a {ckpt['kind']!r} checkpoint, expected {kind!r}")
    if expect_arch is not None and ckpt["arch_hash"] != expect_arch:
        raise InvalidArgument(
            f"{path}: architecture hash {ckpt['arch_hash']} does not match {expect_arch}"
        )
    return ckpt
