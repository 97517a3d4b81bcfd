"""Versioned checkpoint archives: named parameters plus a JSON topology header."""

from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .graph import CIGN, TreeSpec

FORMAT = "cign-checkpoint"
VERSION = 1
HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


def save(model: CIGN, path: str | os.PathLike, extra: dict | None = None) -> Path:
    path = Path(path)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": str(model.dtype).replace("torch.", ""),
        "tree": model.tree.to_dict(),
        "extra": extra or {},
    }
    arrays = {name: p.value.detach().cpu().numpy() for name, p in model.params.items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def _open(path):
    try:
        z = np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable archive ({exc})") from exc
    if not hasattr(z, "files"):
        raise CheckpointError(f"{path}: not an npz archive")
    return z


def read_header(path: str | os.PathLike) -> dict:
    with _open(path) as z:
        if HEADER_KEY not in z.files:
            raise CheckpointError(f"{path}: missing topology header")
        try:
            header = json.loads(z[HEADER_KEY].tobytes().decode())
        except (ValueError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} archive")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    return header


def load(path: str | os.PathLike) -> tuple[CIGN, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    header = read_header(path)
    tree = TreeSpec.from_dict(header["tree"])
    model = CIGN(tree, dtype=getattr(torch, header["dtype"]))
    with _open(path) as z:
        arrays = {k: z[k] for k in z.files if k != HEADER_KEY}
    try:
        model.params.load_arrays(arrays)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, header
