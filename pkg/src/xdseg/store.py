"""Named parameter stores and the portable checkpoint format.

A checkpoint is a directory (or uncompressed tar archive) holding
``manifest.json`` plus one little-endian binary sidecar per entry, named
``<index>.bin`` in manifest order. The round trip is bitwise lossless.
"""
from __future__ import annotations

import io
import json
import os
import shutil
import tarfile
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

ROLES = (
    "conv-kernel",
    "conv-bias",
    "norm-gamma",
    "norm-beta",
    "norm-running-mean",
    "norm-running-var",
)

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Entry:
    name: str
    role: str
    shape: tuple[int, ...]
    rank: int  # spatial rank of the owning layer (2 or 3)

    def validate(self, blob: np.ndarray):
        if self.role not in ROLES:
            raise ValidationError(f"unknown role {self.role!r} for entry {self.name}")
        if self.rank not in (2, 3):
            raise ValidationError(f"entry {self.name}: rank must be 2 or 3")
        if tuple(blob.shape) != tuple(self.shape):
            raise ValidationError(
                f"entry {self.name}: blob shape {blob.shape} != manifest {self.shape}"
            )
        if self.role == "conv-kernel" and len(self.shape) != self.rank + 2:
            raise ValidationError(
                f"entry {self.name}: conv kernel of spatial rank {self.rank} "
                f"must have {self.rank + 2} axes, got {len(self.shape)}"
            )


class WeightStore:
    """Ordered collection of named parameter arrays with provenance metadata."""

    def __init__(self, meta: dict | None = None):
        self.entries: list[Entry] = []
        self.blobs: dict[str, np.ndarray] = {}
        self.meta: dict = {"source": "unspecified", "inflation": "none"}
        if meta:
            self.meta.update(meta)

    def add(self, name: str, role: str, array: np.ndarray, rank: int):
        if name in self.blobs:
            raise ValidationError(f"duplicate entry name {name!r}")
        array = np.asarray(array)
        entry = Entry(name=name, role=role, shape=tuple(array.shape), rank=rank)
        entry.validate(array)
        self.entries.append(entry)
        self.blobs[name] = array

    def __contains__(self, name: str) -> bool:
        return name in self.blobs

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blobs[name]

    def __setitem__(self, name: str, array: np.ndarray):
        if name not in self.blobs:
            raise KeyError(name)
        entry = self.entry(name)
        array = np.asarray(array)
        if tuple(array.shape) != entry.shape:
            raise ValidationError(
                f"entry {name}: assigned shape {array.shape} != {entry.shape}"
            )
        self.blobs[name] = array

    def entry(self, name: str) -> Entry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def copy(self) -> "WeightStore":
        out = WeightStore(meta=dict(self.meta))
        for e in self.entries:
            out.add(e.name, e.role, self.blobs[e.name].copy(), e.rank)
        return out

    def astype(self, dtype) -> "WeightStore":
        out = WeightStore(meta=dict(self.meta))
        for e in self.entries:
            out.add(e.name, e.role, self.blobs[e.name].astype(dtype), e.rank)
        return out

    def manifest_dict(self) -> dict:
        return {
            "meta": self.meta,
            "entries": [
                {
                    "name": e.name,
                    "role": e.role,
                    "shape": list(e.shape),
                    "rank": e.rank,
                    "dtype": str(self.blobs[e.name].dtype),
                }
                for e in self.entries
            ],
        }


def _write_dir(store: WeightStore, path: str):
    manifest = store.manifest_dict()
    for spec in manifest["entries"]:
        if spec["dtype"] not in _DTYPES:
            raise FormatError(f"unsupported checkpoint dtype {spec['dtype']}")
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    for i, e in enumerate(store.entries):
        blob = np.ascontiguousarray(
            store.blobs[e.name], dtype=_DTYPES[str(store.blobs[e.name].dtype)]
        )
        with open(os.path.join(path, f"{i}.bin"), "wb") as f:
            f.write(blob.tobytes())


def save_checkpoint(store: WeightStore, path: str | os.PathLike):
    """Write a checkpoint atomically: temp location, then rename into place."""
    path = str(path)
    parent = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(dir=parent, prefix=".ckpt-tmp-")
    try:
        if path.endswith(".tar"):
            _write_dir(store, tmp)
            tmp_tar = tmp + ".tar"
            with tarfile.open(tmp_tar, "w") as tf:
                for fname in sorted(os.listdir(tmp)):
                    tf.add(os.path.join(tmp, fname), arcname=fname)
            os.replace(tmp_tar, path)
        else:
            _write_dir(store, tmp)
            if os.path.isdir(path):
                shutil.rmtree(path)
            os.replace(tmp, path)
            return
    finally:
        if os.path.isdir(tmp):
            shutil.rmtree(tmp, ignore_errors=True)


def _load_blobs(read, manifest: dict) -> WeightStore:
    store = WeightStore(meta=manifest.get("meta", {}))
    for i, spec in enumerate(manifest["entries"]):
        if spec["dtype"] not in _DTYPES:
            raise FormatError(f"unsupported checkpoint dtype {spec['dtype']}")
        raw = read(f"{i}.bin")
        arr = np.frombuffer(raw, dtype=_DTYPES[spec["dtype"]]).astype(spec["dtype"])
        expected = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if arr.size != expected:
            raise FormatError(
                f"entry {spec['name']}: payload has {arr.size} scalars, "
                f"manifest shape implies {expected}"
            )
        store.add(
            spec["name"], spec["role"], arr.reshape(spec["shape"]), spec["rank"]
        )
    return store


def load_checkpoint(path: str | os.PathLike) -> WeightStore:
    path = str(path)
    try:
        if os.path.isdir(path):
            with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
                manifest = json.load(f)

            def read(name):
                with open(os.path.join(path, name), "rb") as f:
                    return f.read()

            return _load_blobs(read, manifest)
        with tarfile.open(path, "r:") as tf:
            manifest = json.load(
                io.TextIOWrapper(tf.extractfile("manifest.json"), encoding="utf-8")
            )
            return _load_blobs(lambda n: tf.extractfile(n).read(), manifest)
    except (json.JSONDecodeError, KeyError, OSError, tarfile.TarError) as exc:
        raise FormatError(f"unreadable checkpoint at {path}: {exc}") from exc
