"""PET module records, parameter-count formulas, the binary container and
the on-disk module store.

Container layout (little-endian unless noted)::

    b"PLUT" | u16 version=1 | u32 header_len | header JSON (UTF-8)
           | payload: tensors concatenated in manifest order
           | SHA-256 of everything before it (32 bytes)

Tensors are ``f32`` unless the manifest entry carries ``"dtype": "u16"``.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

MAGIC = b"PLUT"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_DIGEST_LEN = 32
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}

MODULE_KINDS = ("vpt", "adapter")
_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]{0,127}")


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncationError(ContainerError):
    pass


class ShapeError(ContainerError):
    pass


class DigestError(ContainerError):
    pass


class StoreError(Exception):
    pass


class ConflictError(StoreError):
    pass


class NotFoundError(StoreError, KeyError):
    pass


# ---------------------------------------------------------------------------
# parameter counts


def vpt_param_count(p: int, d: int) -> int:
    if p < 1 or d < 1:
        raise ValueError("VPT needs at least one prompt of positive width")
    return p * d


def adapter_param_count(l: int, k: int, d_b: int) -> int:
    """Projection weights of two adapters per layer (biases excluded)."""
    if min(l, k, d_b) < 1:
        raise ValueError("adapter sizes must be positive")
    return 2 * l * 2 * k * d_b


def selector_param_count(d: int, dx: int, dl: int, dp: int, v: int) -> int:
    if min(d, dx, dl, dp, v) < 1:
        raise ValueError("selector sizes must be positive")
    return d * dx + dx * dp + v * dl + dl * dp + 4 * dp


# ---------------------------------------------------------------------------
# container


def pack_container(header: dict, tensors: dict[str, np.ndarray], dtypes: dict[str, str] | None = None) -> bytes:
    """Serialise ``header`` plus named tensors.  Output is deterministic."""
    dtypes = dtypes or {}
    manifest = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entry = {"name": name, "shape": list(arr.shape)}
        code = dtypes.get(name, "f32")
        if code != "f32":
            entry["dtype"] = code
        manifest.append(entry)
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    head = dict(header, tensors=manifest)
    hbytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def unpack_container(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = bytes(buf)
    if len(buf) < _PREFIX.size:
        raise TruncationError(f"container truncated: expected at least {_PREFIX.size} bytes, got {len(buf)}")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}, expected {VERSION}")
    hstart = _PREFIX.size
    if len(buf) < hstart + hlen:
        raise TruncationError(f"container truncated: header needs {hstart + hlen} bytes, got {len(buf)}")
    try:
        header = json.loads(buf[hstart : hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    manifest = header.get("tensors", [])
    sizes = []
    for entry in manifest:
        code = entry.get("dtype", "f32")
        if code not in _DTYPES or any(int(s) < 0 for s in entry["shape"]):
            raise ShapeError(f"bad manifest entry {entry}")
        sizes.append(int(np.prod(entry["shape"], dtype=np.int64)) * _DTYPES[code].itemsize)
    expected = hstart + hlen + sum(sizes) + _DIGEST_LEN
    if len(buf) != expected:
        kind = TruncationError if len(buf) < expected else ContainerError
        raise kind(f"container length mismatch: expected {expected} bytes, got {len(buf)}")
    body, digest = buf[:-_DIGEST_LEN], buf[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise DigestError("container digest does not match contents")
    tensors = {}
    off = hstart + hlen
    for entry, size in zip(manifest, sizes):
        code = entry.get("dtype", "f32")
        arr = np.frombuffer(buf, dtype=_DTYPES[code], count=size // _DTYPES[code].itemsize, offset=off)
        off += size
        arr = arr.reshape(entry["shape"])
        tensors[entry["name"]] = arr.astype(np.float64) if code == "f32" else arr.astype(np.int64)
    return header, tensors


# ---------------------------------------------------------------------------
# module records


def module_shapes(kind: str, hyper: dict) -> dict[str, tuple[int, ...]]:
    """Exact payload shapes (head excluded) for a module of ``kind``."""
    d = int(hyper["embed_dim"])
    if kind == "vpt":
        p = int(hyper["prompts"])
        vpt_param_count(p, d)
        return {"prompts": (p, d)}
    if kind == "adapter":
        depth, db = int(hyper["depth"]), int(hyper["bottleneck"])
        adapter_param_count(depth, d, db)
        shapes = {}
        for layer in range(depth):
            for slot in ("attn", "mlp"):
                pre = f"layer{layer}.{slot}"
                shapes[f"{pre}.W_down"] = (d, db)
                shapes[f"{pre}.b_down"] = (db,)
                shapes[f"{pre}.W_up"] = (db, d)
                shapes[f"{pre}.b_up"] = (d,)
        return shapes
    raise ValueError(f"unknown module kind {kind!r}")


@dataclass
class ModuleRecord:
    id: str
    domain_label: str
    kind: str
    hyper: dict
    payload: dict[str, np.ndarray]
    head_weight: np.ndarray
    head_bias: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.id, str) or not _ID_RE.fullmatch(self.id):
            raise ValueError(f"module id {self.id!r} must match {_ID_RE.pattern}")
        expected = module_shapes(self.kind, self.hyper)
        if set(expected) != set(self.payload):
            raise ShapeError(f"payload names {sorted(self.payload)} do not match {self.kind} layout")
        for name, shape in expected.items():
            if tuple(np.shape(self.payload[name])) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {np.shape(self.payload[name])}")
        d, k = int(self.hyper["embed_dim"]), int(self.hyper["classes"])
        if np.shape(self.head_weight) != (d, k) or np.shape(self.head_bias) != (k,):
            raise ShapeError(f"head shapes {np.shape(self.head_weight)}, {np.shape(self.head_bias)} do not match d={d}, K={k}")

    def payload_param_count(self) -> int:
        return sum(int(np.size(v)) for n, v in self.payload.items() if "b_" not in n.rsplit(".", 1)[-1])

    def formula_param_count(self) -> int:
        h = self.hyper
        if self.kind == "vpt":
            return vpt_param_count(int(h["prompts"]), int(h["embed_dim"]))
        return adapter_param_count(int(h["depth"]), int(h["embed_dim"]), int(h["bottleneck"]))

    def head_param_count(self) -> int:
        return int(self.head_weight.size + self.head_bias.size)

    def quantized(self) -> "ModuleRecord":
        return deserialize(serialize(self))

    def equals(self, other: "ModuleRecord") -> bool:
        same = (self.id, self.domain_label, self.kind, self.hyper, self.meta) == (
            other.id, other.domain_label, other.kind, other.hyper, other.meta)
        if not same or set(self.payload) != set(other.payload):
            return False
        return all(np.array_equal(self.payload[n], other.payload[n]) for n in self.payload) and np.array_equal(
            self.head_weight, other.head_weight) and np.array_equal(self.head_bias, other.head_bias)


def serialize(record: ModuleRecord) -> bytes:
    tensors = {n: record.payload[n] for n in module_shapes(record.kind, record.hyper)}
    tensors["head.weight"] = record.head_weight
    tensors["head.bias"] = record.head_bias
    header = {
        "id": record.id,
        "domain_label": record.domain_label,
        "kind": record.kind,
        "hyper": record.hyper,
        "meta": record.meta,
    }
    return pack_container(header, tensors)


def deserialize(buf: bytes) -> ModuleRecord:
    header, tensors = unpack_container(buf)
    kind = header.get("kind")
    if kind not in MODULE_KINDS:
        raise ContainerError(f"container holds kind {kind!r}, not a PET module")
    try:
        head_w = tensors.pop("head.weight")
        head_b = tensors.pop("head.bias")
    except KeyError as exc:
        raise ShapeError(f"module container missing {exc.args[0]}") from None
    return ModuleRecord(
        id=header["id"],
        domain_label=header["domain_label"],
        kind=kind,
        hyper=header["hyper"],
        payload=tensors,
        head_weight=head_w,
        head_bias=head_b,
        meta=header.get("meta", {}),
    )


# ---------------------------------------------------------------------------
# filesystem store


class ModuleStore:
    """Directory of ``<id>.plut`` containers indexed by ``store.json``.

    Readers take no lock; writers hold an exclusive lock on the index.
    """

    INDEX = "store.json"

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / (self.INDEX + ".lock")))
        if not (self.root / self.INDEX).exists():
            with self._lock:
                if not (self.root / self.INDEX).exists():
                    self._write_index({})

    def _read_index(self) -> dict:
        return json.loads((self.root / self.INDEX).read_text())

    def _write_index(self, index: dict):
        tmp = self.root / (self.INDEX + ".tmp")
        tmp.write_text(json.dumps(index, sort_keys=True, indent=1))
        os.replace(tmp, self.root / self.INDEX)

    def put(self, record: ModuleRecord) -> str:
        return self.put_bytes(serialize(record))

    def put_bytes(self, buf: bytes) -> str:
        record = deserialize(buf)
        with self._lock:
            index = self._read_index()
            if record.id in index:
                raise ConflictError(f"conflict:{record.id}")
            fname = f"{record.id}.plut"
            (self.root / fname).write_bytes(buf)
            index[record.id] = {
                "file": fname,
                "bytes": len(buf),
                "sha256": hashlib.sha256(buf).hexdigest(),
                "domain_label": record.domain_label,
                "kind": record.kind,
            }
            self._write_index(index)
        return record.id

    def get_bytes(self, module_id: str) -> bytes:
        entry = self._read_index().get(module_id)
        if entry is None:
            raise NotFoundError(f"not_found:{module_id}")
        buf = (self.root / entry["file"]).read_bytes()
        if len(buf) != entry["bytes"] or hashlib.sha256(buf).hexdigest() != entry["sha256"]:
            raise DigestError(f"stored file for {module_id!r} does not match its index digest")
        return buf

    def get(self, module_id: str) -> ModuleRecord:
        return deserialize(self.get_bytes(module_id))

    def list(self) -> list[dict]:
        index = self._read_index()
        return [
            {"id": i, "domain_label": e["domain_label"], "kind": e["kind"], "sha256": e["sha256"]}
            for i, e in sorted(index.items())
        ]

    def __contains__(self, module_id) -> bool:
        return module_id in self._read_index()

    def __len__(self) -> int:
        return len(self._read_index())


def store_put(store: ModuleStore, record: ModuleRecord) -> str:
    return store.put(record)


def store_get(store: ModuleStore, module_id: str) -> ModuleRecord:
    return store.get(module_id)


def store_list(store: ModuleStore) -> list[dict]:
    return store.list()
