"""VLRC checkpoint files.

Little-endian layout::

    magic          4 bytes  b"VLRC"
    version        u8       1
    meta_len       u32      followed by meta_len bytes of UTF-8 "key = value" lines
    tensor_count   u16
    per tensor:    name_len u16, name bytes, rank u8, extents u32 * rank, f64 values
    alias_count    u16
    per alias:     name_len u16, name bytes, target_len u16, target bytes

The meta block describes the layout (kind, layer sizes, coupling), enough to
rebuild an empty network before filling in the tensors. The model variant tag
is deliberately absent: two runs producing the same layout and weights produce
the same bytes. In dual networks every tensor read by both channels is stored
once; the aliases ``lr/<name>`` and ``hr/<name>`` both point at that entry.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .models import CouplingConfig, Network, NetworkConfig, empty_network

MAGIC = b"VLRC"
VERSION = 1


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _meta(network: Network) -> dict[str, str]:
    cfg = network.config
    meta = {
        "kind": network.kind,
        "dual": str(int(network.dual)),
        "tied": str(int(network.tied)),
        "n": ",".join(map(str, cfg.n)),
        "f": ",".join(map(str, cfg.f)),
        "m4": str(cfg.m4),
        "m5": str(cfg.m5),
        "f4": str(cfg.f4),
        "side": str(cfg.side),
        "dropout": repr(cfg.dropout),
    }
    if network.coupling is not None:
        meta["k"] = ",".join(map(str, network.coupling.k))
    return meta


def _shared_names(network: Network) -> list[str]:
    if not network.dual:
        return []
    lr = set(network.channel_param_names("lr"))
    return [n for n in network.channel_param_names("hr") if n in lr]


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def encode_checkpoint(network: Network) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<B", VERSION)
    meta = "".join(f"{k} = {v}\n" for k, v in _meta(network).items()).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    names = sorted(network.params)
    out += struct.pack("<H", len(names))
    for name in names:
        arr = np.ascontiguousarray(network.params[name], dtype="<f8")
        out += _pack_str(name)
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    aliases = [(f"{ch}/{n}", n) for n in _shared_names(network) for ch in ("lr", "hr")]
    out += struct.pack("<H", len(aliases))
    for alias, target in aliases:
        out += _pack_str(alias) + _pack_str(target)
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def decode_checkpoint(blob: bytes) -> Network:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic, expected b'VLRC'")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = {}
    for line in r.take(meta_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    try:
        config = NetworkConfig(
            n=_ints(meta["n"]), f=_ints(meta["f"]), m4=int(meta["m4"]), m5=int(meta["m5"]),
            f4=int(meta["f4"]), side=int(meta["side"]), dropout=float(meta["dropout"]),
        )
        coupling = CouplingConfig(_ints(meta["k"])) if "k" in meta else None
        network = empty_network(
            "loaded", config, meta["kind"], coupling, dual=meta["dual"] == "1", tied=meta["tied"] == "1"
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint meta lacks {exc.args[0]!r}") from None
    (count,) = r.unpack("<H")
    seen = set()
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        n_values = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(8 * n_values), dtype="<f8").astype(np.float64).reshape(shape)
        if name not in network.params:
            raise FormatError(f"unexpected tensor {name!r} for this layout")
        if network.params[name].shape != tuple(shape):
            raise FormatError(f"tensor {name!r} has shape {tuple(shape)}, layout needs {network.params[name].shape}")
        network.params[name] = values
        seen.add(name)
    missing = set(network.params) - seen
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}")
    (n_alias,) = r.unpack("<H")
    for _ in range(n_alias):
        alias, target = r.string(), r.string()
        if target not in network.params:
            raise FormatError(f"alias {alias!r} points at unknown tensor {target!r}")
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    return network


def save_checkpoint(network: Network, path) -> str:
    blob = encode_checkpoint(network)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Network:
    return decode_checkpoint(Path(path).read_bytes())
