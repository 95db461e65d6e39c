"""Binary checkpoint persistence.

Layout (little-endian): magic "LQCK", version u32=1, config block
(u32 line count, then per line u16 byte-length + UTF-8 "key=value"),
trained-scheme string (u16 + UTF-8, "none" when untrained), tensor count u32,
then per tensor: name (u16 + UTF-8), rank u8, dims u32 each, dtype tag u8
(0 = IEEE-754 32-bit LE), raw data. Tensors are stored float32 even when the
in-memory model computes in float64; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import fields

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, Transformer
from .tensor import Parameter

_MAGIC = b"LQCK"
_VERSION = 1
_DTYPE_F32 = 0

_SMOOTH_PREFIX = "smooth."


def _config_lines(cfg: ModelConfig) -> list[str]:
    out = []
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        out.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
    return out


def _parse_config(lines: list[str]) -> ModelConfig:
    kwargs = {}
    names = {f.name: f.type for f in fields(ModelConfig)}
    for line in lines:
        if "=" not in line:
            raise CheckpointError(f"bad config line {line!r}")
        key, val = line.split("=", 1)
        if key not in names:
            raise CheckpointError(f"unknown config key {key!r}")
        kwargs[key] = float(val) if key in ("rope_base", "rms_eps") else int(val)
    missing = set(names) - set(kwargs)
    if missing:
        raise CheckpointError(f"config block missing keys {sorted(missing)}")
    return ModelConfig(**kwargs)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def save_checkpoint(model: Transformer, path: str) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, p in model.params.items():
        tensors.append((name, p.value.data))
    for name in sorted(model.smoothing):
        tensors.append((_SMOOTH_PREFIX + name, model.smoothing[name]))

    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        lines = _config_lines(model.cfg)
        f.write(struct.pack("<I", len(lines)))
        for line in lines:
            f.write(_pack_str(line))
        f.write(_pack_str(model.trained_scheme))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            f.write(_pack_str(name))
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(struct.pack("<B", _DTYPE_F32))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint {self.path} while reading {what}")
        out = self.raw[self.off: self.off + n]
        self.off += n
        return out

    def u8(self, what):
        return struct.unpack("<B", self.take(1, what))[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what) -> str:
        n = self.u16(what)
        return self.take(n, what).decode("utf-8")


def load_checkpoint(path: str) -> Transformer:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(raw, path)
    if r.take(4, "magic") != _MAGIC:
        raise CheckpointError(f"bad magic in {path}, expected LQCK")
    version = r.u32("version")
    if version != _VERSION:
        raise CheckpointError(
            f"checkpoint version {version}, this loader supports {_VERSION}")
    n_lines = r.u32("config line count")
    cfg = _parse_config([r.string("config line") for _ in range(n_lines)])
    scheme = r.string("trained scheme")

    model = Transformer(cfg, _empty=True)
    model.trained_scheme = scheme
    n_tensors = r.u32("tensor count")
    loaded: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = r.string("tensor name")
        rank = r.u8("tensor rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "tensor dims"))
        tag = r.u8("dtype tag")
        if tag != _DTYPE_F32:
            raise CheckpointError(f"unsupported dtype tag {tag} for tensor {name!r}")
        count = int(np.prod(dims)) if rank else 1
        # copy: frombuffer views are read-only, parameters must be writable
        data = np.frombuffer(r.take(4 * count, f"tensor {name!r} data"),
                             dtype="<f4").reshape(dims).copy()
        loaded[name] = data
    if r.off != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")

    for name, arr in loaded.items():
        if name.startswith(_SMOOTH_PREFIX):
            model.smoothing[name[len(_SMOOTH_PREFIX):]] = np.asarray(arr, dtype=np.float64)
        else:
            model.params[name] = Parameter(arr)

    expected = Transformer(cfg, _empty=False, seed=0).params.keys()
    missing = [n for n in expected if n not in model.params]
    if missing:
        raise CheckpointError(f"checkpoint {path} missing tensor {missing[0]!r}")
    # restore canonical parameter order so re-saving is byte-identical
    model.params = {n: model.params[n] for n in expected}
    return model
