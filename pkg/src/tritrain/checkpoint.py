"""Binary checkpoint container.

All integers little-endian::

    b"TLM1" | version u32 | config_len u32 | config (utf-8 key=value lines)
    | n_tensors u32 | n_tensors * entry | header_crc32 u32 | payload

    entry = name_len u16 | name | dtype u8 | ndim u8 | dims u32*ndim
            | offset u64 | nbytes u64

``dtype`` 0 is raw fp32, 1 is a packed ternary matrix (rows u32, cols u32,
alpha f32, 2-bit codes). Offsets are absolute. The CRC covers every header
byte before it.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dumps, loads
from .data import Vocab, VocabError
from .model import LanguageModel, parameter_shapes
from .packing import PackedTernaryMatrix, PackingError, pack, unpack
from .quant import TernaryLinear

MAGIC = b"TLM1"
VERSION = 1
DTYPE_FP32, DTYPE_PACKED = 0, 1
MAX_TENSORS = 1 << 16
MAX_NDIM = 4
_U16, _U32, _U64 = struct.Struct("<H"), struct.Struct("<I"), struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


@dataclass
class Entry:
    name: str
    dtype: int
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass
class LoadedCheckpoint:
    model: LanguageModel
    vocab: Vocab | None
    config: RunConfig
    packed: bool


def _payload_size(dtype: int, shape: tuple[int, ...]) -> int:
    n = math.prod(shape)
    if dtype == DTYPE_FP32:
        return 4 * n
    return 12 + -(-n // 4)


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: LanguageModel, path, packed: bool = False, vocab: Vocab | None = None,
                    config: RunConfig | None = None) -> None:
    """Write ``model`` atomically. ``packed`` stores quantized layers as 2-bit codes."""
    run = RunConfig(model=model.cfg, train=config.train) if config else RunConfig(model=model.cfg)
    flat = run.to_flat()
    flat["checkpoint.packed"] = "true" if packed else "false"
    if vocab is not None:
        flat["vocab.symbols"] = vocab.dumps()
    cfg_bytes = dumps(flat).encode("utf-8")

    packed_layers = {}
    if packed:
        for layer in model.quantized_layers():
            if layer.packed is not None:
                packed_layers[layer.weight.name] = layer.packed
            else:
                layer.dense_weight()  # refreshes last_signs from the current weights
                packed_layers[layer.weight.name] = pack(layer.last_signs, float(layer.alpha.data[0]))
    blobs: list[tuple[str, int, tuple[int, ...], bytes]] = []
    for name, p in model.named_parameters():
        if name in packed_layers:
            blobs.append((name, DTYPE_PACKED, p.shape, packed_layers[name].to_bytes()))
        elif packed and name.endswith(".alpha") and name[: -len(".alpha")] + ".weight" in packed_layers:
            continue
        else:
            blobs.append((name, DTYPE_FP32, p.shape, p.data.astype("<f4").tobytes()))

    header = bytearray(MAGIC)
    header += _U32.pack(VERSION) + _U32.pack(len(cfg_bytes)) + cfg_bytes + _U32.pack(len(blobs))
    entry_size = sum(2 + len(n.encode()) + 2 + 4 * len(s) + 16 for n, _, s, _ in blobs)
    offset = len(header) + entry_size + 4
    for name, dtype, shape, blob in blobs:
        raw = name.encode("utf-8")
        header += _U16.pack(len(raw)) + raw + bytes([dtype, len(shape)])
        header += b"".join(_U32.pack(d) for d in shape)
        header += _U64.pack(offset) + _U64.pack(len(blob))
        offset += len(blob)
    header += _U32.pack(zlib.crc32(header))
    _atomic_write(Path(path), bytes(header) + b"".join(b[3] for b in blobs))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated header while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return _U16.unpack(self.take(2, what))[0]

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what):
        return _U64.unpack(self.take(8, what))[0]


def read_header(buf: bytes) -> tuple[dict[str, str], list[Entry], int]:
    """Parse and validate the header; returns (flat config, entries, header length)."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_len = r.u32("config length")
    try:
        flat = loads(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    count = r.u32("tensor count")
    if count > MAX_TENSORS:
        raise CheckpointError(f"implausible tensor count {count}")
    entries = []
    for i in range(count):
        raw = r.take(r.u16("name length"), "tensor name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i}: name is not utf-8") from None
        dtype = r.u8("dtype")
        ndim = r.u8("ndim")
        if dtype not in (DTYPE_FP32, DTYPE_PACKED):
            raise CheckpointError(f"{name}: unknown dtype code {dtype}")
        if not 1 <= ndim <= MAX_NDIM or (dtype == DTYPE_PACKED and ndim != 2):
            raise CheckpointError(f"{name}: invalid rank {ndim}")
        shape = tuple(r.u32("dims") for _ in range(ndim))
        if any(d == 0 for d in shape):
            raise CheckpointError(f"{name}: zero extent in shape {shape}")
        entries.append(Entry(name, dtype, shape, r.u64("offset"), r.u64("nbytes")))
    header_end = r.pos
    crc = r.u32("header checksum")
    if zlib.crc32(buf[:header_end]) != crc:
        raise CheckpointError("header checksum mismatch")
    data_start = r.pos
    names = set()
    for e in entries:
        if e.name in names:
            raise CheckpointError(f"duplicate tensor {e.name!r}")
        names.add(e.name)
        if e.nbytes != _payload_size(e.dtype, e.shape):
            raise CheckpointError(f"{e.name}: payload size {e.nbytes} does not match shape {e.shape}")
        if e.offset < data_start or e.offset + e.nbytes > len(buf):
            raise CheckpointError(f"{e.name}: region [{e.offset}, {e.offset + e.nbytes}) outside file")
    spans = sorted((e.offset, e.offset + e.nbytes, e.name) for e in entries)
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CheckpointError(f"manifest regions of {a!r} and {b!r} overlap")
    return flat, entries, data_start


def load_checkpoint(path) -> LoadedCheckpoint:
    """Load and fully validate a checkpoint; never returns a partial model."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    flat, entries, _ = read_header(buf)
    packed = flat.pop("checkpoint.packed", "false") == "true"
    vocab_text = flat.pop("vocab.symbols", None)
    try:
        config = RunConfig.from_flat(flat)
        config.model.validate()
        vocab = Vocab.loads(vocab_text) if vocab_text is not None else None
    except (ConfigError, VocabError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    if vocab is not None and len(vocab) != config.model.vocab_size:
        raise CheckpointError(f"vocabulary has {len(vocab)} symbols, config says {config.model.vocab_size}")

    if config.model.n_layers * 6 > len(entries):
        raise CheckpointError(f"manifest has {len(entries)} tensors, too few for "
                              f"{config.model.n_layers} layers")
    expected = parameter_shapes(config.model)
    by_name = {e.name: e for e in entries}
    packed_names = {e.name for e in entries if e.dtype == DTYPE_PACKED}
    if packed_names and not packed:
        raise CheckpointError("packed tensors in a checkpoint not flagged as packed")
    for name, shape in expected.items():
        if name in by_name:
            if by_name[name].shape != shape:
                raise CheckpointError(f"{name}: shape {by_name[name].shape} != expected {shape}")
        elif not (name.endswith(".alpha") and name[:-6] + ".weight" in packed_names):
            raise CheckpointError(f"missing tensor {name!r}")
    extra = set(by_name) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected tensors {sorted(extra)}")

    arrays: dict[str, np.ndarray] = {}
    packs: dict[str, PackedTernaryMatrix] = {}
    for e in entries:
        raw = buf[e.offset:e.offset + e.nbytes]
        if e.dtype == DTYPE_FP32:
            arrays[e.name] = np.frombuffer(raw, dtype="<f4").reshape(e.shape)
            continue
        try:
            p = PackedTernaryMatrix.from_bytes(raw)
        except PackingError as exc:
            raise CheckpointError(f"{e.name}: {exc}") from None
        if (p.rows, p.cols) != e.shape:
            raise CheckpointError(f"{e.name}: packed dims {(p.rows, p.cols)} != manifest {e.shape}")
        if not (np.isfinite(p.alpha) and p.alpha > 0):
            raise CheckpointError(f"{e.name}: invalid alpha {p.alpha}")
        packs[e.name] = p

    model = LanguageModel(config.model)
    layers = {layer.weight.name: layer for layer in model.ternary_layers()}
    for name, p in packs.items():
        layer = layers.get(name)
        if not isinstance(layer, TernaryLinear) or not layer.quantize_enabled:
            raise CheckpointError(f"{name}: packed tensor for a layer that is not quantized")
        signs, alpha = unpack(p)
        arrays[name] = signs.astype(np.float32)
        arrays[name[:-7] + ".alpha"] = np.array([alpha], dtype=np.float32)
    model.load_state(arrays)
    for name, p in packs.items():
        layers[name].packed = p
    model.inference_only = bool(packs)
    return LoadedCheckpoint(model, vocab, config, packed)
