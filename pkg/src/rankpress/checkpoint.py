"""Shared checkpoint container: plaintext manifest + flat float32 blob.

Layout (single file):
    RPCK 1
    geometry <in_channels> <height> <width>
    meta <key>=<value>            (zero or more)
    layer <name> <kind> <in> <out> <kernel> <stride> <pad>
    tensor <name> <dim,dim,...> <byte-offset>
    blob <nbytes> crc32 <hex>
    <raw little-endian float32 bytes>

Tensors are serialized in manifest order; the CRC32 line guards corruption.
"""

from __future__ import annotations

import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .nets import LayerSpec, NetworkSpec, ParameterSet

MAGIC = "RPCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or corrupt checkpoint file."""


def save_checkpoint(path, spec: NetworkSpec, params: ParameterSet, meta: dict | None = None):
    path = Path(path)
    lines = [f"{MAGIC} {VERSION}", f"geometry {spec.in_channels} {spec.height} {spec.width}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key}={value}")
    for layer in spec.layers:
        lines.append(
            f"layer {layer.name} {layer.kind} {layer.in_ch} {layer.out_ch} "
            f"{layer.kernel} {layer.stride} {layer.padding}"
        )
    chunks = []
    offset = 0
    for layer in spec.layers:
        for part in ("weight", "bias"):
            name = f"{layer.name}.{part}"
            arr = np.ascontiguousarray(params[name].data, dtype="<f4")
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"tensor {name} {shape} {offset}")
            raw = arr.tobytes()
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    lines.append(f"blob {len(blob)} crc32 {zlib.crc32(blob):08x}")
    path.write_bytes("\n".join(lines).encode() + b"\n" + blob)


def checkpoint_hash(path) -> str:
    """CRC of the parameter blob as stored in the manifest."""
    for line in Path(path).read_bytes().split(b"\n"):
        if line.startswith(b"blob "):
            return line.split()[-1].decode()
    raise CheckpointError(f"{path}: no blob line found")


def load_checkpoint(path, dtype=np.float32) -> tuple[NetworkSpec, ParameterSet, dict]:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def next_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:end].decode()
        pos = end + 1
        return line

    header = next_line().split()
    if header[:1] != [MAGIC] or int(header[1]) != VERSION:
        raise CheckpointError(f"{path}: bad magic/version {header!r}")
    geom = next_line().split()
    if geom[0] != "geometry":
        raise CheckpointError(f"{path}: missing geometry line")
    in_ch, height, width = (int(v) for v in geom[1:4])

    meta: dict = {}
    layers: list[LayerSpec] = []
    tensors: list[tuple[str, tuple[int, ...], int]] = []
    while True:
        line = next_line()
        fields = line.split()
        if fields[0] == "meta":
            key, _, value = line[len("meta ") :].partition("=")
            meta[key] = value
        elif fields[0] == "layer":
            layers.append(
                LayerSpec(fields[1], fields[2], *(int(v) for v in fields[3:8]))
            )
        elif fields[0] == "tensor":
            shape = tuple(int(d) for d in fields[2].split(","))
            tensors.append((fields[1], shape, int(fields[3])))
        elif fields[0] == "blob":
            nbytes = int(fields[1])
            crc_expected = fields[3]
            break
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")

    blob = data[pos : pos + nbytes]
    if len(blob) != nbytes:
        raise CheckpointError(f"{path}: truncated blob ({len(blob)} of {nbytes} bytes)")
    if f"{zlib.crc32(blob):08x}" != crc_expected:
        raise CheckpointError(f"{path}: blob checksum mismatch")

    spec = NetworkSpec(in_ch, height, width, tuple(layers))
    spec.validate()
    params: ParameterSet = {}
    for name, shape, offset in tensors:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    expected = {f"{l.name}.{p}" for l in layers for p in ("weight", "bias")}
    if set(params) != expected:
        raise CheckpointError(f"{path}: manifest tensors do not match layer inventory")
    return spec, params, meta
