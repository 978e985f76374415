"""Binary model container.

Layout: 4-byte magic, little-endian uint32 format version, little-endian uint64
header length, UTF-8 JSON header, then little-endian float64 parameter blocks
in the order listed under the header's ``blocks`` key.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, VersionError
from .nn import Mlp

FORMAT_VERSION = 1
EMQ_MAGIC = b"EMQM"
DQM_MAGIC = b"DQM1"
KNOWN_MAGIC = (EMQ_MAGIC, DQM_MAGIC)
_PREFIX = struct.Struct("<4sIQ")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_container(path, magic: bytes, header: dict, arrays) -> None:
    header = dict(header)
    header["blocks"] = [list(a.shape) for a in arrays]
    blob = canonical_json(header).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path):
    """Return (magic, header, arrays); raise ModelFormatError on anything malformed."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise ModelFormatError(f"{path} is truncated")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic not in KNOWN_MAGIC:
        raise ModelFormatError(f"{path} is not a model container (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path} has format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        shapes = [tuple(s) for s in header["blocks"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path} has a corrupt header") from exc
    offset = start + hlen
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise ModelFormatError(f"{path} is truncated inside a parameter block")
        arrays.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset = end
    if offset != len(raw):
        raise ModelFormatError(f"{path} has {len(raw) - offset} trailing bytes")
    return magic, header, arrays


def mlp_header(mlp: Mlp) -> dict:
    return {"layer_sizes": mlp.layer_sizes, "activations": mlp.activations,
            "positive_outputs": mlp.positive_outputs, "seed": mlp.seed}


def mlp_from(header: dict, arrays) -> Mlp:
    n = len(header["layer_sizes"]) - 1
    if len(arrays) < 2 * n:
        raise ModelFormatError("not enough parameter blocks for network")
    return Mlp(header["layer_sizes"], header["activations"],
               arrays[0:2 * n:2], arrays[1:2 * n:2], header["positive_outputs"], header["seed"])


def pack_networks(mlps) -> tuple[list, list]:
    headers, arrays = [], []
    for m in mlps:
        headers.append(mlp_header(m))
        arrays.extend(m.params())
    return headers, arrays


def unpack_networks(headers, arrays) -> list[Mlp]:
    out, pos = [], 0
    for h in headers:
        n = 2 * (len(h["layer_sizes"]) - 1)
        out.append(mlp_from(h, arrays[pos:pos + n]))
        pos += n
    if pos != len(arrays):
        raise ModelFormatError("parameter blocks do not match the declared networks")
    return out
