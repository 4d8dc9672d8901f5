"""Binary fixture and checkpoint containers.

Raw tensor format (magic ``BTEN``): version u8, rank u8, dtype u8 (bytes
per element: 4 or 8), dims as u32 little-endian, payload as little-endian
floats. Checkpoints are named lists of such blobs behind a ``BAUG``
(augmenter, carries a scenario tag) or ``BCLS`` (classifier) header.
"""

from __future__ import annotations

import io as _io
import struct

import numpy as np

TENSOR_MAGIC = b"BTEN"
AUGMENTER_MAGIC = b"BAUG"
CLASSIFIER_MAGIC = b"BCLS"
FORMAT_VERSION = 1

_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def write_tensor(fp, array):
    array = np.asarray(array)
    if array.dtype == np.float32:
        width = 4
    elif array.dtype == np.float64:
        width = 8
    else:
        raise FormatError(f"unsupported dtype {array.dtype}")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<BBB", FORMAT_VERSION, array.ndim, width))
    for d in array.shape:
        fp.write(struct.pack("<I", d))
    fp.write(np.ascontiguousarray(array, dtype=_DTYPES[width]).tobytes())


def read_tensor(fp):
    magic = fp.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, rank, width = struct.unpack("<BBB", fp.read(3))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if width not in _DTYPES:
        raise FormatError(f"unsupported element width {width}")
    dims = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    payload = fp.read(count * width)
    if len(payload) != count * width:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype=_DTYPES[width]).reshape(dims).copy()


def tensor_to_bytes(array):
    buf = _io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(_io.BytesIO(data))


def _write_named_blobs(fp, named):
    fp.write(struct.pack("<H", len(named)))
    for name, arr in named:
        raw = name.encode("utf-8")
        fp.write(struct.pack("<B", len(raw)))
        fp.write(raw)
        write_tensor(fp, arr)


def _read_named_blobs(fp):
    (count,) = struct.unpack("<H", fp.read(2))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<B", fp.read(1))
        name = fp.read(nlen).decode("utf-8")
        out.append((name, read_tensor(fp)))
    return out


_SCENARIO_TAGS = {"color": 0, "affine": 1, "color+affine": 2}
_SCENARIO_NAMES = {v: k for k, v in _SCENARIO_TAGS.items()}


def save_augmenter(path, scenario, named_arrays):
    """Write an augmenter checkpoint: BAUG header + scenario + blobs."""
    if scenario not in _SCENARIO_TAGS:
        raise FormatError(f"unknown scenario {scenario!r}")
    with open(path, "wb") as fp:
        fp.write(AUGMENTER_MAGIC)
        fp.write(struct.pack("<BB", FORMAT_VERSION, _SCENARIO_TAGS[scenario]))
        _write_named_blobs(fp, named_arrays)


def load_augmenter(path):
    with open(path, "rb") as fp:
        if fp.read(4) != AUGMENTER_MAGIC:
            raise FormatError(f"{path}: not an augmenter checkpoint")
        version, tag = struct.unpack("<BB", fp.read(2))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        if tag not in _SCENARIO_NAMES:
            raise FormatError(f"unknown scenario tag {tag}")
        return _SCENARIO_NAMES[tag], _read_named_blobs(fp)


def save_classifier(path, named_arrays):
    with open(path, "wb") as fp:
        fp.write(CLASSIFIER_MAGIC)
        fp.write(struct.pack("<B", FORMAT_VERSION))
        _write_named_blobs(fp, named_arrays)


def load_classifier(path):
    with open(path, "rb") as fp:
        if fp.read(4) != CLASSIFIER_MAGIC:
            raise FormatError(f"{path}: not a classifier checkpoint")
        (version,) = struct.unpack("<B", fp.read(1))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        return _read_named_blobs(fp)
