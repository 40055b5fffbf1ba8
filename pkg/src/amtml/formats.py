"""Little-endian binary formats for datasets (AKDD) and checkpoints (AKDC).

AKDD::

    b"AKDD" | u32 version=1 | u8 rank (1 or 3) | u32 dims[rank] | u32 N | u32 K
    | float32 features[N * prod(dims)] | u32 labels[N]

AKDC::

    b"AKDC" | u32 version=1 | u32 len + utf-8 descriptor | u32 tensor count
    | per tensor: u32 len + utf-8 name | u32 rank | u32 dims[rank] | float32 payload
"""
import math
import struct

import numpy as np

from amtml.errors import FormatError

DATASET_MAGIC = b"AKDD"
CHECKPOINT_MAGIC = b"AKDC"
VERSION = 1


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated {what}: expected {n} bytes, got {len(self.buf) - self.pos}", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]

    def magic(self, expected):
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def version(self):
        at = self.pos
        v = self.u32("version")
        if v != VERSION:
            raise FormatError(f"unsupported version {v}", at)

    def text(self, what):
        n = self.u32(f"{what} length")
        at = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", at) from None

    def array(self, dtype, count, what):
        nbytes = count * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(nbytes, what), dtype=dtype).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def encode_dataset(ds):
    feats = np.ascontiguousarray(ds.features, dtype="<f4")
    dims = ds.features.shape[1:]
    out = [DATASET_MAGIC, struct.pack("<IB", VERSION, len(dims))]
    out.append(struct.pack(f"<{len(dims)}I", *dims))
    out.append(struct.pack("<II", len(ds.labels), ds.num_classes))
    out.append(feats.tobytes())
    out.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return b"".join(out)


def decode_dataset(buf):
    from amtml.data import Dataset

    r = _Reader(buf)
    r.magic(DATASET_MAGIC)
    r.version()
    at = r.pos
    rank = r.u8("rank")
    if rank not in (1, 3):
        raise FormatError(f"rank must be 1 or 3, got {rank}", at)
    dims = tuple(r.u32("dims") for _ in range(rank))
    n = r.u32("N")
    k = r.u32("K")
    feats = r.array("<f4", n * math.prod(dims), "feature payload").reshape((n,) + dims)
    at = r.pos
    labels = r.array("<u4", n, "label payload")
    if n and labels.max() >= k:
        raise FormatError(f"label {labels.max()} out of range for K={k}", at)
    r.done()
    return Dataset(feats.astype(np.float32), labels.astype(np.int64), int(k))


def write_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(encode_dataset(ds))


def read_dataset(path):
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def encode_checkpoint(descriptor, tensors):
    desc = descriptor.encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(desc)), desc, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(buf):
    """Returns ``(descriptor, {name: float32 array})`` in file order."""
    r = _Reader(buf)
    r.magic(CHECKPOINT_MAGIC)
    r.version()
    descriptor = r.text("descriptor")
    count = r.u32("tensor count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        name = r.text("tensor name")
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", at)
        rank = r.u32("rank")
        dims = tuple(r.u32("dims") for _ in range(rank))
        tensors[name] = r.array("<f4", math.prod(dims), f"payload of {name!r}").reshape(dims)
    r.done()
    return descriptor, tensors


def write_checkpoint(path, descriptor, tensors):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(descriptor, tensors))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# -- model / adapter helpers --------------------------------------------------

def _check_float32(tensors):
    """Payloads are float32; refuse values that would overflow to inf."""
    from amtml.errors import NumericError

    for name, arr in tensors.items():
        with np.errstate(over="ignore"):
            ok = np.isfinite(np.asarray(arr, dtype=np.float32)).all()
        if not ok:
            raise NumericError(f"tensor {name!r} is not finite in float32; refusing to write it", component=name)


def save_model(path, model, val_accuracy=None):
    tensors = {name: p.data for name, p in model.params.items()}
    _check_float32(tensors)
    tensors["meta.input_shape"] = np.array(model.input_shape, dtype=np.float32)
    if val_accuracy is not None:
        tensors["meta.val_accuracy"] = np.array([val_accuracy], dtype=np.float32)
    write_checkpoint(path, model.descriptor, tensors)


def load_model(path):
    """Returns ``(model, val_accuracy or None)``."""
    from amtml import nn
    from amtml.errors import ShapeError

    descriptor, tensors = read_checkpoint(path)
    if "meta.input_shape" not in tensors:
        raise FormatError("checkpoint lacks meta.input_shape", 0)
    input_shape = tuple(int(v) for v in tensors.pop("meta.input_shape"))
    val = tensors.pop("meta.val_accuracy", None)
    model = nn.build_model(descriptor, input_shape)
    if set(tensors) != set(model.params):
        raise ShapeError(f"checkpoint tensors {sorted(tensors)} do not match descriptor {descriptor!r}")
    for name, arr in tensors.items():
        if arr.shape != model.params[name].shape:
            raise ShapeError(f"tensor {name!r} has dims {list(arr.shape)}, expected {model.params[name].dims}")
        model.params[name].data = arr.astype(np.float64)
    return model, (None if val is None else float(val[0]))


def save_adapter(path, params):
    _check_float32({k: v.data for k, v in params.named_tensors().items()})
    write_checkpoint(path, f"adapter:{params.m}:{params.d}", {k: v.data for k, v in params.named_tensors().items()})


def load_adapter(path):
    from amtml.adapter import AdapterParams
    from amtml.tensor import Tensor

    descriptor, tensors = read_checkpoint(path)
    parts = descriptor.split(":")
    if len(parts) != 3 or parts[0] != "adapter":
        raise FormatError(f"not an adapter checkpoint: descriptor {descriptor!r}", 8)
    m = int(parts[1])
    thetas = [Tensor(tensors[f"theta.{t}"].astype(np.float64), requires_grad=True) for t in range(m)]
    return AdapterParams(thetas, Tensor(tensors["nu"].astype(np.float64), requires_grad=True))
