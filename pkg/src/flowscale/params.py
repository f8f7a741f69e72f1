"""Named trainable parameters, the Adam update, and binary persistence.

Checkpoint layout (all little-endian):

    magic "FACP" | version u16 | count u32 | entries...
    entry: name-length u16 | UTF-8 name | rank u8 | extents u32 each | float64 values

Adam moments ride along as extra entries with ``#m1`` / ``#m2`` / ``#t``
suffixes.  Model checkpoints prepend a length-prefixed JSON header (u32
length + UTF-8 text) describing the architecture, then embed the same blob.
"""

import json
import struct

import numpy as np

from .autodiff import Tensor, parameter

MAGIC = b"FACP"
VERSION = 1
_M1, _M2, _STEP = "#m1", "#m2", "#t"


class FormatError(ValueError):
    """Corrupt or foreign checkpoint payload."""


class ParameterStore:
    """Uniquely named parameter tensors plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m1: dict[str, np.ndarray] = {}
        self._m2: dict[str, np.ndarray] = {}
        self._steps: dict[str, int] = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if any(tag in name for tag in (_M1, _M2, _STEP)):
            raise ValueError(f"parameter name {name!r} uses a reserved suffix")
        t = data if isinstance(data, Tensor) else parameter(data)
        t.requires_grad = True
        self._params[name] = t
        self._m1[name] = np.zeros(t.shape)
        self._m2[name] = np.zeros(t.shape)
        self._steps[name] = 0
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def step_count(self, name):
        return self._steps[name]

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def gather_grads(self):
        """Collect populated .grad arrays keyed by parameter name."""
        return {
            name: t.grad.data for name, t in self._params.items() if t.grad is not None
        }

    # -- persistence ----------------------------------------------------------

    def to_bytes(self):
        entries = []
        for name, t in self._params.items():
            entries.append((name, t.data))
            entries.append((name + _M1, self._m1[name]))
            entries.append((name + _M2, self._m2[name]))
            entries.append((name + _STEP, np.float64(self._steps[name])))
        chunks = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
        for name, arr in entries:
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<B", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f8").tobytes())
        return b"".join(chunks)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        reader = _Reader(blob)
        if reader.take(4) != MAGIC:
            raise FormatError("bad magic: not a parameter checkpoint")
        version, count = struct.unpack("<HI", reader.take(6))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        store = cls()
        moments = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", reader.take(2))
            name = reader.take(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", reader.take(1))
            shape = struct.unpack(f"<{rank}I", reader.take(4 * rank))
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).copy()
            for tag in (_M1, _M2, _STEP):
                if name.endswith(tag):
                    moments[(name[: -len(tag)], tag)] = arr
                    break
            else:
                store.add(name, arr)
        reader.expect_end()
        for (base, tag), arr in moments.items():
            if base not in store._params:
                raise FormatError(f"optimizer state for unknown parameter {base!r}")
            if tag == _M1:
                store._m1[base] = arr
            elif tag == _M2:
                store._m2[base] = arr
            else:
                store._steps[base] = int(arr)
        return store

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("truncated checkpoint payload")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def expect_end(self):
        if self.pos != len(self.blob):
            raise FormatError("trailing bytes after checkpoint payload")


def adam_step(store, grads, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """Standard bias-corrected Adam update applied in place.

    Every key of ``grads`` must name a parameter in the store; parameters
    without a gradient entry are left untouched.
    """
    b1, b2 = betas
    for name, g in grads.items():
        if name not in store._params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            raise ArithmeticError(f"non-finite gradient for {name!r}")
        t = store._steps[name] + 1
        m1 = store._m1[name] = b1 * store._m1[name] + (1 - b1) * g
        m2 = store._m2[name] = b2 * store._m2[name] + (1 - b2) * g * g
        store._steps[name] = t
        m1_hat = m1 / (1 - b1**t)
        m2_hat = m2 / (1 - b2**t)
        p = store._params[name]
        p.data = p.data - lr * m1_hat / (np.sqrt(m2_hat) + eps)


# -- model checkpoints ---------------------------------------------------------


def save_checkpoint(path, header, store):
    """Length-prefixed JSON architecture header followed by the store blob."""
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(store.to_bytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError("truncated checkpoint file")
    (hlen,) = struct.unpack("<I", blob[:4])
    if 4 + hlen > len(blob):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"bad checkpoint header: {err}") from None
    store = ParameterStore.from_bytes(blob[4 + hlen :])
    return header, store
