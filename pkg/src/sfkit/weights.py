"""Weight containers, seeded initialization, and the SFWT weight-file format.

All learnable arrays are drawn from a seeded uniform distribution on
[-0.1, 0.1] so every run is reproducible from a single integer.  One binary
format serves every module: named sections, each a float64 little-endian
payload with an explicit shape.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError

WEIGHTS_MAGIC = b"SFWT"
WEIGHTS_VERSION = 1

INIT_SCALE = 0.1


def uniform_init(rng, shape):
    return rng.uniform(-INIT_SCALE, INIT_SCALE, shape)


@dataclass(frozen=True)
class MlpWeights:
    """Two-layer perceptron in -> hidden -> out with a ReLU in between."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0] or self.w1.shape[1] != self.w2.shape[0]:
            raise ShapeError(
                f"inconsistent MLP shapes: w1 {self.w1.shape}, w2 {self.w2.shape}"
            )
        if self.w2.shape[1] != self.b2.shape[0]:
            raise ShapeError(f"w2 {self.w2.shape} vs b2 {self.b2.shape}")

    @property
    def n_in(self):
        return self.w1.shape[0]

    @property
    def n_out(self):
        return self.w2.shape[1]

    @classmethod
    def seeded(cls, n_in, n_hidden, n_out, rng):
        return cls(
            w1=uniform_init(rng, (n_in, n_hidden)),
            b1=uniform_init(rng, (n_hidden,)),
            w2=uniform_init(rng, (n_hidden, n_out)),
            b2=uniform_init(rng, (n_out,)),
        )

    @classmethod
    def zeros(cls, n_in, n_hidden, n_out):
        return cls(
            w1=np.zeros((n_in, n_hidden)),
            b1=np.zeros(n_hidden),
            w2=np.zeros((n_hidden, n_out)),
            b2=np.zeros(n_out),
        )

    def apply(self, x):
        """Row-wise forward pass over an (N, n_in) matrix."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected (N, {self.n_in}) input, got {x.shape}")
        hidden = np.maximum(x @ self.w1 + self.b1, 0.0)
        return hidden @ self.w2 + self.b2


def save_weight_dict(weights, path):
    """Write {name: float array} as an SFWT file. Sections are name-sorted."""
    chunks = [WEIGHTS_MAGIC, struct.pack("<H", WEIGHTS_VERSION)]
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_weight_dict(path):
    """Read an SFWT file back into {name: float64 array}."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated weight file while reading {what}", pos)
        out = data[pos : pos + n]
        pos += n
        return out

    if take(4, "magic") != WEIGHTS_MAGIC:
        raise FormatError("bad magic, not an SFWT weight file", 0)
    version = struct.unpack("<H", take(2, "version"))[0]
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight format version {version}", 4)
    out = {}
    while pos < len(data):
        name_len = struct.unpack("<H", take(2, "section name length"))[0]
        name = take(name_len, "section name").decode("utf-8")
        rank = struct.unpack("<B", take(1, f"{name} rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n_items, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def flatten_tree(tree, prefix=""):
    """Flatten a nested dict/dataclass/list structure of arrays to dotted names."""
    flat = {}
    if isinstance(tree, np.ndarray):
        flat[prefix] = tree
        return flat
    if isinstance(tree, dict):
        items = tree.items()
    elif isinstance(tree, (list, tuple)):
        items = ((str(i), v) for i, v in enumerate(tree))
    elif hasattr(tree, "__dataclass_fields__"):
        items = ((k, getattr(tree, k)) for k in tree.__dataclass_fields__)
    else:
        flat[prefix] = np.asarray(tree, dtype=np.float64)
        return flat
    for key, value in items:
        name = f"{prefix}.{key}" if prefix else key
        flat.update(flatten_tree(value, name))
    return flat
