"""Small classifiers (MLP / small CNN) with flat parameter views.

Models expose their parameters as one contiguous vector plus a layout map,
which is what weight averaging, interpolation probes and checkpointing
work against. No normalization layers, so there is no train/eval-mode
state to carry around.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; round-trips through dict/JSON unchanged."""

    arch: str  # "mlp" | "small_cnn"
    input_shape: tuple[int, int, int]  # (C, H, W)
    hidden: tuple[int, ...]  # layer widths (mlp) or channel counts (small_cnn)
    n_classes: int

    def __post_init__(self):
        if self.arch not in ("mlp", "small_cnn"):
            raise ValueError(f"unsupported architecture tag {self.arch!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "input_shape": list(self.input_shape),
            "hidden": list(self.hidden),
            "n_classes": self.n_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            hidden=tuple(d["hidden"]),
            n_classes=int(d["n_classes"]),
        )


@dataclass
class ParamVector:
    """All parameters in one contiguous vector plus a layout map."""

    values: np.ndarray
    layout: tuple[tuple[str, int, tuple[int, ...]], ...]  # (name, offset, shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def slice(self, name: str) -> np.ndarray:
        """View of one named parameter, reshaped."""
        for pname, offset, shape in self.layout:
            if pname == name:
                n = int(np.prod(shape))
                return self.values[offset : offset + n].reshape(shape)
        raise KeyError(name)

    def __len__(self) -> int:
        return self.values.size


def interpolate(theta: ParamVector, direction: ParamVector, t: float) -> ParamVector:
    """theta + t * direction, for 1-D landscape probes."""
    if len(theta) != len(direction):
        raise ValueError(f"length mismatch {len(theta)} vs {len(direction)}")
    return ParamVector(theta.values + theta.values.dtype.type(t) * direction.values,
                       theta.layout)


class Model:
    """A classifier: a spec plus named parameter tensors in a fixed order."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params  # insertion order defines the flat layout

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag

    def get_params(self) -> ParamVector:
        layout = []
        chunks = []
        offset = 0
        for name, p in self.params.items():
            layout.append((name, offset, p.shape))
            chunks.append(p.data.reshape(-1).copy())
            offset += p.size
        return ParamVector(np.concatenate(chunks), tuple(layout))

    def set_params(self, vec: ParamVector | np.ndarray) -> None:
        values = vec.values if isinstance(vec, ParamVector) else np.asarray(vec)
        total = sum(p.size for p in self.params.values())
        if values.size != total:
            raise ValueError(f"parameter vector length {values.size}, expected {total}")
        offset = 0
        for p in self.params.values():
            p.data[...] = values[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "Model":
        params = {
            name: Tensor(p.data.copy(), dtype=p.dtype, requires_grad=p.requires_grad)
            for name, p in self.params.items()
        }
        return Model(self.spec, params)


def default_small_cnn(input_shape=(3, 32, 32), n_classes=10) -> ModelSpec:
    """Stride-2 conv blocks (16/32/64) + linear head; well under 500k params."""
    return ModelSpec("small_cnn", input_shape, (16, 32, 64), n_classes)


def default_mlp(input_shape=(1, 28, 28), n_classes=10) -> ModelSpec:
    return ModelSpec("mlp", input_shape, (256, 128), n_classes)


def init_model(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Deterministic init: He fan-in scaled weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def weight(name, shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        params[name] = Tensor(
            rng.standard_normal(shape) * std, dtype=dtype, requires_grad=True
        )

    def bias(name, n):
        params[name] = Tensor(np.zeros(n), dtype=dtype, requires_grad=True)

    c, h, w = spec.input_shape
    if spec.arch == "mlp":
        d = c * h * w
        for i, width in enumerate(spec.hidden):
            weight(f"fc{i}.w", (d, width), d)
            bias(f"fc{i}.b", width)
            d = width
        weight("head.w", (d, spec.n_classes), d)
        bias("head.b", spec.n_classes)
    else:  # small_cnn: 3x3 stride-2 conv blocks + linear head
        ch = c
        for i, f in enumerate(spec.hidden):
            weight(f"conv{i}.w", (f, ch, 3, 3), ch * 9)
            bias(f"conv{i}.b", f)
            ch = f
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
        d = ch * h * w
        weight("head.w", (d, spec.n_classes), d)
        bias("head.b", spec.n_classes)
    return Model(spec, params)


def forward(model: Model, batch: Tensor) -> Tensor:
    """Logits for a batch; differentiable w.r.t. parameters and the batch."""
    spec = model.spec
    if batch.shape[1:] != spec.input_shape:
        raise T.ShapeError(
            f"batch shape {batch.shape} does not match input {spec.input_shape}"
        )
    p = model.params
    if spec.arch == "mlp":
        x = T.flatten(batch)
        for i in range(len(spec.hidden)):
            x = T.relu(T.add_rowvec(T.matmul(x, p[f"fc{i}.w"]), p[f"fc{i}.b"]))
    else:
        x = batch
        for i in range(len(spec.hidden)):
            x = T.relu(
                T.add_channel(
                    T.conv2d(x, p[f"conv{i}.w"], stride=2, padding=1), p[f"conv{i}.b"]
                )
            )
        x = T.flatten(x)
    logits = T.add_rowvec(T.matmul(x, p["head.w"]), p["head.b"])
    if not np.isfinite(logits.data).all():
        raise FloatingPointError("non-finite logits")
    return logits


def predict(model: Model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Class predictions on raw image arrays, no tape."""
    out = np.empty(len(images), dtype=np.int64)
    for lo in range(0, len(images), batch_size):
        batch = Tensor(images[lo : lo + batch_size], dtype=model.dtype)
        out[lo : lo + batch_size] = forward(model, batch).data.argmax(axis=1)
    return out


# ---------------------------------------------------------------------------
# checkpoint container
#
# Byte layout (all integers little-endian):
#   [0:8)    magic b"ATGCKPT1" (format version baked into the magic)
#   [8:12)   uint32 header length L
#   [12:12+L) UTF-8 JSON header: free-form metadata plus an "arrays" list
#            of {"name", "dtype", "shape"} entries in storage order
#   [12+L:)  the raw arrays, concatenated, little-endian, C order;
#            the first array is always the flat parameter vector
#
# Loaders must reject a bad magic outright.

CKPT_MAGIC = b"ATGCKPT1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint32": "<u4"}


def write_container(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Atomic write (temp + rename) of a versioned checkpoint container."""
    header = dict(meta)
    header["arrays"] = [
        {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape)}
        for name, arr in arrays.items()
    ]
    for entry in header["arrays"]:
        if entry["dtype"] not in _DTYPES:
            raise ValueError(f"unsupported array dtype {entry['dtype']}")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(np.array(len(blob), dtype="<u4").tobytes())
        fh.write(blob)
        for name, arr in arrays.items():
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    os.replace(tmp, path)


def read_container(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic/version {magic!r} in {path}")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        meta = json.loads(fh.read(int(hlen)).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in meta.pop("arrays"):
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            dt = np.dtype(_DTYPES[entry["dtype"]])
            raw = fh.read(n * dt.itemsize)
            if len(raw) != n * dt.itemsize:
                raise ValueError(f"truncated checkpoint {path}")
            arrays[entry["name"]] = (
                np.frombuffer(raw, dtype=dt)
                .astype(entry["dtype"], copy=True)
                .reshape(entry["shape"])
            )
    return meta, arrays


def save_model(path: str, model: Model, **meta) -> None:
    """Checkpoint just a model (spec header + parameter vector)."""
    pv = model.get_params()
    header = {"spec": model.spec.to_dict(), **meta}
    write_container(path, header, {"params": pv.values})


def load_model(path: str, dtype=np.float32) -> tuple[Model, dict]:
    meta, arrays = read_container(path)
    spec = ModelSpec.from_dict(meta["spec"])
    model = init_model(spec, seed=0, dtype=dtype)
    model.set_params(arrays["params"].astype(dtype, copy=False))
    return model, meta
