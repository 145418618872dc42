"""Smooth parametric models: MLP log-density (energy) and score networks.

Both networks use Softplus activations throughout so they are infinitely
differentiable, which every nested-derivative objective here relies on.
No normalization layers; the energy head is a plain linear map to one
output. Parameters are leaf tensors owned by the model; forwards run
either on the recorded graph (`energy`/`score`) or as raw numpy
(`energy_np`/`score_np`) when no derivative is needed.
"""

from __future__ import annotations

import struct
from math import sqrt

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    gradient,
    leaf,
    matmul,
    mul,
    reshape,
    scale,
    softplus,
    square,
    tsum,
)

__all__ = [
    "MlpEnergyModel",
    "MlpScoreModel",
    "QuadraticEnergyModel",
    "ShiftedEnergyModel",
    "init_mlp_params",
    "glorot_bound",
    "save_model",
    "load_model",
    "reference_energy_model",
    "reference_score_model",
]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return sqrt(6.0 / (fan_in + fan_out))


def init_mlp_params(widths, seed: int, dtype=np.float64):
    """Zero-mean uniform weights with the Glorot bound, zero biases.

    Deterministic under seed: the same (widths, seed) pair always yields
    bit-identical tensors.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = glorot_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        weights.append(leaf(w, requires_grad=True, dtype=dtype))
        biases.append(leaf(np.zeros(fan_out, dtype=dtype), requires_grad=True, dtype=dtype))
    return weights, biases


class _Mlp:
    activation = "softplus"

    def __init__(self, widths, seed: int = 0, dtype=np.float64):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        self.dtype = np.dtype(dtype)
        self.weights, self.biases = init_mlp_params(widths, seed, self.dtype)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"w{i}", f"b{i}"))
        return names

    def _check_width(self, x, op: str):
        shape = np.shape(x.value if isinstance(x, Tensor) else x)
        if len(shape) != 2 or shape[1] != self.input_dim:
            raise ShapeError(op, shape, (-1, self.input_dim))

    def _forward(self, x, weights, biases):
        h = x
        for w, b in zip(weights[:-1], biases[:-1]):
            h = softplus(add(matmul(h, w), b))
        return add(matmul(h, weights[-1]), biases[-1])


class MlpEnergyModel(_Mlp):
    """Unnormalized log-density L(x): [B, d] -> [B]."""

    kind = "energy-mlp"

    def energy(self, x):
        self._check_width(x, "energy_forward")
        out = self._forward(x, self.weights, self.biases)
        n = np.shape(out.value if isinstance(out, Tensor) else out)[0]
        return reshape(out, (n,))

    def energy_np(self, x: np.ndarray) -> np.ndarray:
        self._check_width(x, "energy_forward")
        x = np.asarray(x, dtype=self.dtype)
        out = self._forward(x, [w.value for w in self.weights], [b.value for b in self.biases])
        return out.reshape(out.shape[0])

    def score_np(self, x: np.ndarray) -> np.ndarray:
        """grad_x of the energy, by one reverse pass (no graph kept)."""
        xt = leaf(np.asarray(x, dtype=self.dtype), requires_grad=True)
        return gradient(tsum(self.energy(xt)), xt, create_graph=False)

    __call__ = energy


class MlpScoreModel(_Mlp):
    """Direct score network s(x): [B, d] -> [B, d]."""

    kind = "score-mlp"

    def __init__(self, widths, seed: int = 0, dtype=np.float64):
        super().__init__(widths, seed=seed, dtype=dtype)
        if self.widths[-1] != self.widths[0]:
            raise ValueError(
                f"score model output width {self.widths[-1]} must equal input width {self.widths[0]}"
            )

    def score(self, x):
        self._check_width(x, "score_forward")
        return self._forward(x, self.weights, self.biases)

    def score_np(self, x: np.ndarray) -> np.ndarray:
        self._check_width(x, "score_forward")
        x = np.asarray(x, dtype=self.dtype)
        return self._forward(x, [w.value for w in self.weights], [b.value for b in self.biases])

    __call__ = score


class QuadraticEnergyModel:
    """Closed-form Gaussian energy L(x) = -scale * |x - mean|^2 / 2 + offset.

    With defaults this is the standard normal log-density up to a
    constant; gradients and Hessians are available analytically, which
    makes it the exactness oracle for every objective.
    """

    kind = "quadratic"
    activation = "none"

    def __init__(self, dim: int = 2, scale: float = 1.0, mean=None, offset: float = 0.0,
                 learnable: bool = False, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.dim = int(dim)
        mean = np.zeros(self.dim) if mean is None else np.asarray(mean, dtype=self.dtype)
        self.learnable = bool(learnable)
        self._scale = leaf(np.asarray(scale), requires_grad=self.learnable, dtype=self.dtype)
        self._mean = leaf(mean, requires_grad=self.learnable, dtype=self.dtype)
        self.offset = float(offset)

    @property
    def input_dim(self) -> int:
        return self.dim

    @property
    def params(self) -> list[Tensor]:
        return [self._scale, self._mean] if self.learnable else []

    @property
    def param_names(self) -> list[str]:
        return ["scale", "mean"] if self.learnable else []

    def energy(self, x):
        shape = np.shape(x.value if isinstance(x, Tensor) else x)
        if len(shape) != 2 or shape[1] != self.dim:
            raise ShapeError("energy_forward", shape, (-1, self.dim))
        centered = add(x, scale(self._mean, -1.0))
        sq = tsum(square(centered), axis=-1)
        return add(scale(mul(sq, self._scale), -0.5), self.offset)

    def energy_np(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        d2 = np.sum((x - self._mean.value) ** 2, axis=-1)
        return -0.5 * float(self._scale.value) * d2 + self.offset

    def score_np(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        return -float(self._scale.value) * (x - self._mean.value)

    __call__ = energy


class ShiftedEnergyModel:
    """Wraps an energy model, adding a constant: the objectives must be
    invariant to this shift (the normalizer cancels)."""

    kind = "shifted"

    def __init__(self, inner, shift: float):
        self.inner = inner
        self.shift = float(shift)

    @property
    def input_dim(self) -> int:
        return self.inner.input_dim

    @property
    def params(self):
        return self.inner.params

    @property
    def param_names(self):
        return self.inner.param_names

    @property
    def dtype(self):
        return self.inner.dtype

    def energy(self, x):
        return add(self.inner.energy(x), self.shift)

    def energy_np(self, x):
        return self.inner.energy_np(x) + self.shift

    __call__ = energy


# ----------------------------------------------------------------------
# checkpoints: magic "FDSM", little-endian, parameters stored as f64

_MAGIC = b"FDSM"
_VERSION = 1
_KINDS = {"energy-mlp": 0, "score-mlp": 1, "quadratic": 2}
_KINDS_INV = {v: k for k, v in _KINDS.items()}
_ACTIVATIONS = {"softplus": 0, "none": 1}
_ACTIVATIONS_INV = {v: k for k, v in _ACTIVATIONS.items()}
_DTYPES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_DTYPES_INV = {0: np.dtype(np.float64), 1: np.dtype(np.float32)}


def _model_arrays(model) -> list[np.ndarray]:
    if isinstance(model, QuadraticEnergyModel):
        return [
            np.asarray(model._scale.value),
            np.asarray(model._mean.value),
            np.asarray(model.offset),
        ]
    return [p.value for p in model.params]


def save_model(path, model) -> None:
    """Binary checkpoint: header, per-array shape records, f64 payload."""
    if isinstance(model, ShiftedEnergyModel):
        raise ValueError("save_model: persist the wrapped model, not the shift view")
    arrays = _model_arrays(model)
    flags = 1 if getattr(model, "learnable", False) else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBBBB", _VERSION, _KINDS[model.kind],
                             _ACTIVATIONS[model.activation], _DTYPES[model.dtype], flags))
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a model checkpoint (magic {magic!r})")
        version, kind_b, act_b, dtype_b, flags = struct.unpack("<IBBBB", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        kind = _KINDS_INV[kind_b]
        dtype = _DTYPES_INV[dtype_b]
        (n_arrays,) = struct.unpack("<I", fh.read(4))
        shapes = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shapes.append(struct.unpack(f"<{ndim}I", fh.read(4 * ndim)))
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            arrays.append(data.astype(dtype))

    if kind == "quadratic":
        scale_v, mean_v, offset_v = arrays
        return QuadraticEnergyModel(
            dim=mean_v.shape[0], scale=float(scale_v), mean=mean_v,
            offset=float(offset_v), learnable=bool(flags & 1), dtype=dtype,
        )
    widths = [arrays[0].shape[0]] + [w.shape[1] for w in arrays[0::2]]
    cls = MlpEnergyModel if kind == "energy-mlp" else MlpScoreModel
    model = cls(widths, seed=0, dtype=dtype)
    for p, arr in zip(model.params, arrays):
        p.value[...] = arr
    return model


def reference_energy_model(seed: int = 0, dim: int = 2, hidden: int = 256,
                           depth: int = 3, dtype=np.float64) -> MlpEnergyModel:
    """The desk-scale experiment backbone: 3 hidden layers of width 256."""
    return MlpEnergyModel((dim, *([hidden] * depth), 1), seed=seed, dtype=dtype)


def reference_score_model(seed: int = 0, dim: int = 2, hidden: int = 256,
                          depth: int = 3, dtype=np.float64) -> MlpScoreModel:
    return MlpScoreModel((dim, *([hidden] * depth), dim), seed=seed, dtype=dtype)
