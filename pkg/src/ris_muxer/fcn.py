"""Fully convolutional phase network with hand-written backpropagation.

Hidden layers are conv -> leaky ReLU -> dropout, the last layer is a
linear conv producing one map of phases (radians, unwrapped). Convolutions
are zero padded so every layer keeps the RIS grid size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .seeding import make_rng

CHECKPOINT_MAGIC = b"RISFCN1\n"
_WINDOW_BUDGET = 2 ** 24  # doubles per im2col chunk


class FcnError(ValueError):
    pass


class UnsupportedPrimitiveError(FcnError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"objective head contains unsupported primitive {name!r}")


class ArchSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    users: int = Field(2, ge=1)
    ris_shape: tuple[int, int] = (16, 16)
    n_layers: int = Field(8, ge=1)
    kernel: tuple[int, int] = (5, 5)
    hidden_maps: int = Field(32, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    negative_slope: float = 0.01

    @model_validator(mode="after")
    def _check(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel sizes must be odd, got {self.kernel}")
        return self

    @property
    def in_maps(self) -> int:
        return 4 * self.users

    @property
    def padding(self) -> tuple[int, int]:
        return ((self.kernel[0] - 1) // 2, (self.kernel[1] - 1) // 2)

    def layer_maps(self) -> list[tuple[int, int]]:
        maps = [self.in_maps] + [self.hidden_maps] * (self.n_layers - 1) + [1]
        return list(zip(maps[:-1], maps[1:]))


def required_layers(kernel, ris_shape) -> int:
    """Smallest layer count whose cumulative one-sided reach spans the grid."""
    reach = [(k - 1) // 2 for k in kernel]
    if min(reach) == 0:
        raise FcnError("1x1 kernels never cover the grid")
    return max(math.ceil(ris_shape[0] / reach[0]), math.ceil(ris_shape[1] / reach[1]))


def covers_grid(arch: ArchSpec) -> bool:
    ph, pw = arch.padding
    return arch.n_layers * ph >= arch.ris_shape[0] and arch.n_layers * pw >= arch.ris_shape[1]


def reference_arch(ris_shape=(16, 16), users: int = 2, hidden_maps: int = 32) -> ArchSpec:
    small = tuple(ris_shape) == (16, 16)
    return ArchSpec(users=users, ris_shape=tuple(ris_shape), n_layers=8,
                    kernel=(5, 5) if small else (13, 13), hidden_maps=hidden_maps,
                    dropout=0.1 if small else 0.35)


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out, in, kh, kw)
    biases: np.ndarray   # (out,)

    @property
    def pad(self) -> tuple[int, int]:
        return ((self.kernels.shape[2] - 1) // 2, (self.kernels.shape[3] - 1) // 2)

    @property
    def in_maps(self) -> int:
        return self.kernels.shape[1]

    @property
    def out_maps(self) -> int:
        return self.kernels.shape[0]


@dataclass
class FcnModel:
    arch: ArchSpec
    layers: list[ConvLayer]
    # fixed per-input-map scale, set from training data; not trained
    input_scale: np.ndarray = None
    lineage: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input_scale is None:
            self.input_scale = np.ones(self.arch.in_maps)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.kernels, layer.biases]
        return out

    def set_params(self, params) -> None:
        for i, layer in enumerate(self.layers):
            layer.kernels = params[2 * i]
            layer.biases = params[2 * i + 1]

    def copy(self) -> "FcnModel":
        layers = [ConvLayer(l.kernels.copy(), l.biases.copy()) for l in self.layers]
        return FcnModel(self.arch, layers, self.input_scale.copy(), dict(self.lineage))

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params()])

    def load_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        out, i = [], 0
        for p in self.params():
            out.append(flat[i:i + p.size].reshape(p.shape).copy())
            i += p.size
        self.set_params(out)


@dataclass
class GradientBundle:
    value: float
    grads: list[np.ndarray]  # mirrors FcnModel.params()
    per_sample: np.ndarray = None


def init_model(arch: ArchSpec, seed: int, check_coverage: bool = True) -> FcnModel:
    """Glorot-uniform kernels, zero biases."""
    if check_coverage and not covers_grid(arch):
        need = required_layers(arch.kernel, arch.ris_shape)
        raise FcnError(f"{arch.n_layers} layers of {arch.kernel} kernels do not cover a "
                       f"{arch.ris_shape} grid; need at least {need}")
    rng = make_rng(seed, "init-model")
    kh, kw = arch.kernel
    layers = []
    for cin, cout in arch.layer_maps():
        bound = np.sqrt(6.0 / ((cin + cout) * kh * kw))
        layers.append(ConvLayer(rng.uniform(-bound, bound, (cout, cin, kh, kw)), np.zeros(cout)))
    return FcnModel(arch, layers, lineage={"init_seed": int(seed)})


# -- convolution ------------------------------------------------------------

def _pad(x, ph, pw):
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _chunks(b, per_sample):
    step = max(1, _WINDOW_BUDGET // max(per_sample, 1))
    return range(0, b, step), step


def _correlate(x, kernels, ph, pw):
    """Zero-padded cross-correlation of (B, C, H, W) with (O, C, kh, kw)."""
    b, c, h, w = x.shape
    o, _, kh, kw = kernels.shape
    out = np.empty((b, o, h, w))
    starts, step = _chunks(b, c * h * w * kh * kw)
    for s in starts:
        win = sliding_window_view(_pad(x[s:s + step], ph, pw), (kh, kw), axis=(2, 3))
        out[s:s + step] = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out


def _kernel_grad(x, dout, kh, kw, ph, pw):
    b, c, h, w = x.shape
    acc = np.zeros((dout.shape[1], c, kh, kw))
    starts, step = _chunks(b, c * h * w * kh * kw)
    for s in starts:
        win = sliding_window_view(_pad(x[s:s + step], ph, pw), (kh, kw), axis=(2, 3))
        acc += np.tensordot(dout[s:s + step], win, axes=([0, 2, 3], [0, 2, 3]))
    return acc


def conv2d_padded(layer: ConvLayer, x) -> np.ndarray:
    """Apply one layer to (C, H, W) or (B, C, H, W); spatial size is preserved."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[1] != layer.in_maps:
        raise FcnError(f"layer expects {layer.in_maps} input maps, got {xb.shape[1]}")
    ph, pw = layer.pad
    out = _correlate(xb, layer.kernels, ph, pw) + layer.biases[None, :, None, None]
    assert out.shape[2:] == xb.shape[2:]
    return out[0] if single else out


def conv2d_backward(layer: ConvLayer, x, dout, need_input_grad: bool = True):
    """Gradients of a padded conv: (d input, d kernels, d biases)."""
    ph, pw = layer.pad
    kh, kw = layer.kernels.shape[2:]
    dk = _kernel_grad(x, dout, kh, kw, ph, pw)
    db = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_input_grad:
        flipped = layer.kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _correlate(dout, flipped, ph, pw)
    return dx, dk, db


# -- forward / backward -----------------------------------------------------

def _dropout_masks(model: FcnModel, batch: int, rng) -> list:
    rate = model.arch.dropout
    keep = 1.0 - rate
    h, w = model.arch.ris_shape
    masks = []
    for layer in model.layers[:-1]:
        if rate == 0.0:
            masks.append(None)
        else:
            m = rng.random((batch, layer.out_maps, h, w)) < keep
            masks.append(m / keep)
    return masks


def _as_rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return make_rng(0 if seed_or_rng is None else int(seed_or_rng), "dropout")


def fcn_forward(model: FcnModel, gamma, mode: str = "eval", seed=None):
    """Map features (4U, H, W) or (B, 4U, H, W) to phases (H, W) or (B, H, W).

    In ``train`` mode dropout masks are drawn from ``seed`` (an int or a
    numpy Generator) and scaled by 1/(1-rate). Returns ``(psi, cache)``.
    """
    if mode not in ("train", "eval"):
        raise FcnError(f"mode must be 'train' or 'eval', got {mode!r}")
    g = np.asarray(gamma, dtype=np.float64)
    single = g.ndim == 3
    x = g[None] if single else g
    if x.shape[1] != model.arch.in_maps:
        raise FcnError(f"expected {model.arch.in_maps} feature maps, got {x.shape[1]}")
    x = x * model.input_scale[None, :, None, None]
    masks = _dropout_masks(model, x.shape[0], _as_rng(seed)) if mode == "train" else [None] * (len(model.layers) - 1)
    slope = model.arch.negative_slope
    inputs, pre = [], []
    for i, layer in enumerate(model.layers):
        inputs.append(x)
        z = conv2d_padded(layer, x)
        if i == len(model.layers) - 1:
            x = z
            break
        pre.append(z)
        x = np.where(z > 0, z, slope * z)
        if masks[i] is not None:
            x = x * masks[i]
    psi = x[:, 0]
    cache = {"inputs": inputs, "pre": pre, "masks": masks}
    return (psi[0] if single else psi), cache


def fcn_backward(model: FcnModel, cache, dpsi) -> list[np.ndarray]:
    """Backpropagate d objective / d psi (B, H, W) to parameter gradients."""
    slope = model.arch.negative_slope
    d = np.asarray(dpsi, dtype=np.float64)[:, None]
    grads = [None] * (2 * len(model.layers))
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        dx, dk, db = conv2d_backward(layer, cache["inputs"][i], d, need_input_grad=i > 0)
        grads[2 * i], grads[2 * i + 1] = dk, db
        if i == 0:
            break
        if cache["masks"][i - 1] is not None:
            dx = dx * cache["masks"][i - 1]
        d = np.where(cache["pre"][i - 1] > 0, dx, slope * dx)
    return grads


# -- objective heads --------------------------------------------------------

class ObjectiveHead:
    """Differentiable scalar function of a batch of phase fields.

    ``value_and_grad(psi)`` takes (B, N) phases and returns per-sample values
    (B,) and their gradients (B, N). The network objective is the batch mean.
    """

    def value_and_grad(self, psi_flat):
        raise NotImplementedError


class ConstantHead(ObjectiveHead):
    def __init__(self, value: float = 0.0):
        self.value = value

    def value_and_grad(self, psi_flat):
        return np.full(psi_flat.shape[0], self.value), np.zeros_like(psi_flat)


class ScaledHead(ObjectiveHead):
    def __init__(self, scale: float, head: ObjectiveHead):
        self.scale, self.head = scale, head

    def value_and_grad(self, psi_flat):
        v, g = self.head.value_and_grad(psi_flat)
        return self.scale * v, self.scale * g


class SumHead(ObjectiveHead):
    def __init__(self, *heads: ObjectiveHead):
        self.heads = heads

    def value_and_grad(self, psi_flat):
        total_v, total_g = 0.0, 0.0
        for h in self.heads:
            v, g = _checked(h).value_and_grad(psi_flat)
            total_v, total_g = total_v + v, total_g + g
        return total_v, total_g


def _checked(head) -> ObjectiveHead:
    if not isinstance(head, ObjectiveHead):
        raise UnsupportedPrimitiveError(type(head).__name__)
    return head


def fcn_gradient(model: FcnModel, gamma, head: ObjectiveHead, mode: str = "train", seed=None) -> GradientBundle:
    """Mean head value over the batch and its gradient for every parameter.

    Dropout masks are drawn once and reused in the backward pass.
    """
    head = _checked(head)
    psi, cache = fcn_forward(model, gamma, mode=mode, seed=seed)
    single = psi.ndim == 2
    psib = psi[None] if single else psi
    b = psib.shape[0]
    values, dflat = head.value_and_grad(psib.reshape(b, -1))
    values = np.broadcast_to(np.asarray(values, dtype=np.float64), (b,))
    dpsi = np.asarray(dflat, dtype=np.float64).reshape(psib.shape) / b
    grads = fcn_backward(model, cache, dpsi)
    return GradientBundle(float(values.mean()), grads, np.array(values))


# -- checkpoints ------------------------------------------------------------
#
# Layout: magic line, one JSON header line, then every parameter array as
# little-endian float64 in declaration order (kernels_0, biases_0, ...),
# followed by the input scale vector.

def save_model(model: FcnModel, path) -> None:
    header = {
        "arch": model.arch.model_dump(mode="json"),
        "lineage": model.lineage,
        "shapes": [list(p.shape) for p in model.params()] + [list(model.input_scale.shape)],
    }
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for p in model.params() + [model.input_scale]:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> FcnModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FcnError(f"{path}: not a model checkpoint")
    end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC):end])
    arch = ArchSpec(**header["arch"])
    offset = end + 1
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise FcnError(f"{path}: truncated parameter data at byte {offset}")
        arrays.append(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape))
        offset += 8 * n
    if offset != len(raw):
        raise FcnError(f"{path}: {len(raw) - offset} trailing bytes")
    layers = [ConvLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(arch.n_layers)]
    return FcnModel(arch, layers, arrays[-1], header.get("lineage", {}))
