"""Segmentation network: construction, training loss, epochs, inference.

A Network is a straight-line stack of layers built from an
ArchitectureSpec.  Parameters live in float32; loss and metric reductions
accumulate in float64.  Training mutates the network in place (a network is
exclusively owned while training); inference is read-only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .arch import (
    ArchitectureSpec,
    AvgPool,
    AvgPoolSame,
    Conv,
    Inception,
    MaxPool,
    Relu,
    Sigmoid,
)
from .errors import ContractViolation, NumericError
from .ops import AdamState
from .volumes import SegmentationMask, VolumeImage

__all__ = [
    "Network",
    "TrainReport",
    "build_network",
    "forward_full",
    "cdc_loss",
    "dice_loss",
    "train_epoch",
    "predict_volume",
]

CDC_EPSILON = 1e-7


class _ConvUnit:
    """One convolution with its weights; used on the main path and in branches."""

    def __init__(self, name: str, in_channels: int, desc: Conv):
        self.name = name
        self.k = desc.k
        self.weight = np.zeros(
            (desc.out_channels, in_channels, desc.k, desc.k), dtype=np.float32
        )
        self.bias = np.zeros(desc.out_channels, dtype=np.float32)
        self._x: np.ndarray | None = None

    def init_weights(self, rng: np.random.Generator) -> None:
        # Glorot-uniform (fan-average) scaling.  Raw-HU inputs are large, and
        # fan-in-only scaling saturates the float32 sigmoid so hard at
        # initialization that every gradient is exactly zero and training
        # cannot start; the fan-average limit keeps initial pre-sigmoid
        # values inside the live region.
        fan_in = self.weight.shape[1] * self.k * self.k
        fan_out = self.weight.shape[0] * self.k * self.k
        limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
        self.weight[...] = rng.uniform(-limit, limit, size=self.weight.shape)
        self.bias[...] = 0.0

    def parameters(self):
        yield f"{self.name}.w", self.weight
        yield f"{self.name}.b", self.bias

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return ops.conv2d(x, self.weight, self.bias, padding="same")

    def backward(self, upstream: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        gx, gw, gb = ops.conv2d_backward(self._x, self.weight, upstream, padding="same")
        grads[f"{self.name}.w"] += gw
        grads[f"{self.name}.b"] += gb
        return gx


class _ActUnit:
    def __init__(self, kind: str):
        self.kind = kind
        self._x: np.ndarray | None = None

    def parameters(self):
        return iter(())

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return ops.activation(x, self.kind)

    def backward(self, upstream: np.ndarray, grads) -> np.ndarray:
        return ops.activation_backward(self._x, self.kind, upstream)


class _StridePoolUnit:
    def __init__(self, kind: str, k: int):
        self.kind = kind
        self.k = k
        self._x: np.ndarray | None = None

    def parameters(self):
        return iter(())

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return ops.pool2d(x, self.kind, self.k)

    def backward(self, upstream: np.ndarray, grads) -> np.ndarray:
        return ops.pool2d_backward(self._x, self.kind, self.k, upstream)


class _AvgSameUnit:
    def __init__(self, k: int):
        self.k = k
        self._x: np.ndarray | None = None

    def parameters(self):
        return iter(())

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        if train:
            self._x = x
        return ops.avgpool_same(x, self.k)

    def backward(self, upstream: np.ndarray, grads) -> np.ndarray:
        return ops.avgpool_same_backward(self._x, self.k, upstream)


class _InceptionUnit:
    """Parallel branches whose outputs concatenate along the channel axis."""

    def __init__(self, name: str, in_channels: int, desc: Inception):
        self.branches: list[list] = []
        self.branch_channels: list[int] = []
        for b, branch in enumerate(desc.branches):
            units = []
            ch = in_channels
            for s, step in enumerate(branch):
                if isinstance(step, Conv):
                    units.append(_ConvUnit(f"{name}.br{b}.s{s}", ch, step))
                    ch = step.out_channels
                elif isinstance(step, Relu):
                    units.append(_ActUnit("relu"))
                elif isinstance(step, AvgPoolSame):
                    units.append(_AvgSameUnit(step.k))
            self.branches.append(units)
            self.branch_channels.append(ch)

    def parameters(self):
        for units in self.branches:
            for u in units:
                yield from u.parameters()

    def init_weights(self, rng: np.random.Generator) -> None:
        for units in self.branches:
            for u in units:
                if isinstance(u, _ConvUnit):
                    u.init_weights(rng)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        outs = []
        for units in self.branches:
            h = x
            for u in units:
                h = u.forward(h, train)
            outs.append(h)
        return ops.concat_channels(outs)

    def backward(self, upstream: np.ndarray, grads) -> np.ndarray:
        pieces = ops.concat_channels_backward(upstream, self.branch_channels)
        grad_x = None
        for units, piece in zip(self.branches, pieces):
            g = piece
            for u in reversed(units):
                g = u.backward(g, grads)
            grad_x = g if grad_x is None else grad_x + g
        return grad_x


class Network:
    """Layer stack with named float32 parameters and a cached backward path."""

    def __init__(self, spec: ArchitectureSpec):
        spec.validate()
        self.spec = spec
        self.arch_hash = spec.hash_bytes()
        self._units = []
        ch = spec.input_channels
        for i, desc in enumerate(spec.layers):
            name = f"l{i:02d}"
            if isinstance(desc, Conv):
                self._units.append(_ConvUnit(name, ch, desc))
                ch = desc.out_channels
            elif isinstance(desc, Relu):
                self._units.append(_ActUnit("relu"))
            elif isinstance(desc, Sigmoid):
                self._units.append(_ActUnit("sigmoid"))
            elif isinstance(desc, AvgPool):
                self._units.append(_StridePoolUnit("avg", desc.k))
            elif isinstance(desc, MaxPool):
                self._units.append(_StridePoolUnit("max", desc.k))
            elif isinstance(desc, Inception):
                unit = _InceptionUnit(name, ch, desc)
                self._units.append(unit)
                ch = sum(unit.branch_channels)
        self.out_channels = ch

    def init_weights(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for u in self._units:
            if isinstance(u, (_ConvUnit, _InceptionUnit)):
                u.init_weights(rng)

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter arrays, in deterministic layer order (live views)."""
        return dict(p for u in self._units for p in u.parameters())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.parameters().items()}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 3 or x.shape[0] != self.spec.input_channels:
            raise ContractViolation(
                f"input must be [{self.spec.input_channels},H,W], got shape {x.shape}"
            )
        h = np.asarray(x, dtype=np.float32)
        for u in self._units:
            h = u.forward(h, train)
        return h

    def backward(self, upstream: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        g = np.asarray(upstream, dtype=np.float32)
        for u in reversed(self._units):
            g = u.backward(g, grads)
        return g

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.parameters().items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(tensors) != set(params):
            missing = sorted(set(params) - set(tensors))
            extra = sorted(set(tensors) - set(params))
            raise ContractViolation(
                f"state does not match network (missing {missing}, unexpected {extra})"
            )
        for name, p in params.items():
            t = tensors[name]
            if t.shape != p.shape:
                raise ContractViolation(
                    f"tensor {name} has shape {t.shape}, expected {p.shape}"
                )
            p[...] = t


def build_network(spec: ArchitectureSpec, seed: int) -> Network:
    """Deterministic network for (spec, seed): Glorot-uniform weights, zero biases."""
    net = Network(spec)
    net.init_weights(seed)
    return net


def forward_full(net: Network, image: np.ndarray) -> np.ndarray:
    """Probability map for a single-channel image of any admissible size."""
    image = np.asarray(image, dtype=np.float32)
    if net.spec.output_stride() != 1:
        raise ContractViolation(
            "architecture downsamples the main path; per-pixel inference "
            "requires output stride 1"
        )
    min_size = net.spec.min_input_size()
    if image.ndim != 3 or image.shape[1] < min_size or image.shape[2] < min_size:
        raise ContractViolation(
            f"input spatial extents must be >= {min_size}, got "
            f"{image.shape[1:] if image.ndim == 3 else image.shape}"
        )
    return net.forward(image, train=False)


def cdc_loss(prediction: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Continuous-Dice training loss and its gradient w.r.t. the prediction.

    The overlap of a probability map b against a binary mask a is scored as
    2*sum(ab) / (c*sum(a) + sum(b)) with correction c = sum(ab) / sum(a*[b>0])
    (c := 1 when that denominator is zero); the loss is one minus that
    score, in [0, 1].

    A small epsilon keeps the ratio well defined; it joins the numerator
    only when the truth mask is empty (scoring a near-empty prediction of an
    empty mask as near-perfect).  With a non-empty truth the numerator gets
    no epsilon: the correction c makes the score scale-invariant in b, so a
    symmetric epsilon would turn "predict everything infinitesimally dim"
    into a spurious zero-loss optimum that gradient descent reliably finds.
    """
    if prediction.shape != truth.shape:
        raise ContractViolation(
            f"prediction shape {prediction.shape} != truth shape {truth.shape}"
        )
    if not np.isin(truth, (0, 1)).all():
        raise ContractViolation("truth mask must be binary")
    a = np.asarray(truth, dtype=np.float64).ravel()
    b = np.asarray(prediction, dtype=np.float64).ravel()
    if b.size and (b.min() < 0.0 or b.max() > 1.0):
        raise ContractViolation("prediction values must lie in [0, 1]")

    overlap = float(a @ b)
    sum_a = float(a.sum())
    sum_b = float(b.sum())
    support = float(a @ (b > 0))  # truth voxels with positive prediction
    eps = CDC_EPSILON

    num = 2.0 * overlap + (eps if sum_a == 0.0 else 0.0)
    if support > 0.0:
        c_times_sum_a = (overlap / support) * sum_a
        dc_scale = sum_a / support
    else:
        c_times_sum_a = sum_a  # c := 1
        dc_scale = 0.0
    den = c_times_sum_a + sum_b + eps
    loss = 1.0 - num / den

    # d(num)/db_i = 2 a_i ; d(den)/db_i = dc_scale * a_i + 1
    grad = (num * (dc_scale * a + 1.0) - 2.0 * a * den) / (den * den)
    return loss, grad.reshape(prediction.shape).astype(prediction.dtype)


def dice_loss(prediction: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    """Soft-Dice training objective: the c := 1 specialization of cdc_loss.

    1 - (2*sum(ab) + eps) / (sum(a) + sum(b) + eps).  Unlike the full
    continuous-Dice score, this is not scale-invariant in the prediction:
    dim-but-well-placed probability mass still scores badly, which is what
    pushes sigmoid outputs toward calibrated values that survive the 0.5
    decision threshold.  Used by train_epoch; cdc_loss remains the scoring
    form.
    """
    if prediction.shape != truth.shape:
        raise ContractViolation(
            f"prediction shape {prediction.shape} != truth shape {truth.shape}"
        )
    if not np.isin(truth, (0, 1)).all():
        raise ContractViolation("truth mask must be binary")
    a = np.asarray(truth, dtype=np.float64).ravel()
    b = np.asarray(prediction, dtype=np.float64).ravel()
    if b.size and (b.min() < 0.0 or b.max() > 1.0):
        raise ContractViolation("prediction values must lie in [0, 1]")
    eps = CDC_EPSILON
    num = 2.0 * float(a @ b) + eps
    den = float(a.sum()) + float(b.sum()) + eps
    loss = 1.0 - num / den
    grad = (num - 2.0 * a * den) / (den * den)
    return loss, grad.reshape(prediction.shape).astype(prediction.dtype)


@dataclass
class TrainReport:
    epoch_index: int
    train_loss: float
    val_loss: float
    wall_time_s: float


def train_epoch(
    net: Network,
    patches,
    adam: AdamState,
    batch_size: int,
    shuffle_seed: int,
    epoch_index: int = 0,
) -> TrainReport:
    """One full pass over the training patches in a seeded shuffle order.

    The validation loss is computed on the held-out patches with no
    parameter updates; when a patch set has no validation split (tiny
    smoke-test sets) the training loss stands in.
    """
    if not patches.training:
        raise ContractViolation("patch set has no training patches")
    if batch_size < 1:
        raise ContractViolation(f"batch_size must be >= 1, got {batch_size}")
    start = time.perf_counter()
    order = np.random.default_rng(shuffle_seed).permutation(len(patches.training))
    params = net.parameters()
    loss_sum = 0.0
    for lo in range(0, len(order), batch_size):
        batch = order[lo : lo + batch_size]
        grads = net.zero_grads()
        for idx in batch:
            image, mask = patches.training[idx]
            pred = net.forward(image, train=True)
            loss, gmap = dice_loss(pred, mask)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch_index}")
            loss_sum += loss
            net.backward(gmap / len(batch), grads)
        ops.adam_step(params, grads, adam)
    train_loss = loss_sum / len(order)

    val_pairs = patches.validation if patches.validation else patches.training
    val_sum = 0.0
    for image, mask in val_pairs:
        pred = net.forward(image, train=False)
        loss, _ = dice_loss(pred, mask)
        val_sum += loss
    val_loss = val_sum / len(val_pairs)
    if not np.isfinite(val_loss):
        raise NumericError(f"non-finite validation loss at epoch {epoch_index}")
    return TrainReport(epoch_index, train_loss, val_loss, time.perf_counter() - start)


def predict_volume(
    net: Network, volume: VolumeImage, threshold: float = 0.5
) -> SegmentationMask:
    """Slice-wise 2D inference over all axial slices, thresholded at >=."""
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must lie in (0,1), got {threshold}")
    nx, ny, nz = volume.dims
    out = np.zeros((nx, ny, nz), dtype=np.uint8)
    for z in range(nz):
        prob = forward_full(net, volume.axial_slice(z)[None, :, :])
        out[:, :, z] = prob[0] >= threshold
    return SegmentationMask(out, volume.spacing_mm)
