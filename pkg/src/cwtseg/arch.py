"""Declarative network architecture: descriptors, canonical text form, hash.

An architecture is an ordered list of layer descriptors plus the input
channel count.  The canonical serialization is a plain-text format, one
descriptor per line:

    input_channels 1
    conv 32 3
    relu
    inception conv:16:1 relu ; conv:16:1 relu conv:16:3 relu
    avgpool 2
    maxpool 2
    conv 1 1
    sigmoid

``inception`` lines carry parallel branches separated by `` ; ``; each
branch is a space-separated list of step tokens (``conv:<out>:<k>``,
``relu``, ``avgpool_same:<k>``) whose outputs are channel-concatenated.
The architecture hash is the SHA-256 digest of the canonical UTF-8 text.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .errors import ArchitectureError

__all__ = [
    "Conv",
    "Relu",
    "Sigmoid",
    "AvgPool",
    "MaxPool",
    "AvgPoolSame",
    "Inception",
    "ArchitectureSpec",
    "reference_architecture",
    "compact_architecture",
]


@dataclass(frozen=True)
class Conv:
    out_channels: int
    k: int

    def token(self) -> str:
        return f"conv:{self.out_channels}:{self.k}"


@dataclass(frozen=True)
class Relu:
    def token(self) -> str:
        return "relu"


@dataclass(frozen=True)
class Sigmoid:
    def token(self) -> str:
        return "sigmoid"


@dataclass(frozen=True)
class AvgPool:
    """Stride-k average pooling on the main path."""

    k: int


@dataclass(frozen=True)
class MaxPool:
    """Stride-k max pooling on the main path."""

    k: int


@dataclass(frozen=True)
class AvgPoolSame:
    """Stride-1, same-padded average pooling; only valid inside branches."""

    k: int

    def token(self) -> str:
        return f"avgpool_same:{self.k}"


BranchStep = Conv | Relu | AvgPoolSame


@dataclass(frozen=True)
class Inception:
    branches: tuple[tuple[BranchStep, ...], ...]


LayerDesc = Conv | Relu | Sigmoid | AvgPool | MaxPool | Inception


def _desc_line(desc: LayerDesc) -> str:
    if isinstance(desc, Conv):
        return f"conv {desc.out_channels} {desc.k}"
    if isinstance(desc, Relu):
        return "relu"
    if isinstance(desc, Sigmoid):
        return "sigmoid"
    if isinstance(desc, AvgPool):
        return f"avgpool {desc.k}"
    if isinstance(desc, MaxPool):
        return f"maxpool {desc.k}"
    if isinstance(desc, Inception):
        parts = [" ".join(step.token() for step in br) for br in desc.branches]
        return "inception " + " ; ".join(parts)
    raise ArchitectureError(f"unknown descriptor {desc!r}")


def _parse_step(token: str) -> BranchStep:
    if token == "relu":
        return Relu()
    if token.startswith("conv:"):
        parts = token.split(":")
        if len(parts) != 3:
            raise ArchitectureError(f"bad conv step token {token!r}")
        return Conv(int(parts[1]), int(parts[2]))
    if token.startswith("avgpool_same:"):
        return AvgPoolSame(int(token.split(":")[1]))
    raise ArchitectureError(f"unknown branch step token {token!r}")


def _parse_line(line: str) -> LayerDesc:
    fields = line.split()
    head = fields[0]
    try:
        if head == "conv" and len(fields) == 3:
            return Conv(int(fields[1]), int(fields[2]))
        if head == "relu" and len(fields) == 1:
            return Relu()
        if head == "sigmoid" and len(fields) == 1:
            return Sigmoid()
        if head == "avgpool" and len(fields) == 2:
            return AvgPool(int(fields[1]))
        if head == "maxpool" and len(fields) == 2:
            return MaxPool(int(fields[1]))
        if head == "inception":
            branch_texts = " ".join(fields[1:]).split(";")
            branches = tuple(
                tuple(_parse_step(tok) for tok in bt.split()) for bt in branch_texts
            )
            return Inception(branches)
    except ValueError as exc:
        raise ArchitectureError(f"bad descriptor line {line!r}: {exc}") from exc
    raise ArchitectureError(f"unrecognized descriptor line {line!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    input_channels: int
    layers: tuple[LayerDesc, ...]

    def canonical_text(self) -> str:
        lines = [f"input_channels {self.input_channels}"]
        lines.extend(_desc_line(d) for d in self.layers)
        return "\n".join(lines) + "\n"

    def hash_bytes(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def hash_hex(self) -> str:
        return self.hash_bytes().hex()

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("input_channels "):
            raise ArchitectureError("first line must be 'input_channels <n>'")
        try:
            in_ch = int(lines[0].split()[1])
        except (IndexError, ValueError) as exc:
            raise ArchitectureError(f"bad input_channels line {lines[0]!r}") from exc
        return cls(in_ch, tuple(_parse_line(ln) for ln in lines[1:]))

    def validate(self) -> None:
        """Raise ArchitectureError naming the first offending descriptor."""
        if self.input_channels < 1:
            raise ArchitectureError(f"input_channels must be >= 1, got {self.input_channels}")
        for i, d in enumerate(self.layers):
            where = f"layer {i} ({_desc_line(d)})"
            if isinstance(d, Conv):
                _check_conv(d, where)
            elif isinstance(d, (AvgPool, MaxPool)):
                if d.k < 1:
                    raise ArchitectureError(f"{where}: pool size must be >= 1")
            elif isinstance(d, Inception):
                if not d.branches:
                    raise ArchitectureError(f"{where}: inception needs branches")
                for b, branch in enumerate(d.branches):
                    if not branch:
                        raise ArchitectureError(f"{where}: branch {b} is empty")
                    for step in branch:
                        if isinstance(step, Conv):
                            _check_conv(step, f"{where} branch {b}")
                        elif isinstance(step, AvgPoolSame):
                            if step.k < 1 or step.k % 2 == 0:
                                raise ArchitectureError(
                                    f"{where} branch {b}: avgpool_same size must be odd"
                                )
        if (
            len(self.layers) < 2
            or not isinstance(self.layers[-2], Conv)
            or self.layers[-2] != Conv(1, 1)
            or not isinstance(self.layers[-1], Sigmoid)
        ):
            raise ArchitectureError(
                "architecture must end with 'conv 1 1' followed by 'sigmoid'"
            )

    def channel_trace(self) -> list[int]:
        """Channel count after each layer, starting from input_channels."""
        ch = self.input_channels
        trace = [ch]
        for d in self.layers:
            if isinstance(d, Conv):
                ch = d.out_channels
            elif isinstance(d, Inception):
                ch = sum(_branch_channels(br, ch) for br in d.branches)
            trace.append(ch)
        return trace

    def parameter_count(self) -> int:
        count = 0
        ch = self.input_channels
        for d in self.layers:
            if isinstance(d, Conv):
                count += d.out_channels * ch * d.k * d.k + d.out_channels
                ch = d.out_channels
            elif isinstance(d, Inception):
                total = 0
                for br in d.branches:
                    bc = ch
                    for step in br:
                        if isinstance(step, Conv):
                            count += step.out_channels * bc * step.k * step.k + step.out_channels
                            bc = step.out_channels
                    total += bc
                ch = total
        return count

    def min_input_size(self) -> int:
        """Smallest admissible input extent.

        Inputs must cover the output pixel's receptive field and feed every
        stride pool at least one full window.
        """
        rf = 1
        pool_need = 1
        factor = 1
        for d in self.layers:
            if isinstance(d, Conv):
                rf += (d.k - 1) * factor
            elif isinstance(d, Inception):
                widest = max(
                    sum(s.k - 1 for s in br if isinstance(s, (Conv, AvgPoolSame)))
                    for br in d.branches
                )
                rf += widest * factor
            elif isinstance(d, (AvgPool, MaxPool)):
                rf += (d.k - 1) * factor
                pool_need = max(pool_need, d.k * factor)
                factor *= d.k
        return max(rf, pool_need)

    def output_stride(self) -> int:
        stride = 1
        for d in self.layers:
            if isinstance(d, (AvgPool, MaxPool)):
                stride *= d.k
        return stride


def _check_conv(d: Conv, where: str) -> None:
    if d.out_channels < 1:
        raise ArchitectureError(f"{where}: out_channels must be >= 1")
    if d.k < 1 or d.k % 2 == 0:
        raise ArchitectureError(f"{where}: kernel size must be odd, got {d.k}")


def _branch_channels(branch: tuple[BranchStep, ...], in_ch: int) -> int:
    ch = in_ch
    for step in branch:
        if isinstance(step, Conv):
            ch = step.out_channels
    return ch


def _inception_block(width: int) -> Inception:
    """Four parallel branches: 1x1, 1x1->3x3, 1x1->5x5, avgpool->1x1."""
    return Inception(
        (
            (Conv(width, 1), Relu()),
            (Conv(width, 1), Relu(), Conv(width, 3), Relu()),
            (Conv(width, 1), Relu(), Conv(width, 5), Relu()),
            (AvgPoolSame(3), Conv(width, 1), Relu()),
        )
    )


def reference_architecture(input_channels: int = 1) -> ArchitectureSpec:
    """Full-width segmentation network: stem, two inception blocks, 1x1 head."""
    return ArchitectureSpec(
        input_channels,
        (
            Conv(32, 3),
            Relu(),
            _inception_block(16),
            Conv(64, 3),
            Relu(),
            _inception_block(16),
            Conv(32, 3),
            Relu(),
            Conv(1, 1),
            Sigmoid(),
        ),
    )


def compact_architecture(input_channels: int = 1) -> ArchitectureSpec:
    """Slim variant of the reference topology for minutes-scale test runs."""
    return ArchitectureSpec(
        input_channels,
        (
            Conv(8, 3),
            Relu(),
            _inception_block(4),
            Conv(16, 3),
            Relu(),
            _inception_block(4),
            Conv(8, 3),
            Relu(),
            Conv(1, 1),
            Sigmoid(),
        ),
    )
