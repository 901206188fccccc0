"""Checkpoint binary format: the only artifact that crosses site boundaries.

Layout (all integers little-endian):

    magic  4s   b"MSLW"
    u32    format version (1)
    32s    architecture hash (SHA-256 of the canonical architecture text)
    u32    global epoch
    u32    site-history entry count
           per entry: u16 site-id byte length, UTF-8 site id,
                      u32 epoch, f64 validation loss
    u32    tensor count
           per tensor: u16 name byte length, UTF-8 name, u8 ndim,
                       u32 dims[ndim], raw float32 payload
    u32    CRC32 of all preceding bytes

Tensors are written in a deterministic order, so saving the same network
twice yields identical bytes.  Optimizer moments ride along under
``adam.*`` names so a site (or a restarted worker) resumes training from
exactly the state the previous turn left behind.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .arch import ArchitectureSpec
from .errors import ArchitectureMismatch, CheckpointError, ContractViolation
from .network import Network
from .ops import AdamState

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MSLW"
FORMAT_VERSION = 1
ADAM_STEP_KEY = "adam.step"


@dataclass
class Checkpoint:
    architecture_hash: bytes
    global_epoch: int = 0
    site_history: list[tuple[str, int, float]] = field(default_factory=list)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        if len(self.architecture_hash) != 32:
            raise ContractViolation("architecture hash must be 32 bytes")
        out = bytearray()
        out += MAGIC
        out += struct.pack("<I", self.format_version)
        out += self.architecture_hash
        out += struct.pack("<I", self.global_epoch)
        out += struct.pack("<I", len(self.site_history))
        for site, epoch, loss in self.site_history:
            sid = site.encode("utf-8")
            out += struct.pack("<H", len(sid)) + sid
            out += struct.pack("<Id", epoch, loss)
        out += struct.pack("<I", len(self.tensors))
        for name, tensor in self.tensors.items():
            if tensor.dtype != np.float32:
                raise ContractViolation(f"tensor {name} must be float32")
            if not np.all(np.isfinite(tensor)):
                raise ContractViolation(f"tensor {name} contains non-finite values")
            nb = name.encode("utf-8")
            out += struct.pack("<H", len(nb)) + nb
            out += struct.pack("<B", tensor.ndim)
            out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
            out += tensor.astype("<f4", copy=False).tobytes(order="C")
        out += struct.pack("<I", zlib.crc32(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        if r.take(4, "magic") != MAGIC:
            raise CheckpointError(f"bad magic at byte offset 0 (expected {MAGIC!r})")
        version = r.u32("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported format version {version} at byte offset 4"
            )
        arch_hash = r.take(32, "architecture_hash")
        global_epoch = r.u32("global_epoch")
        history = []
        for _ in range(r.u32("site_history_count")):
            site = r.take(r.u16("site_id_length"), "site_id").decode("utf-8")
            epoch = r.u32("epoch")
            (loss,) = struct.unpack("<d", r.take(8, "val_loss"))
            history.append((site, epoch, loss))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(r.u32("tensor_count")):
            name = r.take(r.u16("tensor_name_length"), "tensor_name").decode("utf-8")
            ndim = r.take(1, "ndim")[0]
            dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, "dims"))
            count = int(np.prod(dims)) if ndim else 1
            payload = r.take(4 * count, f"tensor {name} payload")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        body_end = r.pos
        (stored_crc,) = struct.unpack("<I", r.take(4, "crc32"))
        if r.pos != len(data):
            raise CheckpointError(
                f"{len(data) - r.pos} trailing bytes after CRC at byte offset {r.pos}"
            )
        actual = zlib.crc32(data[:body_end])
        if stored_crc != actual:
            raise CheckpointError(
                f"checksum mismatch at byte offset {body_end}: "
                f"stored {stored_crc:#010x}, computed {actual:#010x}"
            )
        return cls(arch_hash, global_epoch, history, tensors, version)

    def weight_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adam.")}


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated stream reading {what} at byte offset {self.pos}: "
                f"need {n} bytes, have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def save_checkpoint(
    net: Network,
    global_epoch: int = 0,
    site_history: list[tuple[str, int, float]] | None = None,
    adam: AdamState | None = None,
) -> bytes:
    """Serialize network weights (and optimizer moments, if given) to bytes."""
    tensors = net.state_tensors()
    if adam is not None:
        for name, p in net.parameters().items():
            m, v = adam.moments_for(name, p)
            tensors[f"adam.m.{name}"] = m.copy()
            tensors[f"adam.v.{name}"] = v.copy()
        tensors[ADAM_STEP_KEY] = np.array([adam.step_count], dtype=np.float32)
    ckpt = Checkpoint(
        architecture_hash=net.arch_hash,
        global_epoch=global_epoch,
        site_history=list(site_history or []),
        tensors=tensors,
    )
    return ckpt.to_bytes()


def load_checkpoint(
    data: bytes,
    expected_spec: ArchitectureSpec,
    adam_template: AdamState | None = None,
) -> tuple[Network, AdamState | None, Checkpoint]:
    """Rebuild a network (and optimizer state) from checkpoint bytes.

    The checkpoint must match ``expected_spec``'s architecture hash; the
    optional ``adam_template`` supplies hyperparameters while the moments
    come from the stream (fresh state when the stream carries none).
    """
    ckpt = Checkpoint.from_bytes(data)
    expected = expected_spec.hash_bytes()
    if ckpt.architecture_hash != expected:
        raise ArchitectureMismatch(
            f"checkpoint architecture {ckpt.architecture_hash.hex()} does not "
            f"match expected architecture {expected.hex()}"
        )
    net = Network(expected_spec)
    net.load_state(ckpt.weight_tensors())

    adam = None
    if adam_template is not None:
        adam = AdamState(
            learning_rate=adam_template.learning_rate,
            beta1=adam_template.beta1,
            beta2=adam_template.beta2,
            epsilon=adam_template.epsilon,
        )
        if ADAM_STEP_KEY in ckpt.tensors:
            adam.step_count = int(ckpt.tensors[ADAM_STEP_KEY][0])
            for name, p in net.parameters().items():
                m = ckpt.tensors.get(f"adam.m.{name}")
                v = ckpt.tensors.get(f"adam.v.{name}")
                if m is None or v is None:
                    raise CheckpointError(f"missing optimizer moments for {name}")
                if m.shape != p.shape or v.shape != p.shape:
                    raise CheckpointError(f"optimizer moment shape mismatch for {name}")
                adam.first_moment[name] = m.copy()
                adam.second_moment[name] = v.copy()
    return net, adam, ckpt
