"""Network building blocks: the two-head critic, the action classifier, losses and checkpoints.

Layers, autograd and the optimizer come from torch. This module fixes the graph
shapes, the loss definitions and a small binary checkpoint format that does not
depend on torch's pickle-based serialization.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

N_INPUT_CHANNELS = 5
BCE_CLAMP = 1e-7

LR = 1e-3
MOMENTUM = 0.9
WEIGHT_DECAY = 1e-5


class Critic(nn.Module):
    """Shared convolutional trunk with a push head and a grasp head.

    Input ``(B, 5, H, W)``; output ``(B, 2, H, W)`` with channel 0 = push Q and
    channel 1 = grasp Q. H and W must be divisible by 4.
    """

    def __init__(self, in_channels: int = N_INPUT_CHANNELS, trunk=(16, 32, 32), head=(32, 16)):
        super().__init__()
        c1, c2, c3 = trunk
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=1, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
        )
        self.push_head = self._head(c3, head)
        self.grasp_head = self._head(c3, head)

    @staticmethod
    def _head(c_in, widths):
        h1, h2 = widths
        return nn.Sequential(
            nn.Conv2d(c_in, h1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(h1, h2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(h2, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.trunk[0].in_channels:
            raise ValueError(f"expected (B, {self.trunk[0].in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError("spatial size must be divisible by 4")
        z = self.trunk(x)
        q = torch.cat([self.push_head(z), self.grasp_head(z)], dim=1)
        return F.interpolate(q, scale_factor=4, mode="bilinear", align_corners=False)


class ActionClassifier(nn.Module):
    """Push-vs-grasp classifier over the 5 coordination features; outputs P(grasp)."""

    def __init__(self, n_features: int = 5, hidden=(16, 8)):
        super().__init__()
        h1, h2 = hidden
        self.layers = nn.Sequential(
            nn.Linear(n_features, h1), nn.BatchNorm1d(h1), nn.ReLU(),
            nn.Linear(h1, h2), nn.BatchNorm1d(h2), nn.ReLU(),
            nn.Linear(h2, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 2 or x.shape[1] != self.layers[0].in_features:
            raise ValueError(f"expected (B, {self.layers[0].in_features}), got {tuple(x.shape)}")
        return torch.sigmoid(self.layers(x)).squeeze(1)


OPTIMIZERS = ("sgd", "adam")


def make_optimizer(model: nn.Module, lr: float = LR, kind: str = "sgd") -> torch.optim.Optimizer:
    """SGD with momentum, or Adam; both with the same L2 weight decay."""
    if kind == "sgd":
        return torch.optim.SGD(model.parameters(), lr=lr, momentum=MOMENTUM,
                               weight_decay=WEIGHT_DECAY)
    if kind == "adam":
        return torch.optim.Adam(model.parameters(), lr=lr, weight_decay=WEIGHT_DECAY)
    raise ValueError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")


class Graph:
    """Forward/backward wrapper that remembers the last forward pass.

    ``backward(loss_grad)`` back-propagates ``sum(loss_grad * output)`` and returns
    the parameter gradients by name, so a one-hot ``loss_grad`` restricts the
    gradient to a single output pixel.
    """

    def __init__(self, model: nn.Module):
        self.model = model
        self._out = None

    def forward(self, x) -> torch.Tensor:
        x = torch.as_tensor(x)
        for p in self.model.parameters():
            p.grad = None
        self._out = self.model(x)
        return self._out

    def backward(self, loss_grad) -> dict[str, torch.Tensor]:
        if self._out is None:
            raise RuntimeError("backward called before forward")
        g = torch.as_tensor(loss_grad, dtype=self._out.dtype)
        if g.shape != self._out.shape:
            raise ValueError(f"loss_grad shape {tuple(g.shape)} != output {tuple(self._out.shape)}")
        self._out.backward(g)
        self._out = None
        return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
                for n, p in self.model.named_parameters()}


# --- losses -----------------------------------------------------------------

def huber(delta):
    """Huber loss with threshold 1 (elementwise)."""
    d = np.abs(np.asarray(delta, dtype=np.float64))
    out = np.where(d <= 1.0, 0.5 * d * d, d - 0.5)
    return float(out) if out.ndim == 0 else out


def huber_grad(delta):
    out = np.clip(np.asarray(delta, dtype=np.float64), -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def bce(y, label):
    y = np.clip(np.asarray(y, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(label, dtype=np.float64)
    out = -(t * np.log(y) + (1.0 - t) * np.log(1.0 - y))
    return float(out) if out.ndim == 0 else out


def bce_grad(y, label):
    """d bce / d y (zero where the clamp is active)."""
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(label, dtype=np.float64)
    yc = np.clip(y, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = -(t / yc) + (1.0 - t) / (1.0 - yc)
    g = np.where((y < BCE_CLAMP) | (y > 1.0 - BCE_CLAMP), 0.0, g)
    return float(g) if g.ndim == 0 else g


def huber_torch(delta: torch.Tensor) -> torch.Tensor:
    return F.huber_loss(delta, torch.zeros_like(delta), reduction="none", delta=1.0)


def bce_torch(y: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    y = y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(label * torch.log(y) + (1.0 - label) * torch.log(1.0 - y))


# --- checkpoints --------------------------------------------------------------

MAGIC = b"PGCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def encode_checkpoint(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f4")
        a = np.ascontiguousarray(a).reshape(a.shape)  # keep 0-d entries 0-d
        if a.ndim > 4:
            raise ValueError(f"{name}: at most 4 axes supported")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic bytes)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return out


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(arrays))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def module_arrays(model: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Parameters and buffers (batch-norm statistics included) as float32 arrays."""
    return {prefix + k: v.detach().cpu().numpy().astype(np.float32)
            for k, v in model.state_dict().items()}


def load_module(model: nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> nn.Module:
    state = model.state_dict()
    new = {}
    for k, v in state.items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"missing entry {key!r}")
        a = arrays[key]
        if tuple(a.shape) != tuple(v.shape):
            raise CheckpointError(f"{key}: shape {a.shape} != {tuple(v.shape)}")
        new[k] = torch.from_numpy(np.array(a)).to(v.dtype)
    model.load_state_dict(new)
    return model


def zero_module(model: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model

