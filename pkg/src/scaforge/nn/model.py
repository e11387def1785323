"""1D CNN / ResNet model assembly, forward/backward, and checkpoints.

The architecture is a stack of convolutional blocks (conv + batch norm +
ReLU + average pool, or a two-conv residual block with an optional 1x1
shortcut) followed by a dense head: hidden layer with ReLU, dropout, and a
256-way classifier. Everything runs in float64 on the CPU.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import (AvgPool1d, BatchNorm1d, Conv1d, Dense, Dropout, Flatten,
                     Layer, ReLU, cross_entropy, log_softmax)

N_CLASSES = 256

_MAGIC = b"SCNN"
_VERSION = 1


@dataclass
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int = 11
    padding: int = 5
    batch_norm: bool = True
    pool: bool = True          # kernel 2 / stride 2 average pooling
    residual: bool = False

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.padding != (self.kernel - 1) // 2:
            raise ValueError("padding must equal (kernel - 1) / 2")


@dataclass
class NetConfig:
    trace_len: int
    blocks: list[ConvBlockSpec]
    dense_hidden: int = 4096
    dropout_p: float = 0.5
    n_classes: int = N_CLASSES

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("need at least one block")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.blocks[0].in_channels != 1:
            raise ValueError("first block must take 1 input channel")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if nxt.in_channels != prev.out_channels:
                raise ValueError("block channel chain is inconsistent")
        self.flat_features = self._flat_features()

    def _flat_features(self) -> int:
        length = self.trace_len
        for spec in self.blocks:
            if spec.pool:
                length //= 2
            if length < 1:
                raise ValueError("trace too short for this many pooling stages")
        return length * self.blocks[-1].out_channels


def flatten_size(trace_len: int, n_blocks: int, last_channels: int) -> int:
    """Dense-head input width after n_blocks halvings of the trace length."""
    if trace_len < 2 ** n_blocks:
        raise ValueError("trace too short for this many pooling stages")
    length = trace_len
    for _ in range(n_blocks):
        length //= 2
    return length * last_channels


def full_scale_config(trace_len: int, residual: bool = False) -> NetConfig:
    """Full-scale architecture: channels 64/128/256/512, dense 4096."""
    channels = [64, 128, 256, 512]
    blocks = []
    prev = 1
    for ch in channels:
        blocks.append(ConvBlockSpec(in_channels=prev, out_channels=ch,
                                    residual=residual))
        prev = ch
    return NetConfig(trace_len=trace_len, blocks=blocks,
                     dense_hidden=4096, dropout_p=0.5)


def desk_config(trace_len: int, residual: bool = False,
                channels=(8, 16, 16, 32), dense_hidden: int = 128,
                kernel: int = 11, dropout_p: float = 0.5) -> NetConfig:
    """Small configuration for tests and desk-scale experiments."""
    blocks = []
    prev = 1
    for ch in channels:
        blocks.append(ConvBlockSpec(in_channels=prev, out_channels=ch,
                                    kernel=kernel, padding=(kernel - 1) // 2,
                                    residual=residual))
        prev = ch
    return NetConfig(trace_len=trace_len, blocks=blocks,
                     dense_hidden=dense_hidden, dropout_p=dropout_p)


class ResidualBlock(Layer):
    """conv-bn-relu-conv-bn main path, identity or 1x1-conv shortcut,
    element-wise sum, then ReLU."""

    def __init__(self, spec: ConvBlockSpec, rng):
        super().__init__()
        self.conv1 = Conv1d(spec.in_channels, spec.out_channels, spec.kernel,
                            spec.padding, rng)
        self.bn1 = BatchNorm1d(spec.out_channels) if spec.batch_norm else None
        self.relu1 = ReLU()
        self.conv2 = Conv1d(spec.out_channels, spec.out_channels, spec.kernel,
                            spec.padding, rng)
        self.bn2 = BatchNorm1d(spec.out_channels) if spec.batch_norm else None
        self.shortcut = None
        if spec.in_channels != spec.out_channels:
            self.shortcut = Conv1d(spec.in_channels, spec.out_channels, 1, 0, rng)
        self.relu_out = ReLU()
        self._collect()

    def _sublayers(self):
        subs = [("conv1", self.conv1)]
        if self.bn1 is not None:
            subs.append(("bn1", self.bn1))
        subs.append(("conv2", self.conv2))
        if self.bn2 is not None:
            subs.append(("bn2", self.bn2))
        if self.shortcut is not None:
            subs.append(("shortcut", self.shortcut))
        return subs

    def _collect(self):
        for name, sub in self._sublayers():
            self.params += sub.params
            self.grads += sub.grads
            self.param_names += [f"{name}.{p}" for p in sub.param_names]
            self.buffers += sub.buffers
            self.buffer_names += [f"{name}.{b}" for b in sub.buffer_names]

    def forward(self, x, train=False, rng=None):
        h = self.conv1.forward(x, train, rng)
        if self.bn1 is not None:
            h = self.bn1.forward(h, train, rng)
        h = self.relu1.forward(h, train, rng)
        h = self.conv2.forward(h, train, rng)
        if self.bn2 is not None:
            h = self.bn2.forward(h, train, rng)
        s = x if self.shortcut is None else self.shortcut.forward(x, train, rng)
        return self.relu_out.forward(h + s, train, rng)

    def backward(self, dout):
        dsum = self.relu_out.backward(dout)
        dh = dsum
        if self.bn2 is not None:
            dh = self.bn2.backward(dh)
        dh = self.conv2.backward(dh)
        dh = self.relu1.backward(dh)
        if self.bn1 is not None:
            dh = self.bn1.backward(dh)
        dx = self.conv1.backward(dh)
        if self.shortcut is None:
            dx = dx + dsum
        else:
            dx = dx + self.shortcut.backward(dsum)
        return dx


class PlainBlock(Layer):
    """conv-bn-relu block, the standard CNN feature stage."""

    def __init__(self, spec: ConvBlockSpec, rng):
        super().__init__()
        self.conv = Conv1d(spec.in_channels, spec.out_channels, spec.kernel,
                           spec.padding, rng)
        self.bn = BatchNorm1d(spec.out_channels) if spec.batch_norm else None
        self.relu = ReLU()
        subs = [("conv", self.conv)] + ([("bn", self.bn)] if self.bn else [])
        for name, sub in subs:
            self.params += sub.params
            self.grads += sub.grads
            self.param_names += [f"{name}.{p}" for p in sub.param_names]
            self.buffers += sub.buffers
            self.buffer_names += [f"{name}.{b}" for b in sub.buffer_names]

    def forward(self, x, train=False, rng=None):
        h = self.conv.forward(x, train, rng)
        if self.bn is not None:
            h = self.bn.forward(h, train, rng)
        return self.relu.forward(h, train, rng)

    def backward(self, dout):
        dh = self.relu.backward(dout)
        if self.bn is not None:
            dh = self.bn.backward(dh)
        return self.conv.backward(dh)


class NetModel:
    """All layer parameters plus the layer graph built from a NetConfig."""

    def __init__(self, config: NetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xCAFE,)))
        self.stages: list[Layer] = []
        for spec in config.blocks:
            block = ResidualBlock(spec, rng) if spec.residual else PlainBlock(spec, rng)
            self.stages.append(block)
            if spec.pool:
                self.stages.append(AvgPool1d())
        self.flatten = Flatten()
        self.dense1 = Dense(config.flat_features, config.dense_hidden, rng)
        self.relu = ReLU()
        self.dropout = Dropout(config.dropout_p)
        self.dense2 = Dense(config.dense_hidden, config.n_classes, rng)
        self.head: list[Layer] = [self.flatten, self.dense1, self.relu,
                                  self.dropout, self.dense2]

    def _all_layers(self):
        return self.stages + self.head

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self._all_layers() for p in layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self._all_layers() for g in layer.grads]

    def named_buffers(self) -> list[np.ndarray]:
        return [b for layer in self._all_layers() for b in layer.buffers]

    def forward(self, batch: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        """Logits for a (B, trace_len) batch; softmax only happens in the loss."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.config.trace_len:
            raise ValueError(f"batch must be (B, {self.config.trace_len})")
        h = batch[:, None, :]
        for layer in self._all_layers():
            h = layer.forward(h, train, rng)
        return h

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        d = dlogits
        for layer in reversed(self._all_layers()):
            d = layer.backward(d)
        return d


def loss_and_grad(model: NetModel, batch: np.ndarray, labels, rng=None):
    """Mean cross-entropy over the batch plus gradients for every parameter."""
    logits = model.forward(batch, train=True, rng=rng)
    loss, dlogits = cross_entropy(logits, labels)
    model.backward(dlogits)
    return loss, model.gradients()


def predict_log_proba(model: NetModel, samples: np.ndarray) -> np.ndarray:
    """Normalized log-softmax rows in eval mode."""
    return log_softmax(model.forward(samples, train=False))


# ---------------------------------------------------------------------------
# checkpoints

def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.astype("<f8").tobytes())


def _read_array(raw, off):
    (ndim,) = struct.unpack_from("<B", raw, off)
    off += 1
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape.append(d)
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
    off += count * 8
    return arr.reshape(shape).astype(np.float64), off


def dump_net(model: NetModel, fh) -> None:
    cfg = model.config
    fh.write(struct.pack("<4sH", _MAGIC, _VERSION))
    fh.write(struct.pack("<IHdI", cfg.trace_len, len(cfg.blocks),
                         cfg.dropout_p, cfg.dense_hidden))
    for spec in cfg.blocks:
        fh.write(struct.pack("<IIHHBBB", spec.in_channels, spec.out_channels,
                             spec.kernel, spec.padding, int(spec.batch_norm),
                             int(spec.pool), int(spec.residual)))
    arrays = model.parameters() + model.named_buffers()
    fh.write(struct.pack("<I", len(arrays)))
    for arr in arrays:
        _write_array(fh, arr)


def save_net(model: NetModel, path) -> None:
    with open(path, "wb") as fh:
        dump_net(model, fh)


def parse_net(raw: bytes) -> NetModel:
    magic, version = struct.unpack_from("<4sH", raw)
    if magic != _MAGIC:
        raise ValueError(f"not a network checkpoint: magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported network checkpoint version {version}")
    off = 6
    trace_len, n_blocks, dropout_p, dense_hidden = struct.unpack_from("<IHdI", raw, off)
    off += struct.calcsize("<IHdI")
    blocks = []
    for _ in range(n_blocks):
        ic, oc, k, pad, bn, pool, res = struct.unpack_from("<IIHHBBB", raw, off)
        off += struct.calcsize("<IIHHBBB")
        blocks.append(ConvBlockSpec(in_channels=ic, out_channels=oc, kernel=k,
                                    padding=pad, batch_norm=bool(bn),
                                    pool=bool(pool), residual=bool(res)))
    config = NetConfig(trace_len=trace_len, blocks=blocks,
                       dense_hidden=dense_hidden, dropout_p=dropout_p)
    model = NetModel(config)
    (n_arrays,) = struct.unpack_from("<I", raw, off)
    off += 4
    targets = model.parameters() + model.named_buffers()
    if n_arrays != len(targets):
        raise ValueError("checkpoint parameter count does not match architecture")
    for target in targets:
        arr, off = _read_array(raw, off)
        if arr.shape != target.shape:
            raise ValueError("checkpoint parameter shape mismatch")
        target[...] = arr
    if off != len(raw):
        raise ValueError("trailing bytes in network checkpoint")
    return model


def load_net(path) -> NetModel:
    with open(path, "rb") as fh:
        return parse_net(fh.read())
