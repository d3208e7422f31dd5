"""Quantized MLP demodulator for the backscatter uplink.

A small fully connected network (300 inputs, hidden layers of 300, 100, and
25 ReLU units, 8 outputs) classifies a 300-sample capture window into one of
the eight uplink codes.  The float network is trained with plain minibatch
gradient descent with momentum on cross-entropy loss, then weights, biases,
and activations are quantized to 5 bits: per-layer symmetric uniform weight
scales (max|w|/15), activation scales from a high-percentile calibration on
the training set, biases sharing the weight*input scale.  Inference runs
entirely on integer accumulators with a float requantization multiplier, so
two implementations of the forward pass can agree bit for bit.

Each window is peak-normalized before quantization (the raw ADC code span
varies by two orders of magnitude between 1 cm and 5 cm, which would starve a
global 5-bit input scale), identically at training and inference time.

Storage note: the stated layer sizes put the packed 5-bit model near 77 KB
(122,700 weights plus 433 biases).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import RxCapture, load_capture, save_capture

__all__ = [
    "FloatMlp",
    "QuantizedMlp",
    "TrainConfig",
    "load_dataset",
    "load_mlp",
    "mlp_infer",
    "mlp_infer_batch",
    "quantize_mlp",
    "save_dataset",
    "save_mlp",
    "train_mlp",
]

DIMS = (300, 300, 100, 25, 8)
Q_MIN, Q_MAX = -16, 15  # 5-bit two's complement
ACT_MAX = 15  # symmetric activation grid; ReLU keeps the used half


def normalize_window(x: np.ndarray) -> np.ndarray:
    """Peak-normalize one window (or a batch, row-wise) to [-1, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        peak = np.max(np.abs(x))
        return x / peak if peak > 0 else x.copy()
    peak = np.max(np.abs(x), axis=1, keepdims=True)
    peak = np.where(peak > 0, peak, 1.0)
    return x / peak


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    act_percentile: float = 99.9


class FloatMlp:
    """Reference float network trained with SGD + momentum."""

    def __init__(self, dims: Sequence[int] = DIMS, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dims = tuple(dims)
        self.w = [rng.normal(0.0, math.sqrt(2.0 / dims[i]),
                             size=(dims[i + 1], dims[i]))
                  for i in range(len(dims) - 1)]
        self.b = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Logits for a batch (n, dims[0]); also returns layer activations."""
        acts = [x]
        h = x
        last = len(self.w) - 1
        for l, (w, b) in enumerate(zip(self.w, self.b)):
            z = h @ w.T + b
            h = z if l == last else np.maximum(z, 0.0)
            acts.append(h)
        return h, acts

    def predict(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(x))
        return np.argmax(logits, axis=1)

    def fit(self, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> list[float]:
        """Minibatch SGD with momentum on cross-entropy; returns loss per epoch."""
        rng = np.random.default_rng(cfg.seed)
        n = len(x)
        vel_w = [np.zeros_like(w) for w in self.w]
        vel_b = [np.zeros_like(b) for b in self.b]
        losses = []
        last = len(self.w) - 1
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                logits, acts = self.forward(xb)
                shifted = logits - logits.max(axis=1, keepdims=True)
                expz = np.exp(shifted)
                probs = expz / expz.sum(axis=1, keepdims=True)
                total += -float(np.sum(np.log(probs[np.arange(len(yb)), yb] + 1e-300)))
                grad = probs
                grad[np.arange(len(yb)), yb] -= 1.0
                grad /= len(yb)
                for l in range(last, -1, -1):
                    gw = grad.T @ acts[l]
                    gb = grad.sum(axis=0)
                    if l > 0:
                        grad = (grad @ self.w[l]) * (acts[l] > 0)
                    vel_w[l] = cfg.momentum * vel_w[l] - cfg.learning_rate * gw
                    vel_b[l] = cfg.momentum * vel_b[l] - cfg.learning_rate * gb
                    self.w[l] += vel_w[l]
                    self.b[l] += vel_b[l]
            losses.append(total / n)
        return losses


@dataclass
class QuantLayer:
    """One fully connected layer with 5-bit integer weights and biases.

    a_scale is the quantization step of this layer's *input* activations;
    w_scale is the weight step.  An integer accumulator value a represents
    a * w_scale * a_scale in real units.  Scales are stored at float32
    precision so serialization round-trips exactly.
    """

    w_q: np.ndarray
    b_q: np.ndarray
    w_scale: float
    a_scale: float


@dataclass
class QuantizedMlp:
    layers: list[QuantLayer]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].w_q.shape[1],
                *(l.w_q.shape[0] for l in self.layers))

    def requant_multiplier(self, l: int) -> float:
        """Accumulator-to-next-input multiplier for hidden layer l."""
        lay = self.layers[l]
        return lay.w_scale * lay.a_scale / self.layers[l + 1].a_scale


def _q5(values: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.round(values / scale), Q_MIN, Q_MAX).astype(np.int8)


def quantize_mlp(net: FloatMlp, calib_x: np.ndarray,
                 act_percentile: float = 99.9) -> QuantizedMlp:
    """Post-training quantization of a float network.

    calib_x must be normalized windows; activation scales are taken from the
    given percentile of the float activations over the calibration set.
    """
    _, acts = net.forward(np.atleast_2d(calib_x))
    layers = []
    for l, (w, b) in enumerate(zip(net.w, net.b)):
        w_scale = float(np.float32(max(np.max(np.abs(w)) / ACT_MAX, 1e-12)))
        a_ref = np.percentile(np.abs(acts[l]), act_percentile)
        a_scale = float(np.float32(max(a_ref / ACT_MAX, 1e-12)))
        layers.append(QuantLayer(
            w_q=_q5(w, w_scale),
            b_q=_q5(b, w_scale * a_scale),
            w_scale=w_scale,
            a_scale=a_scale,
        ))
    return QuantizedMlp(layers=layers)


def mlp_infer(mlp: QuantizedMlp, window: np.ndarray) -> tuple[int, np.ndarray]:
    """Classify one 300-sample window; returns (code, integer logits).

    The window is peak-normalized, quantized to the input activation scale,
    and propagated on integer accumulators; hidden activations are requantized
    to 5 bits after ReLU.  Deterministic.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 1 or window.shape[0] != mlp.dims[0]:
        raise ValueError(f"window must have length {mlp.dims[0]}")
    logits = mlp_infer_logits_batch(mlp, window[None, :])[0]
    return int(np.argmax(logits)), logits


def mlp_infer_batch(mlp: QuantizedMlp, windows: np.ndarray) -> np.ndarray:
    """Vectorized classification of a batch of windows (n, 300)."""
    logits = mlp_infer_logits_batch(mlp, windows)
    return np.argmax(logits, axis=1)


def mlp_infer_logits_batch(mlp: QuantizedMlp, windows: np.ndarray) -> np.ndarray:
    if windows.ndim != 2 or windows.shape[1] != mlp.dims[0]:
        raise ValueError(f"windows must be (n, {mlp.dims[0]})")
    xn = normalize_window(windows)
    x_q = np.clip(np.round(xn / mlp.layers[0].a_scale), Q_MIN, Q_MAX
                  ).astype(np.int64)
    last = len(mlp.layers) - 1
    for l, lay in enumerate(mlp.layers):
        acc = x_q @ lay.w_q.astype(np.int64).T + lay.b_q.astype(np.int64)
        if l == last:
            return acc
        acc = np.maximum(acc, 0)
        x_q = np.clip(np.round(acc * mlp.requant_multiplier(l)), 0, ACT_MAX
                      ).astype(np.int64)
    raise AssertionError("unreachable")


def train_mlp(windows: np.ndarray, labels: np.ndarray,
              cfg: TrainConfig = TrainConfig()
              ) -> tuple[QuantizedMlp, FloatMlp, float]:
    """Train the float network and quantize it.

    windows are raw capture windows (n, 300); labels are codes 0..7.
    Returns (quantized model, float model, float training accuracy).
    """
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if windows.ndim != 2 or windows.shape[1] != DIMS[0]:
        raise ValueError(f"windows must be (n, {DIMS[0]})")
    if len(windows) == 0:
        raise ValueError("empty training set")
    if labels.shape != (len(windows),) or labels.min() < 0 or labels.max() >= DIMS[-1]:
        raise ValueError("labels must be one code in 0..7 per window")
    xn = normalize_window(windows)
    net = FloatMlp(seed=cfg.seed)
    net.fit(xn, labels, cfg)
    acc = float(np.mean(net.predict(xn) == labels))
    return quantize_mlp(net, xn, cfg.act_percentile), net, acc


# ---------------------------------------------------------------------------
# serialization: magic "MEQ1", little-endian, 5-bit two's complement packing


def _pack5(values: np.ndarray) -> bytes:
    out = bytearray()
    buf = 0
    nbits = 0
    for v in values.ravel():
        buf |= (int(v) & 0x1F) << nbits
        nbits += 5
        while nbits >= 8:
            out.append(buf & 0xFF)
            buf >>= 8
            nbits -= 8
    if nbits:
        out.append(buf & 0xFF)
    return bytes(out)


def _unpack5(data: bytes, count: int) -> np.ndarray:
    vals = np.empty(count, dtype=np.int8)
    buf = 0
    nbits = 0
    pos = 0
    for i in range(count):
        while nbits < 5:
            buf |= data[pos] << nbits
            pos += 1
            nbits += 8
        v = buf & 0x1F
        buf >>= 5
        nbits -= 5
        vals[i] = v - 32 if v >= 16 else v
    return vals


def save_mlp(mlp: QuantizedMlp, path: str | Path) -> None:
    """Write the packed 5-bit model: header, then per layer dims, scales,
    row-major weights, and biases, each 5-bit stream byte-aligned."""
    blob = bytearray(b"MEQ1")
    blob += struct.pack("<B", len(mlp.layers))
    for lay in mlp.layers:
        out_dim, in_dim = lay.w_q.shape
        blob += struct.pack("<HHff", in_dim, out_dim, lay.w_scale, lay.a_scale)
        blob += _pack5(lay.w_q)
        blob += _pack5(lay.b_q)
    Path(path).write_bytes(bytes(blob))


def load_mlp(path: str | Path) -> QuantizedMlp:
    data = Path(path).read_bytes()
    if data[:4] != b"MEQ1":
        raise ValueError("not a quantized model file (bad magic)")
    n_layers = data[4]
    pos = 5
    layers = []
    for _ in range(n_layers):
        in_dim, out_dim, w_scale, a_scale = struct.unpack_from("<HHff", data, pos)
        pos += 12
        n_w = in_dim * out_dim
        n_wb = (n_w * 5 + 7) // 8
        w_q = _unpack5(data[pos:pos + n_wb], n_w).reshape(out_dim, in_dim)
        pos += n_wb
        n_bb = (out_dim * 5 + 7) // 8
        b_q = _unpack5(data[pos:pos + n_bb], out_dim)
        pos += n_bb
        layers.append(QuantLayer(w_q=w_q, b_q=b_q, w_scale=float(w_scale),
                                 a_scale=float(a_scale)))
    return QuantizedMlp(layers=layers)


# ---------------------------------------------------------------------------
# dataset directory: one capture CSV per window plus labels.csv (file,code)


def save_dataset(captures: Sequence[RxCapture], labels: Sequence[int],
                 directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (cap, lab) in enumerate(zip(captures, labels)):
        name = f"window_{i:05d}.csv"
        save_capture(cap, directory / name)
        rows.append((name, int(lab)))
    with open(directory / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "code"])
        w.writerows(rows)


def load_dataset(directory: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load (windows, labels) from a dataset directory."""
    from .uplink import window_from_capture

    directory = Path(directory)
    windows = []
    labels = []
    with open(directory / "labels.csv", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if [h.strip() for h in header] != ["file", "code"]:
            raise ValueError(f"unexpected labels.csv header: {header}")
        for row in rd:
            if not row:
                continue
            cap = load_capture(directory / row[0])
            windows.append(window_from_capture(cap))
            labels.append(int(row[1]))
    if not windows:
        raise ValueError(f"no windows listed in {directory}/labels.csv")
    return np.stack(windows), np.array(labels, dtype=np.int64)
