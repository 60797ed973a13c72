"""Dense networks with manual backprop: trajectory updater, discriminator,
depth calibrator, plus the Adam optimizer and the depth-based scene
descriptor.

All math is float64 numpy; training is deterministic for a fixed seed on a
single thread.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DepthMap
from .simulator import Trajectory

LEAKY_SLOPE = 0.01
DESC_GRID = 16
DESC_DIM = DESC_GRID * DESC_GRID + 4
SIGMOID_EPS = 1e-12

# softplus biases so a zero-initialized head predicts the (1.0, 5.0) m prior
_PRIOR_MIN_BIAS = math.log(math.expm1(1.0))
_PRIOR_SPAN_BIAS = math.log(math.expm1(4.0))


class TrainingError(RuntimeError):
    """Raised when training hits non-finite gradients or losses."""


# ---------------------------------------------------------------------------
# scene descriptor
# ---------------------------------------------------------------------------

def _area_downsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-average resize of a 2D field (integral-image based)."""
    h, w = img.shape
    p = np.zeros((h + 1, w + 1))
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=p[1:, 1:])

    def interp(axis_len, n_out, arr, axis):
        edges = np.linspace(0.0, axis_len, n_out + 1)
        i = np.minimum(edges.astype(np.int64), axis_len - 1)
        frac = edges - i
        lo = np.take(arr, i, axis=axis)
        hi = np.take(arr, i + 1, axis=axis)
        shape = [1, 1]
        shape[axis] = -1
        f = frac.reshape(shape)
        return lo * (1.0 - f) + hi * f

    py = interp(h, out_h, p, 0)
    pyx = interp(w, out_w, py, 1)
    block = pyx[1:, 1:] - pyx[:-1, 1:] - pyx[1:, :-1] + pyx[:-1, :-1]
    areas = np.outer(np.diff(np.linspace(0.0, h, out_h + 1)),
                     np.diff(np.linspace(0.0, w, out_w + 1)))
    return block / areas


def encode_scene(depth: DepthMap) -> np.ndarray:
    """Fixed-length scene descriptor: 16x16 area-averaged log-depth plus
    global (min, max, mean, std) of the raw depth. Length 260."""
    depth.validate()
    v = depth.values
    grid = _area_downsample(np.log(v), DESC_GRID, DESC_GRID)
    stats = np.array([v.min(), v.max(), v.mean(), v.std()])
    return np.concatenate([grid.ravel(), stats])


# ---------------------------------------------------------------------------
# MLP with manual backprop
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Dense net; leaky-rectifier (slope 0.01) on hidden layers, linear output."""

    weights: list[np.ndarray]  # (out, in) per layer
    biases: list[np.ndarray]   # (out,) per layer

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, layer_sizes: list[int], rng: np.random.Generator,
             final_zero: bool = False) -> "Mlp":
        weights, biases = [], []
        for i in range(len(layer_sizes) - 1):
            fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            weights.append(w)
            biases.append(b)
        if final_zero:
            weights[-1][:] = 0.0
            biases[-1][:] = 0.0
        return cls(weights, biases)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out


def mlp_forward(net: Mlp, x: np.ndarray):
    """Forward pass. Returns (output, cache) where cache feeds mlp_backward.

    `x` is (batch, in) or a single (in,) vector.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.weights[0].shape[1]:
        raise ValueError(
            f"input dim {h.shape[1]} does not match layer 0 ({net.weights[0].shape[1]})"
        )
    cache = []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        cache.append((h, z))
        h = np.where(z > 0, z, LEAKY_SLOPE * z) if i < last else z
    return (h[0] if single else h), cache


def mlp_backward(net: Mlp, cache: list, grad_out: np.ndarray):
    """Exact reverse-mode gradients of mlp_forward.

    Returns (grads, grad_input) where grads maps 'w{i}'/'b{i}' to arrays
    shaped like the parameters.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    single = grad_out.ndim == 1
    g = grad_out[None, :] if single else grad_out
    if len(cache) != len(net.weights):
        raise ValueError(f"cache has {len(cache)} layers, net has {len(net.weights)}")
    if g.shape != (cache[-1][0].shape[0], net.weights[-1].shape[0]):
        raise ValueError(f"gradient shape {g.shape} does not match cached forward pass")
    grads: dict[str, np.ndarray] = {}
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        h_in, z = cache[i]
        if i < last:
            g = g * np.where(z > 0, 1.0, LEAKY_SLOPE)
        grads[f"w{i}"] = g.T @ h_in
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.weights[i]
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> None:
    """Bias-corrected adaptive-moment update, in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    """Per-coordinate (x - mean) / std with a variance floor."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, xn: np.ndarray) -> np.ndarray:
        return xn * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64),
                   np.array(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# network bundles
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryNet:
    """Stochastic trajectory updater: encoder + scene-conditioned decoder."""

    encoder: Mlp            # [traj_dim + z_dim] -> embed
    decoder: Mlp            # [embed + desc_dim] -> traj_dim
    traj_norm: Standardizer
    desc_norm: Standardizer
    z_dim: int = 1

    @property
    def traj_dim(self) -> int:
        return self.decoder.weights[-1].shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.encoder.parameters("enc"), **self.decoder.parameters("dec")}

    def copy(self) -> "TrajectoryNet":
        return TrajectoryNet(self.encoder.copy(), self.decoder.copy(),
                             self.traj_norm, self.desc_norm, self.z_dim)


def trajnet_forward(net: TrajectoryNet, x0n: np.ndarray, z: np.ndarray,
                    descn: np.ndarray):
    """Batch forward in normalized space. Returns (out_n, cache)."""
    e, c1 = mlp_forward(net.encoder, np.concatenate([x0n, z], axis=1))
    out, c2 = mlp_forward(net.decoder, np.concatenate([e, descn], axis=1))
    return out, (c1, c2, x0n.shape[1])


def trajnet_backward(net: TrajectoryNet, cache, grad_out: np.ndarray):
    c1, c2, _ = cache
    g2, g_in2 = mlp_backward(net.decoder, c2, grad_out)
    embed_dim = net.encoder.weights[-1].shape[0]
    g1, _ = mlp_backward(net.encoder, c1, g_in2[:, :embed_dim])
    grads = {f"enc.{k}": v for k, v in g1.items()}
    grads.update({f"dec.{k}": v for k, v in g2.items()})
    return grads


def trajnet_apply(net: TrajectoryNet, traj: Trajectory, z: float,
                  desc: np.ndarray) -> Trajectory:
    """Correct one trajectory. Output carries no contact events."""
    flat = traj.samples.reshape(1, -1)
    if flat.shape[1] != net.traj_dim:
        raise ValueError(f"trajectory dim {flat.shape[1]} != net dim {net.traj_dim}")
    if not np.all(np.isfinite(flat)):
        raise ValueError("trajectory contains non-finite values")
    x0n = net.traj_norm.transform(flat)
    descn = net.desc_norm.transform(np.asarray(desc, dtype=np.float64).reshape(1, -1))
    out, _ = trajnet_forward(net, x0n, np.array([[float(z)]]), descn)
    samples = net.traj_norm.inverse(out).reshape(-1, 3)
    return Trajectory(samples, traj.sample_rate, np.empty(0))


@dataclass
class Discriminator:
    """Trajectory realism scorer; mirrors the updater with a scalar head."""

    encoder: Mlp            # traj_dim -> embed
    decoder: Mlp            # [embed + desc_dim] -> 1
    traj_norm: Standardizer
    desc_norm: Standardizer

    def parameters(self) -> dict[str, np.ndarray]:
        return {**self.encoder.parameters("enc"), **self.decoder.parameters("dec")}

    def copy(self) -> "Discriminator":
        return Discriminator(self.encoder.copy(), self.decoder.copy(),
                             self.traj_norm, self.desc_norm)


def disc_forward(net: Discriminator, xn: np.ndarray, descn: np.ndarray):
    """Returns (logits (b, 1), cache)."""
    e, c1 = mlp_forward(net.encoder, xn)
    logit, c2 = mlp_forward(net.decoder, np.concatenate([e, descn], axis=1))
    return logit, (c1, c2)


def disc_backward(net: Discriminator, cache, grad_logit: np.ndarray):
    """Returns (grads, grad wrt the normalized trajectory input)."""
    c1, c2 = cache
    g2, g_in2 = mlp_backward(net.decoder, c2, grad_logit)
    embed_dim = net.encoder.weights[-1].shape[0]
    g1, g_x = mlp_backward(net.encoder, c1, g_in2[:, :embed_dim])
    grads = {f"enc.{k}": v for k, v in g1.items()}
    grads.update({f"dec.{k}": v for k, v in g2.items()})
    return grads, g_x


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def disc_apply(net: Discriminator, traj: Trajectory, desc: np.ndarray) -> float:
    """Probability that the trajectory is plausible for the scene; in (0, 1)."""
    flat = traj.samples.reshape(1, -1)
    if not np.all(np.isfinite(flat)):
        raise ValueError("trajectory contains non-finite values")
    xn = net.traj_norm.transform(flat)
    descn = net.desc_norm.transform(np.asarray(desc, dtype=np.float64).reshape(1, -1))
    logit, _ = disc_forward(net, xn, descn)
    p = float(sigmoid(logit)[0, 0])
    return min(max(p, SIGMOID_EPS), 1.0 - SIGMOID_EPS)


@dataclass
class DepthNet:
    """Global depth calibrator predicting (z_min, z_max), always ordered."""

    net: Mlp                # [2*desc_dim + traj_dim] -> 2
    input_norm: Standardizer

    def parameters(self) -> dict[str, np.ndarray]:
        return self.net.parameters("h")

    def copy(self) -> "DepthNet":
        return DepthNet(self.net.copy(), self.input_norm)


def depthnet_transform(raw: np.ndarray):
    """Map raw head outputs to (z_min, z_max) with 0 < z_min < z_max.

    z_min = softplus(a + c1), z_max = z_min + softplus(b + c2); the biases set
    the zero-input prior at (1.0, 5.0) m.
    """
    a = raw[:, 0] + _PRIOR_MIN_BIAS
    b = raw[:, 1] + _PRIOR_SPAN_BIAS
    z_min = np.logaddexp(0.0, a)
    span = np.logaddexp(0.0, b)
    out = np.stack([z_min, z_min + span], axis=1)
    return out, (a, b)


def depthnet_transform_backward(tcache, grad_out: np.ndarray) -> np.ndarray:
    a, b = tcache
    sa = sigmoid(a)
    sb = sigmoid(b)
    graw = np.empty_like(grad_out)
    graw[:, 0] = (grad_out[:, 0] + grad_out[:, 1]) * sa
    graw[:, 1] = grad_out[:, 1] * sb
    return graw


def depthnet_forward(net: DepthNet, x: np.ndarray):
    """x = [desc_I | desc_Z0 | flattened G-output trajectory], unnormalized."""
    xn = net.input_norm.transform(x)
    raw, cache = mlp_forward(net.net, xn)
    out, tcache = depthnet_transform(raw)
    return out, (cache, tcache)


def depthnet_backward(net: DepthNet, cache, grad_out: np.ndarray):
    mcache, tcache = cache
    graw = depthnet_transform_backward(tcache, grad_out)
    grads, _ = mlp_backward(net.net, mcache, graw)
    return {f"h.{k}": v for k, v in grads.items()}


def depthnet_apply(net: DepthNet, desc_i: np.ndarray, desc_z0: np.ndarray,
                   g_out: Trajectory) -> tuple[float, float]:
    """Predict (z_min, z_max) in meters for rescaling the observed depth."""
    x = np.concatenate([
        np.asarray(desc_i, dtype=np.float64).ravel(),
        np.asarray(desc_z0, dtype=np.float64).ravel(),
        g_out.samples.ravel(),
    ]).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("depth-net input contains non-finite values")
    out, _ = depthnet_forward(net, x)
    return float(out[0, 0]), float(out[0, 1])


# ---------------------------------------------------------------------------
# anneal schedule
# ---------------------------------------------------------------------------

def anneal_weight(epoch: int, anneal_epochs: int, mode: str = "linear") -> float:
    """Weight of the L2 helper term at a given epoch.

    linear: 1 - e/anneal_epochs, clamped at 0 (reaches 0 at anneal_epochs).
    multiplicative: 0.995**e (decays 0.5% per epoch, never exactly 0).
    """
    if mode == "linear":
        return max(0.0, 1.0 - epoch / anneal_epochs)
    if mode == "multiplicative":
        return 0.995 ** epoch
    raise ValueError(f"unknown anneal mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = "bouncesim-checkpoint"


def save_checkpoint(path: str | Path, nets: dict[str, Mlp], meta: dict) -> None:
    """Single file: one JSON header line + little-endian float64 blob.

    Parameters stream in sorted net-name order, each net as w0, b0, w1, b1...
    """
    header = {
        "format": _MAGIC,
        "version": 1,
        "nets": {name: net.layer_sizes for name, net in sorted(nets.items())},
        "meta": meta,
    }
    blobs = []
    for name in sorted(nets):
        for w, b in zip(nets[name].weights, nets[name].biases):
            blobs.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            blobs.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Mlp], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != _MAGIC:
            raise ValueError(f"{path}: not a bouncesim checkpoint")
        nets = {}
        for name in sorted(header["nets"]):
            sizes = header["nets"][name]
            weights, biases = [], []
            for i in range(len(sizes) - 1):
                fan_in, fan_out = sizes[i], sizes[i + 1]
                w = np.frombuffer(f.read(8 * fan_in * fan_out), dtype="<f8")
                weights.append(w.reshape(fan_out, fan_in).astype(np.float64))
                b = np.frombuffer(f.read(8 * fan_out), dtype="<f8")
                biases.append(b.astype(np.float64))
            nets[name] = Mlp(weights, biases)
    return nets, header["meta"]
