"""4D convolution over correlation volumes and the structural-consensus stack.

A match-score tensor indexed ``(i, j, k, l)`` pairs cell ``(i, j)`` of one
feature grid with cell ``(k, l)`` of the other.  Convolving it with 4D
kernels scores each candidate match by the coherence of the matches in its
joint neighbourhood; the stack is applied to the tensor and to its
source-exchanged transpose so the result is symmetric under swapping the
two inputs.

Kernels are fixed at 3x3x3x3 with zero padding of 1, so spatial dims are
preserved.  The channel chain of the full model is 1 -> 16 -> 16 -> 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aeroloc import store
from aeroloc.errors import ContractViolationError, DataFormatError, DimensionMismatchError
from aeroloc.features import check_nonnegative

KERNEL_SIZE = 3
PAD = 1
CHANNEL_CHAIN = (1, 16, 16, 1)


def conv4d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlate ``x`` with a bank of 4D kernels.

    Parameters
    ----------
    x:
        Input of shape ``(c_in, h1, w1, h2, w2)``.
    weights:
        Kernel bank of shape ``(c_out, c_in, 3, 3, 3, 3)``.
    bias:
        Per-output-channel bias, shape ``(c_out,)``.

    Returns
    -------
    Output of shape ``(c_out, h1, w1, h2, w2)`` (zero padding preserves the
    spatial dims).
    """
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 5:
        raise DimensionMismatchError(f"conv4d input must be rank 5, got {x.ndim}")
    if weights.ndim != 6 or weights.shape[2:] != (KERNEL_SIZE,) * 4:
        raise DimensionMismatchError(f"kernel bank must be (c_out, c_in, 3,3,3,3), got {weights.shape}")
    c_in, h1, w1, h2, w2 = x.shape
    c_out = weights.shape[0]
    if weights.shape[1] != c_in:
        raise DimensionMismatchError(
            f"kernel expects {weights.shape[1]} input channels, tensor has {c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionMismatchError(f"bias must have shape ({c_out},), got {bias.shape}")

    xp = np.pad(x, ((0, 0),) + ((PAD, PAD),) * 4)
    y = np.empty((c_out, h1, w1, h2, w2), dtype=np.float64)
    y[:] = bias.reshape(-1, 1, 1, 1, 1)
    for di, dj, dk, dl in np.ndindex((KERNEL_SIZE,) * 4):
        tap = weights[:, :, di, dj, dk, dl]
        window = xp[:, di : di + h1, dj : dj + w1, dk : dk + h2, dl : dl + w2]
        y += np.tensordot(tap, window, axes=([1], [0]))
    return y


def conv4d_backward(
    x: np.ndarray,
    weights: np.ndarray,
    d_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv4d` given upstream ``d_out``.

    Returns ``(d_x, d_weights, d_bias)``; ``d_x`` is ``None`` when
    ``need_input_grad`` is false.
    """
    c_in, h1, w1, h2, w2 = x.shape
    c_out = weights.shape[0]
    xp = np.pad(x, ((0, 0),) + ((PAD, PAD),) * 4)
    d_w = np.empty_like(weights)
    d_b = d_out.sum(axis=(1, 2, 3, 4))
    d_xp = np.zeros_like(xp) if need_input_grad else None
    dy_flat = d_out.reshape(c_out, -1)
    for di, dj, dk, dl in np.ndindex((KERNEL_SIZE,) * 4):
        window = xp[:, di : di + h1, dj : dj + w1, dk : dk + h2, dl : dl + w2]
        d_w[:, :, di, dj, dk, dl] = dy_flat @ window.reshape(c_in, -1).T
        if need_input_grad:
            d_xp[:, di : di + h1, dj : dj + w1, dk : dk + h2, dl : dl + w2] += np.tensordot(
                weights[:, :, di, dj, dk, dl], d_out, axes=([0], [0])
            )
    d_x = d_xp[:, PAD:-PAD, PAD:-PAD, PAD:-PAD, PAD:-PAD] if need_input_grad else None
    return d_x, d_w, d_b


@dataclass
class Conv4dLayer:
    """One kernel bank: weights ``(c_out, c_in, 3,3,3,3)`` and bias ``(c_out,)``."""

    weights: np.ndarray
    bias: np.ndarray


class Conv4dModel:
    """Three-layer 4D convolutional consensus filter (channels 1->16->16->1)."""

    def __init__(self, layers: list[Conv4dLayer]):
        if len(layers) != len(CHANNEL_CHAIN) - 1:
            raise DimensionMismatchError(f"model must have {len(CHANNEL_CHAIN) - 1} layers")
        for idx, layer in enumerate(layers):
            c_out, c_in = layer.weights.shape[:2]
            if (c_in, c_out) != (CHANNEL_CHAIN[idx], CHANNEL_CHAIN[idx + 1]):
                raise DimensionMismatchError(
                    f"layer {idx} must map {CHANNEL_CHAIN[idx]}->{CHANNEL_CHAIN[idx + 1]} "
                    f"channels, got {c_in}->{c_out}"
                )
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise ContractViolationError(f"layer {idx} has non-finite parameters")
        self.layers = layers

    @classmethod
    def identity(cls) -> "Conv4dModel":
        """Pass-through model: centre-tap identity on channel 0, zero bias.

        With non-negative input the ReLU chain is exactly the identity, so
        the symmetrised output equals twice the input.
        """
        layers = []
        for c_in, c_out in zip(CHANNEL_CHAIN[:-1], CHANNEL_CHAIN[1:]):
            w = np.zeros((c_out, c_in) + (KERNEL_SIZE,) * 4)
            w[0, 0, 1, 1, 1, 1] = 1.0
            layers.append(Conv4dLayer(w, np.zeros(c_out)))
        return cls(layers)

    @classmethod
    def random(cls, seed: int = 0) -> "Conv4dModel":
        """Uniform(-a, a) weights with a = 1/sqrt(fan-in), zero biases."""
        rng = np.random.default_rng(seed)
        layers = []
        for c_in, c_out in zip(CHANNEL_CHAIN[:-1], CHANNEL_CHAIN[1:]):
            fan_in = c_in * KERNEL_SIZE**4
            a = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-a, a, size=(c_out, c_in) + (KERNEL_SIZE,) * 4)
            layers.append(Conv4dLayer(w, np.zeros(c_out)))
        return cls(layers)

    def step(self, grads: list[tuple[np.ndarray, np.ndarray]], learning_rate: float) -> "Conv4dModel":
        """Return a new model after one gradient-descent step."""
        if learning_rate == 0.0:
            return self
        layers = [
            Conv4dLayer(layer.weights - learning_rate * dw, layer.bias - learning_rate * db)
            for layer, (dw, db) in zip(self.layers, grads)
        ]
        return Conv4dModel(layers)

    def copy(self) -> "Conv4dModel":
        return Conv4dModel([Conv4dLayer(l.weights.copy(), l.bias.copy()) for l in self.layers])

    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def save(self, out_dir: str | Path) -> None:
        """Persist one tensor record per kernel bank plus a JSON index."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        index = {"format": "conv4d-consensus", "layers": []}
        for idx, layer in enumerate(self.layers):
            wname, bname = f"layer{idx}.weights.glft", f"layer{idx}.bias.glft"
            store.write_tensor(out / wname, layer.weights, {"layer": idx, "role": "weights"})
            store.write_tensor(out / bname, layer.bias, {"layer": idx, "role": "bias"})
            index["layers"].append({"weights": wname, "bias": bname})
        (out / "model.json").write_text(json.dumps(index, indent=2) + "\n")

    @classmethod
    def load(cls, in_dir: str | Path) -> "Conv4dModel":
        src = Path(in_dir)
        index_path = src / "model.json"
        if not index_path.exists():
            raise DataFormatError(f"{src}: missing model.json index")
        index = json.loads(index_path.read_text())
        layers = []
        for entry in index["layers"]:
            w, _ = store.read_tensor(src / entry["weights"])
            b, _ = store.read_tensor(src / entry["bias"])
            layers.append(Conv4dLayer(w.astype(np.float64), b.astype(np.float64)))
        return cls(layers)


def transpose4d(t: np.ndarray) -> np.ndarray:
    """Swap the (i, j) axes with the (k, l) axes of a 4D match tensor."""
    return np.transpose(t, (2, 3, 0, 1))


@dataclass
class ConsensusState:
    """Intermediates of one symmetrised forward pass, kept for backprop."""

    acts_a: list[np.ndarray]
    pre_a: list[np.ndarray]
    acts_b: list[np.ndarray]
    pre_b: list[np.ndarray]


def _branch_forward(x0: np.ndarray, model: Conv4dModel):
    acts = [x0]
    pre = []
    x = x0
    for layer in model.layers:
        z = conv4d(x, layer.weights, layer.bias)
        pre.append(z)
        x = np.maximum(z, 0.0)
        acts.append(x)
    return x, acts, pre


def _branch_backward(acts, pre, model: Conv4dModel, d_out: np.ndarray):
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    d = d_out
    for li in reversed(range(len(model.layers))):
        d = d * (pre[li] > 0)
        need_dx = li > 0
        d_x, d_w, d_b = conv4d_backward(acts[li], model.layers[li].weights, d, need_dx)
        grads[li] = (d_w, d_b)
        d = d_x
    return grads


def consensus_forward(s_hat: np.ndarray, model: Conv4dModel) -> tuple[np.ndarray, ConsensusState]:
    """Symmetrised ReLU-conv stack; returns the match tensor and backprop state."""
    xa = s_hat[None]
    xb = transpose4d(s_hat)[None]
    ya, acts_a, pre_a = _branch_forward(xa, model)
    yb, acts_b, pre_b = _branch_forward(xb, model)
    m = ya[0] + transpose4d(yb[0])
    return m, ConsensusState(acts_a, pre_a, acts_b, pre_b)


def consensus_backward(
    state: ConsensusState, model: Conv4dModel, d_m: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (d_weights, d_bias) for the symmetrised stack (branches summed)."""
    grads_a = _branch_backward(state.acts_a, state.pre_a, model, d_m[None])
    grads_b = _branch_backward(state.acts_b, state.pre_b, model, transpose4d(d_m)[None])
    return [(dwa + dwb, dba + dbb) for (dwa, dba), (dwb, dbb) in zip(grads_a, grads_b)]


def neighborhood_consensus(t: np.ndarray, model: Conv4dModel) -> np.ndarray:
    """Filter a non-negative match tensor with the symmetrised consensus stack.

    Output entries are non-negative and the operation commutes with source
    exchange: swapping the two feature maps and transposing the output
    reproduces the original result.
    """
    t = check_nonnegative(t, "match tensor")
    m, _ = consensus_forward(t, model)
    return m
