"""Minimal differentiable MLP stack in float64 numpy.

Policy networks end in a mask-aware softmax; the centralized critic outputs a
joint Q matrix over both agents' actions. Gradients are exact reverse-mode
for this fixed architecture (affine layers + ReLU), checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .matrix_nash import PayoffMatrix


class GradientOverflowError(ArithmeticError):
    """Raised when an optimizer step receives non-finite gradients."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if len(self.hidden_dims) < 1:
            raise ValueError("at least one hidden layer required")
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError("all layer dims must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass
class NetworkParams:
    """Layered affine weights plus Adam moment state.

    ``layers[i]`` is ``(weight, bias)`` with weight shaped (out, in).
    """

    spec: MlpSpec
    layers: list
    adam_m: list
    adam_v: list
    step_count: int = 0


@dataclass(frozen=True)
class MixedStrategy:
    probs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.int8)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "mask", mask)
        if probs.shape != mask.shape:
            raise ValueError("probs and mask must have equal length")
        if np.any(probs < 0):
            raise ValueError("negative probability")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum()}, not 1")
        if np.any(probs[mask == 0] != 0):
            raise ValueError("masked action has nonzero probability")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> NetworkParams:
    """He-uniform weights, zero biases, zeroed Adam moments."""
    dims = spec.layer_dims
    layers, m, v = [], [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        b = np.zeros(fan_out)
        layers.append((W, b))
        m.append((np.zeros_like(W), np.zeros_like(b)))
        v.append((np.zeros_like(W), np.zeros_like(b)))
    return NetworkParams(spec, layers, m, v)


def forward(params: NetworkParams, x: np.ndarray):
    """Run the MLP. ``x`` is (input_dim,) or (N, input_dim).

    Returns (output, cache); pass the cache to :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x.reshape(1, -1) if squeeze else x
    if a.shape[1] != params.spec.input_dim:
        raise ValueError(
            f"input dim {a.shape[1]} does not match spec {params.spec.input_dim}"
        )
    inputs = []
    n_layers = len(params.layers)
    for i, (W, b) in enumerate(params.layers):
        inputs.append(a)
        z = a @ W.T + b
        a = np.maximum(z, 0.0) if i < n_layers - 1 else z
    cache = (inputs, a.shape[0])
    return (a[0] if squeeze else a), cache


def backward(params: NetworkParams, cache, grad_out: np.ndarray):
    """Exact gradients for every (weight, bias) given dL/d(output).

    ``grad_out`` must match the forward batch; gradients are summed over the
    batch, so pass upstream gradients already scaled for mean losses. The
    ReLU subgradient at 0 is taken as 0.
    """
    inputs, batch = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    if g.shape != (batch, params.spec.output_dim):
        raise ValueError("upstream gradient shape does not match cached forward")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        W, _ = params.layers[i]
        a_in = inputs[i]
        grads[i] = (g.T @ a_in, g.sum(axis=0))
        if i > 0:
            g = g @ W
            # the input of layer i is the ReLU output of layer i-1
            g = g * (a_in > 0)
    return grads


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to valid entries; masked entries get exactly 0.

    Works on (A,) vectors or (N, A) batches.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask)
    valid = mask != 0
    if not np.all(np.any(valid, axis=-1)):
        raise ValueError("mask must expose at least one valid action")
    shifted = np.where(valid, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def policy_forward(params: NetworkParams, obs: np.ndarray, mask: np.ndarray) -> MixedStrategy:
    """Renormalized softmax policy over valid actions."""
    mask = np.asarray(mask)
    if mask.shape[-1] != params.spec.output_dim:
        raise ValueError("mask length does not match policy output dim")
    logits, _ = forward(params, obs)
    return MixedStrategy(masked_softmax(logits, mask), mask)


def policy_probs_batch(params: NetworkParams, obs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """(N, A) action probabilities for a batch of observations and masks."""
    logits, _ = forward(params, obs)
    return masked_softmax(logits, masks)


def critic_forward(params: NetworkParams, blue_obs, red_obs, num_blue_actions,
                   blue_mask=None, red_mask=None) -> PayoffMatrix:
    """Joint Q matrix at one observation pair (rows = Blue, columns = Red).

    The critic's flat output is reshaped row-major into |A_B| x |A_R|, so the
    row split must be supplied by the caller.
    """
    x = np.concatenate([np.asarray(blue_obs, dtype=np.float64),
                        np.asarray(red_obs, dtype=np.float64)])
    out, _ = forward(params, x)
    n_blue = num_blue_actions
    if out.size % n_blue != 0:
        raise ValueError("critic output size is not divisible by |A_B|")
    values = out.reshape(n_blue, out.size // n_blue)
    if blue_mask is None:
        blue_mask = np.ones(values.shape[0])
    if red_mask is None:
        red_mask = np.ones(values.shape[1])
    return PayoffMatrix(values, blue_mask, red_mask)


def critic_matrices_batch(params: NetworkParams, blue_obs, red_obs, num_blue_actions) -> np.ndarray:
    """(N, |A_B|, |A_R|) joint Q matrices for batched observation pairs."""
    x = np.concatenate([blue_obs, red_obs], axis=1)
    out, _ = forward(params, x)
    n = out.shape[0]
    return out.reshape(n, num_blue_actions, -1)


def cross_entropy_loss(policy: MixedStrategy, target: MixedStrategy):
    """-sum target * log(policy) over valid actions, with the log clamped at 1e-12.

    Returns (loss, gradient w.r.t. pre-softmax logits) = (loss, policy - target)
    on valid entries, 0 elsewhere.
    """
    if not np.array_equal(policy.mask, target.mask):
        raise ValueError("policy and target masks differ")
    valid = policy.mask != 0
    p = np.maximum(policy.probs[valid], 1e-12)
    loss = float(-np.sum(target.probs[valid] * np.log(p)))
    grad = np.where(valid, policy.probs - target.probs, 0.0)
    return loss, grad


def huber_loss(prediction: float, target: float, delta: float = 1.0):
    """Huber loss and its derivative w.r.t. the prediction."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = prediction - target
    if abs(e) <= delta:
        return 0.5 * e * e, e
    return delta * (abs(e) - 0.5 * delta), delta * np.sign(e)


def huber_loss_batch(predictions: np.ndarray, targets: np.ndarray, delta: float = 1.0):
    """Elementwise Huber losses and derivatives for arrays."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    small = np.abs(e) <= delta
    loss = np.where(small, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
    grad = np.where(small, e, delta * np.sign(e))
    return loss, grad


def adam_step(params: NetworkParams, grads, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> NetworkParams:
    """Bias-corrected Adam update applied in place; returns ``params``.

    Non-finite gradients reject the whole update and leave parameters untouched.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for gW, gb in grads:
        if not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gb))):
            raise GradientOverflowError("non-finite gradient; update rejected")
    params.step_count += 1
    t = params.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (gW, gb) in enumerate(grads):
        W, b = params.layers[i]
        mW, mb = params.adam_m[i]
        vW, vb = params.adam_v[i]
        mW *= beta1
        mW += (1 - beta1) * gW
        mb *= beta1
        mb += (1 - beta1) * gb
        vW *= beta2
        vW += (1 - beta2) * gW * gW
        vb *= beta2
        vb += (1 - beta2) * gb * gb
        W -= lr * (mW / bc1) / (np.sqrt(vW / bc2) + eps)
        b -= lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
    return params


# --- checkpoint serialization -------------------------------------------------
#
# A checkpoint is a JSON document mapping parameter names such as
# "policy_blue.layer0.weight" to {"shape": [...], "data": [flat row-major]}.
# Floats are written with Python's shortest round-trip repr, so
# read(write(p)) == p bit for bit.


def _entry(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _restore(entry) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def save_checkpoint(path, networks: dict) -> None:
    """Write {name: NetworkParams} atomically to ``path``."""
    doc = {}
    for name, p in networks.items():
        doc[f"{name}.spec"] = {
            "input_dim": p.spec.input_dim,
            "hidden_dims": list(p.spec.hidden_dims),
            "output_dim": p.spec.output_dim,
            "activation": p.spec.activation,
        }
        doc[f"{name}.step_count"] = p.step_count
        for i, (W, b) in enumerate(p.layers):
            doc[f"{name}.layer{i}.weight"] = _entry(W)
            doc[f"{name}.layer{i}.bias"] = _entry(b)
            doc[f"{name}.layer{i}.weight.adam_m"] = _entry(p.adam_m[i][0])
            doc[f"{name}.layer{i}.bias.adam_m"] = _entry(p.adam_m[i][1])
            doc[f"{name}.layer{i}.weight.adam_v"] = _entry(p.adam_v[i][0])
            doc[f"{name}.layer{i}.bias.adam_v"] = _entry(p.adam_v[i][1])
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(doc, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    """Read {name: NetworkParams} written by :func:`save_checkpoint`."""
    with open(path) as f:
        doc = json.load(f)
    names = sorted({k.split(".")[0] for k in doc})
    networks = {}
    for name in names:
        spec_doc = doc[f"{name}.spec"]
        spec = MlpSpec(
            spec_doc["input_dim"],
            tuple(spec_doc["hidden_dims"]),
            spec_doc["output_dim"],
            spec_doc["activation"],
        )
        layers, m, v = [], [], []
        for i in range(len(spec.hidden_dims) + 1):
            layers.append(
                (_restore(doc[f"{name}.layer{i}.weight"]),
                 _restore(doc[f"{name}.layer{i}.bias"]))
            )
            m.append(
                (_restore(doc[f"{name}.layer{i}.weight.adam_m"]),
                 _restore(doc[f"{name}.layer{i}.bias.adam_m"]))
            )
            v.append(
                (_restore(doc[f"{name}.layer{i}.weight.adam_v"]),
                 _restore(doc[f"{name}.layer{i}.bias.adam_v"]))
            )
        networks[name] = NetworkParams(spec, layers, m, v, doc[f"{name}.step_count"])
    return networks
