"""Minimal deterministic ranking networks with hand-written reverse mode.

A model is an *encoder* over the context token window followed by mean pooling,
then a *head* applied to every candidate as ``concat(pooled_context, features)``.
The head's last layer emits one score per candidate.  Every op has an explicit
backward; there is no general graph machinery.

Weights follow the ``y = W^T x + b`` convention with ``W`` of shape ``(p, q)``.
Conv1d flattens a receptive field position-major: patch index ``j * p + c`` for
kernel offset ``j`` and input channel ``c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import RankingInstance, Split, as_split
from .errors import ConfigurationError, DivergenceError, UsageError

KINDS = ("Linear", "Conv1d", "Embedding", "LayerNorm", "Activation")
ACTIVATIONS = ("ReLU", "Tanh", "Identity")
LN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    p: int = 1
    q: int = 1
    kernel_width: int = 1
    has_bias: bool = True
    activation: str = "Identity"
    shared_group: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.p < 1 or self.q < 1:
            raise ConfigurationError(f"{self.name}: dimensions must be positive")
        if self.kind == "Conv1d" and self.kernel_width < 1:
            raise ConfigurationError(f"{self.name}: kernel width must be positive")
        if self.kind == "Activation" and self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"{self.name}: unknown activation {self.activation!r}")
        if self.kind == "LayerNorm" and self.p != self.q:
            raise ConfigurationError(f"{self.name}: LayerNorm needs p == q")

    @property
    def key(self) -> str:
        """Parameter storage key; shared layers resolve to their group."""
        return self.shared_group or self.name

    @property
    def fan_in(self) -> int:
        return self.p * self.kernel_width if self.kind == "Conv1d" else self.p

    @property
    def augmented_in(self) -> int:
        """Rows of the bias-augmented weight matrix W'."""
        return self.fan_in + (1 if self.has_bias else 0)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind in ("Linear", "Conv1d"):
            shapes = {"W": (self.fan_in, self.q)}
            if self.has_bias:
                shapes["b"] = (self.q,)
            return shapes
        if self.kind == "Embedding":
            return {"E": (self.p, self.q)}
        if self.kind == "LayerNorm":
            return {"gamma": (self.q,), "beta": (self.q,)}
        return {}

    def signature(self):
        return (self.kind, self.p, self.q, self.kernel_width, self.has_bias)


@dataclass(frozen=True)
class Attention:
    """Single-head self-attention with a residual connection, built from four Linear layers."""

    name: str
    query: LayerSpec
    key_proj: LayerSpec
    value: LayerSpec
    out: LayerSpec

    @property
    def dim(self) -> int:
        return self.query.p

    def layers(self) -> list[LayerSpec]:
        return [self.query, self.key_proj, self.value, self.out]


def attention_block(name: str, dim: int) -> Attention:
    lin = lambda part: LayerSpec(f"{name}.{part}", "Linear", dim, dim)
    return Attention(name, lin("q"), lin("k"), lin("v"), lin("o"))


def _nodes_layers(nodes) -> list[LayerSpec]:
    out = []
    for node in nodes:
        out.extend(node.layers() if isinstance(node, Attention) else [node])
    return out


@dataclass(frozen=True)
class Model:
    encoder: tuple
    head: tuple
    params: dict  # "<key>.<W|b|E|gamma|beta>" -> ndarray
    k: int
    feature_dim: int
    window: int
    arch: str = "custom"

    @property
    def layers(self) -> list[LayerSpec]:
        return _nodes_layers(self.encoder) + _nodes_layers(self.head)

    def groups(self) -> dict[str, LayerSpec]:
        """Parameterised layers by storage key, in order of first use."""
        out: dict[str, LayerSpec] = {}
        for layer in self.layers:
            if layer.param_shapes() and layer.key not in out:
                out[layer.key] = layer
        return out

    def usage_count(self, key: str) -> int:
        return sum(1 for layer in self.layers if layer.key == key)

    def depth_from_output(self, key: str) -> int:
        """0 for the parameterised layer nearest the output, increasing toward the input."""
        keys = list(self.groups())
        return len(keys) - 1 - keys.index(key)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params)


GradientSet = dict  # same keys and shapes as Model.params


# --- construction ---------------------------------------------------------------

def validate_architecture(encoder: Sequence, head: Sequence, feature_dim: int, window: int) -> None:
    if not encoder or not isinstance(encoder[0], LayerSpec) or encoder[0].kind != "Embedding":
        raise ConfigurationError("encoder must start with an Embedding layer")
    if not head:
        raise ConfigurationError("head must contain at least one layer")
    dim, length = encoder[0].q, window
    for node in encoder[1:]:
        if isinstance(node, Attention):
            for lin in node.layers():
                if lin.kind != "Linear" or lin.p != dim or lin.q != dim:
                    raise ConfigurationError(f"{node.name}: attention projections must be Linear {dim}->{dim}")
            continue
        if node.kind == "Embedding":
            raise ConfigurationError(f"{node.name}: Embedding only allowed as the first encoder layer")
        if node.kind != "Activation" and node.p != dim:
            raise ConfigurationError(f"{node.name}: expects input dim {node.p}, got {dim}")
        if node.kind == "Conv1d":
            length -= node.kernel_width - 1
            if length < 1:
                raise ConfigurationError(f"{node.name}: kernel wider than the remaining sequence")
        if node.kind != "Activation":
            dim = node.q
    dim += feature_dim
    for node in head:
        if isinstance(node, Attention) or node.kind in ("Conv1d", "Embedding"):
            raise ConfigurationError("head layers must be Linear, LayerNorm or Activation")
        if node.kind != "Activation":
            if node.p != dim:
                raise ConfigurationError(f"{node.name}: expects input dim {node.p}, got {dim}")
            dim = node.q
    if dim != 1:
        raise ConfigurationError("the scoring head must end in a single output")
    seen: dict[str, tuple] = {}
    for layer in _nodes_layers(encoder) + _nodes_layers(head):
        if layer.shared_group is not None:
            sig = seen.setdefault(layer.shared_group, layer.signature())
            if sig != layer.signature():
                raise ConfigurationError(f"shared group {layer.shared_group!r} mixes layer shapes")
    names = [layer.name for layer in _nodes_layers(encoder) + _nodes_layers(head)]
    if len(set(names)) != len(names):
        raise ConfigurationError("layer names must be unique")


def init_params(groups: dict[str, LayerSpec], seed: int) -> dict[str, np.ndarray]:
    """Uniform(-r, r) weights with r = sqrt(6 / (fan_in + fan_out)); zero biases; unit LayerNorm gain."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, layer in groups.items():
        for pname, shape in layer.param_shapes().items():
            if pname in ("W", "E"):
                r = math.sqrt(6.0 / (shape[0] + shape[1]))
                params[f"{key}.{pname}"] = rng.uniform(-r, r, size=shape)
            elif pname == "gamma":
                params[f"{key}.{pname}"] = np.ones(shape)
            else:
                params[f"{key}.{pname}"] = np.zeros(shape)
    return params


def build_model(encoder, head, k: int, feature_dim: int, window: int, seed: int = 0, arch: str = "custom") -> Model:
    encoder, head = tuple(encoder), tuple(head)
    validate_architecture(encoder, head, feature_dim, window)
    shell = Model(encoder, head, {}, k, feature_dim, window, arch)
    return replace(shell, params=init_params(shell.groups(), seed))


def cnn_layers(vocab: int, feature_dim: int = 16, emb_dim: int = 32, hidden: int = 32, kernel_width: int = 3):
    encoder = [
        LayerSpec("embed", "Embedding", vocab, emb_dim),
        LayerSpec("conv", "Conv1d", emb_dim, hidden, kernel_width=kernel_width),
        LayerSpec("conv_act", "Activation", activation="ReLU"),
    ]
    head = [
        LayerSpec("fc1", "Linear", hidden + feature_dim, hidden),
        LayerSpec("fc1_act", "Activation", activation="ReLU"),
        LayerSpec("score", "Linear", hidden, 1),
    ]
    return encoder, head


def cnn_ranker(vocab: int, k: int = 10, window: int = 10, feature_dim: int = 16, hidden: int = 32,
               emb_dim: int | None = None, kernel_width: int = 3, seed: int = 0) -> Model:
    """Embedding -> Conv1d -> ReLU -> mean-pool -> [concat candidate] -> Linear -> ReLU -> Linear."""
    enc, head = cnn_layers(vocab, feature_dim, emb_dim or hidden, hidden, kernel_width)
    return build_model(enc, head, k, feature_dim, window, seed, arch="cnn")


def transformer_layers(vocab: int, feature_dim: int = 16, dim: int = 32, hidden: int = 32):
    encoder = [
        LayerSpec("embed", "Embedding", vocab, dim),
        attention_block("attn", dim),
        LayerSpec("attn_norm", "LayerNorm", dim, dim),
    ]
    head = [
        LayerSpec("fc1", "Linear", dim + feature_dim, hidden),
        LayerSpec("fc1_act", "Activation", activation="Tanh"),
        LayerSpec("score", "Linear", hidden, 1),
    ]
    return encoder, head


def transformer_ranker(vocab: int, k: int = 10, window: int = 10, feature_dim: int = 16, hidden: int = 32,
                       seed: int = 0) -> Model:
    """Embedding -> self-attention (+residual) -> LayerNorm -> mean-pool -> Linear head."""
    enc, head = transformer_layers(vocab, feature_dim, hidden, hidden)
    return build_model(enc, head, k, feature_dim, window, seed, arch="transformer")


ARCHITECTURES: dict[str, Callable] = {"cnn": cnn_layers, "transformer": transformer_layers}


def build_ranker(arch: str, vocab: int, k: int, window: int, feature_dim: int = 16, hidden: int = 32,
                 seed: int = 0) -> Model:
    if arch == "cnn":
        return cnn_ranker(vocab, k, window, feature_dim, hidden, seed=seed)
    if arch == "transformer":
        return transformer_ranker(vocab, k, window, feature_dim, hidden, seed=seed)
    raise ConfigurationError(f"unknown architecture {arch!r}")


# --- forward / backward -----------------------------------------------------------

def _linear_fwd(params, layer, x):
    y = x @ params[f"{layer.key}.W"]
    if layer.has_bias:
        y = y + params[f"{layer.key}.b"]
    return y


def _linear_bwd(params, layer, x, gy, grads, capture):
    key = layer.key
    x2 = x.reshape(-1, x.shape[-1])
    g2 = gy.reshape(-1, gy.shape[-1])
    grads[f"{key}.W"] += x2.T @ g2
    if layer.has_bias:
        grads[f"{key}.b"] += g2.sum(axis=0)
    if capture is not None:
        capture.setdefault(key, []).append((x, gy))
    return gy @ params[f"{key}.W"].T


def _patches(x, width):
    # (B, T, p) -> (B, T-w+1, w*p), position-major within the window
    win = sliding_window_view(x, width, axis=1)  # (B, T', p, w)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(x.shape[0], -1, width * x.shape[2])


def _layer_norm_fwd(params, layer, x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * params[f"{layer.key}.gamma"] + params[f"{layer.key}.beta"], (xhat, inv)


def _activation(kind, x):
    if kind == "ReLU":
        return np.maximum(x, 0.0)
    if kind == "Tanh":
        return np.tanh(x)
    return x


def _activation_bwd(kind, y, x, gy):
    if kind == "ReLU":
        return gy * (x > 0)
    if kind == "Tanh":
        return gy * (1.0 - y * y)
    return gy


def _softmax(s, axis=-1):
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _apply(params, node, x, tape):
    if isinstance(node, Attention):
        q = _linear_fwd(params, node.query, x)
        kk = _linear_fwd(params, node.key_proj, x)
        v = _linear_fwd(params, node.value, x)
        scale = 1.0 / math.sqrt(node.dim)
        attn = _softmax(q @ kk.transpose(0, 2, 1) * scale)
        ctx = attn @ v
        out = x + _linear_fwd(params, node.out, ctx)
        tape.append((node, (x, q, kk, v, attn, ctx, scale)))
        return out
    kind = node.kind
    if kind == "Embedding":
        tape.append((node, x))
        return params[f"{node.key}.E"][x]
    if kind == "Linear":
        tape.append((node, x))
        return _linear_fwd(params, node, x)
    if kind == "Conv1d":
        patches = _patches(x, node.kernel_width)
        tape.append((node, (patches, x.shape)))
        return _linear_fwd(params, node, patches)
    if kind == "LayerNorm":
        y, cache = _layer_norm_fwd(params, node, x)
        tape.append((node, cache))
        return y
    y = _activation(node.activation, x)
    tape.append((node, (x, y)))
    return y


def _backprop(params, node, cache, gy, grads, capture):
    if isinstance(node, Attention):
        x, q, kk, v, attn, ctx, scale = cache
        dctx = _linear_bwd(params, node.out, ctx, gy, grads, capture)
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ kk
        dk = ds.transpose(0, 2, 1) @ q
        dx = gy.copy()
        dx += _linear_bwd(params, node.query, x, dq, grads, capture)
        dx += _linear_bwd(params, node.key_proj, x, dk, grads, capture)
        dx += _linear_bwd(params, node.value, x, dv, grads, capture)
        return dx
    kind = node.kind
    if kind == "Embedding":
        np.add.at(grads[f"{node.key}.E"], cache, gy)
        if capture is not None:
            capture.setdefault(node.key, []).append((cache, gy))
        return None
    if kind == "Linear":
        return _linear_bwd(params, node, cache, gy, grads, capture)
    if kind == "Conv1d":
        patches, in_shape = cache
        dpatch = _linear_bwd(params, node, patches, gy, grads, capture)
        b, t_out = dpatch.shape[:2]
        w, p = node.kernel_width, in_shape[2]
        dpatch = dpatch.reshape(b, t_out, w, p)
        dx = np.zeros(in_shape)
        for j in range(w):
            dx[:, j : j + t_out] += dpatch[:, :, j]
        return dx
    if kind == "LayerNorm":
        xhat, inv = cache
        key = node.key
        g2 = gy.reshape(-1, gy.shape[-1])
        grads[f"{key}.gamma"] += (g2 * xhat.reshape(g2.shape)).sum(axis=0)
        grads[f"{key}.beta"] += g2.sum(axis=0)
        if capture is not None:
            capture.setdefault(key, []).append((xhat, gy))
        dxhat = gy * params[f"{key}.gamma"]
        n = xhat.shape[-1]
        return inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    x, y = cache
    return _activation_bwd(node.activation, y, x, gy)


def _check_batch(model: Model, split: Split) -> None:
    if split.k != model.k:
        raise UsageError(f"instance has {split.k} candidates, model expects {model.k}")
    if split.candidates.shape[2] != model.feature_dim:
        raise ConfigurationError(
            f"candidate feature dim {split.candidates.shape[2]} does not match model ({model.feature_dim})"
        )
    if split.window != model.window:
        raise ConfigurationError(f"context window {split.window} does not match model ({model.window})")
    vocab = model.encoder[0].p
    if split.tokens.size and (split.tokens.min() < 0 or split.tokens.max() >= vocab):
        raise ConfigurationError(f"token id outside the embedding vocabulary [0, {vocab})")


def run_forward(model: Model, split: Split, tape: list | None = None) -> np.ndarray:
    """Scores of shape (N, k).  When ``tape`` is given it is filled for ``run_backward``."""
    _check_batch(model, split)
    tape = [] if tape is None else tape
    params = model.params
    h = split.tokens
    for node in model.encoder:
        h = _apply(params, node, h, tape)
    pooled = h.mean(axis=1)
    n, d = pooled.shape
    z = np.concatenate([np.broadcast_to(pooled[:, None, :], (n, model.k, d)), split.candidates], axis=-1)
    tape.append(("pool", (h.shape[1], d)))
    for node in model.head:
        z = _apply(params, node, z, tape)
    return z[..., 0]


def run_backward(model: Model, tape: list, dscores: np.ndarray, capture: dict | None = None) -> GradientSet:
    """Reverse pass for ``d(loss)/d(scores) = dscores``; optionally records (input, output-grad) per layer use."""
    params = model.params
    grads = {name: np.zeros_like(v) for name, v in params.items()}
    g = dscores[..., None]
    for node, cache in reversed(tape):
        if node == "pool":
            length, d = cache
            g = np.broadcast_to(g[..., :d].sum(axis=1)[:, None, :] / length, (g.shape[0], length, d))
            continue
        g = _backprop(params, node, cache, g, grads, capture)
    return grads


def forward(model: Model, instance: RankingInstance | Split) -> np.ndarray:
    """Scores for one instance (shape (k,)) or for every instance of a Split (shape (N, k))."""
    if isinstance(instance, RankingInstance):
        return run_forward(model, as_split(instance))[0]
    return run_forward(model, as_split(instance))


def softmax_xent(scores: np.ndarray, positive: np.ndarray):
    """Per-instance cross-entropy and its gradient w.r.t. the scores."""
    z = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(scores.shape[0])
    losses = logz - z[rows, positive]
    d = np.exp(z - logz[:, None])
    d[rows, positive] -= 1.0
    return losses, d


def loss_and_backward(model: Model, batch) -> tuple[float, GradientSet]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    split = as_split(batch) if not isinstance(batch, Split) else batch
    if len(split) == 0:
        raise UsageError("loss_and_backward needs a non-empty batch")
    tape: list = []
    scores = run_forward(model, split, tape)
    losses, d = softmax_xent(scores, split.positive)
    return float(losses.mean()), run_backward(model, tape, d / len(split))


def loss_only(model: Model, batch) -> float:
    split = as_split(batch)
    losses, _ = softmax_xent(run_forward(model, split), split.positive)
    return float(losses.mean())


def sgd_step(model: Model, grads: GradientSet, schedule=0.1) -> Model:
    """theta <- theta - eta_l * g.  ``schedule`` is a float or has ``rate(depth_from_output)``.

    Shared groups already hold the summed gradient of all uses (one storage key).
    """
    if set(grads) != set(model.params):
        raise UsageError("gradient set does not match the model's parameters")
    new = {}
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise UsageError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        rate = schedule if isinstance(schedule, (int, float)) else schedule.rate(model.depth_from_output(name.rsplit(".", 1)[0]))
        new[name] = theta - rate * g
    return replace(model, params=new)


# --- flat views -------------------------------------------------------------------

def flatten(model: Model, tensors: dict | None = None, keys: Sequence[str] | None = None) -> np.ndarray:
    """Concatenate tensors (default: the parameters) row-major in parameter order."""
    tensors = model.params if tensors is None else tensors
    names = [n for n in model.params if keys is None or n.rsplit(".", 1)[0] in keys]
    return np.concatenate([tensors[n].ravel() for n in names]) if names else np.zeros(0)


def unflatten(model: Model, vec: np.ndarray) -> dict:
    if vec.size != model.n_params:
        raise UsageError("flat vector length does not match the parameter count")
    out, i = {}, 0
    for name, v in model.params.items():
        out[name] = vec[i : i + v.size].reshape(v.shape).copy()
        i += v.size
    return out


def with_params(model: Model, params: dict) -> Model:
    return replace(model, params={n: np.array(params[n], dtype=np.float64) for n in model.params})


def zeros_like(model: Model) -> GradientSet:
    return {n: np.zeros_like(v) for n, v in model.params.items()}
