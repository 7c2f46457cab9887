"""Empirical Fisher estimates (full, diagonal, Kronecker-factored) and EWC penalties.

All estimates use per-instance gradients of the training loss at the observed
labels, averaged over the data set.  Kronecker factors for a Linear or Conv1d
layer are ``A = mean(x' x'^T)`` over bias-augmented inputs and
``G = mean(dy dy^T)`` over output gradients, each averaged uniformly over every
(instance, usage position) pair.  Usage positions are conv output positions,
candidate slots in the head, token positions inside attention, and every call
site of a shared group.

Flattening is input-major: ``vec(W')`` is ``W'`` row-major with the bias as the
last row, which makes ``vec(D)^T kron(A, G) vec(D) == trace(D^T A D G)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import as_split
from .errors import ConfigurationError, OracleScaleError, SnapshotIncompatibleError, UsageError

ORACLE_CAP = 2500
FIT_CHUNK = 256
PSD_TOL = 1e-9
PENALIZED_KINDS = ("Linear", "Conv1d", "Embedding")


@dataclass(frozen=True)
class DiagFisher:
    diag: dict  # param name -> non-negative array, same shape as the parameter


@dataclass(frozen=True)
class KroneckerFactorPair:
    layer_id: str
    A: np.ndarray  # (p+1, p+1) with bias, else (p, p)
    G: np.ndarray  # (q, q)
    has_bias: bool = True


@dataclass(frozen=True)
class KfcFisher:
    """Kronecker factors for Linear/Conv1d groups plus exact diagonals for embedding tables."""

    factors: dict  # key -> KroneckerFactorPair
    diag: dict  # param name -> array (embedding tables only)


@dataclass(frozen=True)
class FullFisher:
    matrix: np.ndarray
    names: tuple  # parameter names in flattening order


def penalized_keys(model: nn.Model) -> list[str]:
    """Group keys that carry an EWC penalty; LayerNorm parameters never do."""
    return [k for k, layer in model.groups().items() if layer.kind in PENALIZED_KINDS]


def penalized_names(model: nn.Model) -> list[str]:
    keys = set(penalized_keys(model))
    return [n for n in model.params if n.rsplit(".", 1)[0] in keys]


def _chunks(split, size=FIT_CHUNK):
    for start in range(0, len(split), size):
        yield split.take(slice(start, start + size))


def _per_instance_pass(model, chunk):
    """Forward/backward with per-instance loss gradients (batch-size-1 semantics, batched)."""
    tape: list = []
    capture: dict = {}
    scores = nn.run_forward(model, chunk, tape)
    _, d = nn.softmax_xent(scores, chunk.positive)
    nn.run_backward(model, tape, d, capture)
    return capture


def _augment(x2, has_bias):
    if not has_bias:
        return x2
    return np.concatenate([x2, np.ones((x2.shape[0], 1))], axis=1)


# --- full oracle -------------------------------------------------------------------

def per_instance_gradients(model: nn.Model, data) -> np.ndarray:
    """(N, n_params) matrix of flattened single-instance loss gradients."""
    split = as_split(data)
    rows = []
    for i in range(len(split)):
        _, g = nn.loss_and_backward(model, split.take(slice(i, i + 1)))
        rows.append(nn.flatten(model, g))
    return np.array(rows)


def estimate_full_fim(model: nn.Model, data, cap: int = ORACLE_CAP) -> FullFisher:
    """(1/N) sum_i g_i g_i^T over all parameters; only for models below the oracle cap."""
    if model.n_params > cap:
        raise OracleScaleError(f"full Fisher needs {model.n_params}^2 entries; cap is {cap} parameters")
    split = as_split(data)
    if len(split) == 0:
        raise UsageError("Fisher estimation needs data")
    g = per_instance_gradients(model, split)
    return FullFisher(g.T @ g / len(split), tuple(model.params))


# --- diagonal ------------------------------------------------------------------------

def _per_example_sq(model, capture, n):
    """Per-parameter sum over instances of the squared per-instance gradient."""
    groups = model.groups()
    out = {}
    for key, uses in capture.items():
        layer = groups[key]
        if layer.kind in ("Linear", "Conv1d"):
            gw = 0.0
            gb = 0.0
            for x, gy in uses:
                x3 = x.reshape(n, -1, x.shape[-1])
                g3 = gy.reshape(n, -1, gy.shape[-1])
                gw = gw + np.einsum("npi,npj->nij", x3, g3)
                gb = gb + g3.sum(axis=1)
            out[f"{key}.W"] = (gw * gw).sum(axis=0)
            if layer.has_bias:
                out[f"{key}.b"] = (gb * gb).sum(axis=0)
        elif layer.kind == "Embedding":
            vocab = layer.p
            toks = np.concatenate([t.reshape(n, -1) for t, _ in uses], axis=1)
            gys = np.concatenate([g.reshape(n, -1, g.shape[-1]) for _, g in uses], axis=1)
            flat_keys = (np.arange(n)[:, None] * vocab + toks).ravel()
            uniq, inv = np.unique(flat_keys, return_inverse=True)
            per = np.zeros((uniq.size, gys.shape[-1]))
            np.add.at(per, inv, gys.reshape(-1, gys.shape[-1]))
            sq = np.zeros((vocab, gys.shape[-1]))
            np.add.at(sq, uniq % vocab, per * per)
            out[f"{key}.E"] = sq
        elif layer.kind == "LayerNorm":
            gg = 0.0
            gbeta = 0.0
            for xhat, gy in uses:
                x3 = xhat.reshape(n, -1, xhat.shape[-1])
                g3 = gy.reshape(n, -1, gy.shape[-1])
                gg = gg + (x3 * g3).sum(axis=1)
                gbeta = gbeta + g3.sum(axis=1)
            out[f"{key}.gamma"] = (gg * gg).sum(axis=0)
            out[f"{key}.beta"] = (gbeta * gbeta).sum(axis=0)
    return out


def estimate_diag_fim(model: nn.Model, data) -> DiagFisher:
    """(1/N) sum_i g_i**2 per parameter; equals the diagonal of the full estimate."""
    split = as_split(data)
    if len(split) == 0:
        raise UsageError("Fisher estimation needs data")
    acc = {name: np.zeros_like(v) for name, v in model.params.items()}
    for chunk in _chunks(split):
        sq = _per_example_sq(model, _per_instance_pass(model, chunk), len(chunk))
        for name, v in sq.items():
            acc[name] += v
    return DiagFisher({name: v / len(split) for name, v in acc.items()})


# --- Kronecker factors ---------------------------------------------------------------

def estimate_kfac(model: nn.Model, data, layers=None) -> KfcFisher:
    """Kronecker factors for every Linear/Conv1d group (or those in ``layers``).

    Embedding groups in the selection get exact diagonals instead of factors.
    Asking for a LayerNorm raises: layer norms are excluded from the penalty.
    """
    split = as_split(data)
    if len(split) == 0:
        raise UsageError("Fisher estimation needs data")
    groups = model.groups()
    selected = penalized_keys(model) if layers is None else list(layers)
    for key in selected:
        if key not in groups:
            raise ConfigurationError(f"no parameterised layer named {key!r}")
        if groups[key].kind == "LayerNorm":
            raise ConfigurationError(f"{key}: layer norms are ignored by the EWC penalty and cannot be regularised")
    kron_keys = [k for k in selected if groups[k].kind in ("Linear", "Conv1d")]
    emb_keys = [k for k in selected if groups[k].kind == "Embedding"]

    sums = {k: [np.zeros((groups[k].augmented_in,) * 2), np.zeros((groups[k].q,) * 2), 0] for k in kron_keys}
    emb_sq = {f"{k}.E": np.zeros(model.params[f"{k}.E"].shape) for k in emb_keys}
    for chunk in _chunks(split):
        capture = _per_instance_pass(model, chunk)
        for key in kron_keys:
            layer = groups[key]
            for x, gy in capture.get(key, []):
                x2 = _augment(x.reshape(-1, x.shape[-1]), layer.has_bias)
                g2 = gy.reshape(-1, gy.shape[-1])
                sums[key][0] += x2.T @ x2
                sums[key][1] += g2.T @ g2
                sums[key][2] += x2.shape[0]
        if emb_keys:
            sq = _per_example_sq(model, {k: capture[k] for k in emb_keys if k in capture}, len(chunk))
            for name, v in sq.items():
                emb_sq[name] += v
    factors = {}
    for key, (sa, sg, count) in sums.items():
        if count == 0:
            raise ConfigurationError(f"{key}: layer never used in the forward pass")
        a, g = sa / count, sg / count
        # exact symmetry; the accumulation is symmetric up to round-off only
        factors[key] = KroneckerFactorPair(key, (a + a.T) / 2, (g + g.T) / 2, groups[key].has_bias)
    return KfcFisher(factors, {name: v / len(split) for name, v in emb_sq.items()})


def materialize_kron(pair: KroneckerFactorPair, cap: int = ORACLE_CAP) -> np.ndarray:
    """Dense kron(A, G), ordered for input-major vec(W')."""
    dim = pair.A.shape[0] * pair.G.shape[0]
    if dim > cap:
        raise OracleScaleError(f"Kronecker product of dimension {dim} exceeds cap {cap}")
    return np.kron(pair.A, pair.G)


def kron_loop(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Loop-built Kronecker product, an independent check on ``materialize_kron``."""
    pa, qg = a.shape[0], g.shape[0]
    out = np.zeros((pa * qg, pa * qg))
    for i in range(pa):
        for j in range(pa):
            for r in range(qg):
                for c in range(qg):
                    out[i * qg + r, j * qg + c] = a[i, j] * g[r, c]
    return out


def materialize_kfc_fim(model: nn.Model, fisher: KfcFisher) -> np.ndarray:
    """Block-diagonal dense matrix over all parameters, laid out like ``estimate_full_fim``."""
    n = model.n_params
    if n > ORACLE_CAP:
        raise OracleScaleError(f"dense Fisher over {n} parameters exceeds cap {ORACLE_CAP}")
    offsets, i = {}, 0
    for name, v in model.params.items():
        offsets[name] = i
        i += v.size
    out = np.zeros((n, n))
    for key, pair in fisher.factors.items():
        start = offsets[f"{key}.W"]
        block = materialize_kron(pair)
        out[start : start + block.shape[0], start : start + block.shape[0]] = block
    for name, d in fisher.diag.items():
        idx = offsets[name] + np.arange(d.size)
        out[idx, idx] = d.ravel()
    return out


def psd_violation(m: np.ndarray, tol: float = PSD_TOL) -> str | None:
    """None when ``m`` is symmetric PSD to ``tol`` (relative to its trace), else a reason."""
    if not np.all(np.isfinite(m)):
        return "non-finite entries"
    scale = max(abs(float(np.trace(m))), 1e-300)
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > tol * scale:
        return f"asymmetry {asym:.3e}"
    lo = float(np.linalg.eigvalsh((m + m.T) / 2).min()) if m.size else 0.0
    if lo < -tol * scale:
        return f"min eigenvalue {lo:.3e}"
    return None


# --- penalties -----------------------------------------------------------------------

def _delta(current: nn.Model, mean: dict, name: str) -> np.ndarray:
    if name not in mean or mean[name].shape != current.params[name].shape:
        raise SnapshotIncompatibleError(f"snapshot mean does not match parameter {name}")
    return current.params[name] - mean[name]


def _augmented_delta(current, mean, key, has_bias):
    d = _delta(current, mean, f"{key}.W")
    if has_bias:
        d = np.vstack([d, _delta(current, mean, f"{key}.b")[None, :]])
    return d


def _check_diag(current, diag):
    for name in penalized_names(current):
        if name not in diag or diag[name].shape != current.params[name].shape:
            raise SnapshotIncompatibleError(f"diagonal Fisher missing or mis-shaped for {name}")


def diag_penalty(current: nn.Model, snapshot, lam: float) -> float:
    """lam * sum_j F_jj (theta_j - mu_j)^2 over penalised parameters."""
    fisher = snapshot.fisher
    if not isinstance(fisher, DiagFisher):
        raise SnapshotIncompatibleError("diag_penalty needs a diagonal Fisher")
    _check_diag(current, fisher.diag)
    total = 0.0
    for name in penalized_names(current):
        d = _delta(current, snapshot.mean, name)
        total += float(np.sum(fisher.diag[name] * d * d))
    return lam * total


def _check_kfc(current, fisher):
    groups = current.groups()
    for key in penalized_keys(current):
        layer = groups[key]
        if layer.kind == "Embedding":
            name = f"{key}.E"
            if name not in fisher.diag or fisher.diag[name].shape != current.params[name].shape:
                raise SnapshotIncompatibleError(f"embedding diagonal missing for {key}")
            continue
        pair = fisher.factors.get(key)
        if pair is None:
            raise SnapshotIncompatibleError(f"no Kronecker factors for regularised layer {key}")
        if pair.A.shape != (layer.augmented_in,) * 2 or pair.G.shape != (layer.q,) * 2:
            raise SnapshotIncompatibleError(f"Kronecker factor shapes do not match layer {key}")


def kfac_penalty(current: nn.Model, snapshot, lam: float) -> float:
    """lam * sum over layers of trace(D^T A D G), D the augmented weight difference."""
    fisher = snapshot.fisher
    if not isinstance(fisher, KfcFisher):
        raise SnapshotIncompatibleError("kfac_penalty needs Kronecker factors")
    _check_kfc(current, fisher)
    total = 0.0
    for key, pair in fisher.factors.items():
        d = _augmented_delta(current, snapshot.mean, key, pair.has_bias)
        total += float(np.sum((pair.A @ d) * (d @ pair.G)))
    for name, diag in fisher.diag.items():
        d = _delta(current, snapshot.mean, name)
        total += float(np.sum(diag * d * d))
    return lam * total


def full_penalty(current: nn.Model, snapshot, lam: float) -> float:
    """lam * D^T F D with the dense oracle Fisher restricted to penalised parameters."""
    fisher = snapshot.fisher
    d = _full_delta(current, snapshot, fisher)
    return lam * float(d @ fisher.matrix @ d)


def _full_delta(current, snapshot, fisher):
    if tuple(current.params) != fisher.names:
        raise SnapshotIncompatibleError("full Fisher parameter layout does not match the model")
    keep = set(penalized_names(current))
    return np.concatenate(
        [(_delta(current, snapshot.mean, n) if n in keep else np.zeros(current.params[n].shape)).ravel() for n in current.params]
    )


def l2_penalty(current: nn.Model, snapshot, lam: float) -> float:
    """lam * ||theta - mu||^2 over penalised parameters (identity Fisher)."""
    total = 0.0
    for name in penalized_names(current):
        d = _delta(current, snapshot.mean, name)
        total += float(np.sum(d * d))
    return lam * total


def penalty(current: nn.Model, snapshot, lam: float) -> float:
    """Dispatch on the snapshot's Fisher representation; ``None`` means identity (L2)."""
    fisher = snapshot.fisher
    if fisher is None:
        return l2_penalty(current, snapshot, lam)
    if isinstance(fisher, DiagFisher):
        return diag_penalty(current, snapshot, lam)
    if isinstance(fisher, KfcFisher):
        return kfac_penalty(current, snapshot, lam)
    if isinstance(fisher, FullFisher):
        return full_penalty(current, snapshot, lam)
    raise SnapshotIncompatibleError(f"unknown Fisher representation {type(fisher).__name__}")


def penalty_gradient(current: nn.Model, snapshot, lam: float) -> dict:
    """Exact gradient of ``penalty``: 2 lam F*D (diagonal), 2 lam A D G (Kronecker), 2 lam D (L2)."""
    grads = nn.zeros_like(current)
    fisher = snapshot.fisher
    if fisher is None:
        for name in penalized_names(current):
            grads[name] = 2.0 * lam * _delta(current, snapshot.mean, name)
    elif isinstance(fisher, DiagFisher):
        _check_diag(current, fisher.diag)
        for name in penalized_names(current):
            grads[name] = 2.0 * lam * fisher.diag[name] * _delta(current, snapshot.mean, name)
    elif isinstance(fisher, KfcFisher):
        _check_kfc(current, fisher)
        for key, pair in fisher.factors.items():
            d = _augmented_delta(current, snapshot.mean, key, pair.has_bias)
            g = 2.0 * lam * (pair.A @ d @ pair.G)
            if pair.has_bias:
                grads[f"{key}.W"] = g[:-1]
                grads[f"{key}.b"] = g[-1]
            else:
                grads[f"{key}.W"] = g
        for name, diag in fisher.diag.items():
            grads[name] = 2.0 * lam * diag * _delta(current, snapshot.mean, name)
    elif isinstance(fisher, FullFisher):
        d = _full_delta(current, snapshot, fisher)
        keep = set(penalized_names(current))
        flat = 2.0 * lam * (fisher.matrix @ d)
        full = nn.unflatten(current, flat)
        for name in keep:
            grads[name] = full[name]
    else:
        raise SnapshotIncompatibleError(f"unknown Fisher representation {type(fisher).__name__}")
    return grads


# --- memory accounting ----------------------------------------------------------------

SCHEMES = ("Full", "BlockDiag", "KFC", "Diag")


def memory_footprint(model_or_layers, scheme: str) -> int:
    """Stored element count of a Fisher representation over the penalised layers.

    Accepts a Model or an iterable of LayerSpecs (no parameters needed, so
    infeasible sizes can be reported without allocating them).  Embedding
    tables are stored diagonally under KFC.
    """
    if scheme not in SCHEMES:
        raise UsageError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    layers = model_or_layers.layers if isinstance(model_or_layers, nn.Model) else list(model_or_layers)
    groups: dict = {}
    for layer in layers:
        if layer.kind in PENALIZED_KINDS:
            groups.setdefault(layer.key, layer)
    sizes = {k: (l.augmented_in * l.q if l.kind != "Embedding" else l.p * l.q) for k, l in groups.items()}
    total = sum(sizes.values())
    if scheme == "Full":
        return total * total
    if scheme == "Diag":
        return total
    if scheme == "BlockDiag":
        return sum(s * s for s in sizes.values())
    return sum(
        (l.augmented_in ** 2 + l.q ** 2) if l.kind != "Embedding" else sizes[k] for k, l in groups.items()
    )
