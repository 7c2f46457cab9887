"""On-disk formats: KFT1 tensor files, snapshot directories and model checkpoints.

A tensor file is ``b"KFT1"``, the rank as little-endian u32, the extents as
little-endian u32, then the row-major little-endian float64 values.  Headers
of rank 0 and 1 are zero-padded to 16 bytes so every stored array starts at a
16-byte offset; higher ranks use ``8 + 4 * rank`` bytes.

Snapshots and checkpoints are directories holding a ``manifest`` (UTF-8,
one ``key=value`` per line) and one ``.kft`` tensor file per array.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import curvature as cv
from . import nn
from . import strategies as st
from .errors import KfclError, ParseError, SnapshotIncompatibleError

MAGIC = b"KFT1"
FORMAT_VERSION = "1"
MIN_HEADER = 16


def header_size(rank: int) -> int:
    return max(MIN_HEADER, 8 + 4 * rank)


def tensor_bytes(array) -> bytes:
    a = np.array(array, dtype="<f8", order="C")  # ascontiguousarray would promote rank 0 to rank 1
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    head = head.ljust(header_size(a.ndim), b"\0")
    return head + a.tobytes(order="C")


def tensor_from_bytes(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise ParseError(f"{source}: not a KFT1 tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    hsize = header_size(rank)
    if len(raw) < hsize:
        raise ParseError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) != hsize + 8 * n:
        raise ParseError(f"{source}: expected {hsize + 8 * n} bytes for shape {shape}, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8", offset=hsize).reshape(shape).astype(np.float64)


def write_tensor(path, array) -> None:
    path = Path(path)
    try:
        path.write_bytes(tensor_bytes(array))
    except OSError as exc:
        raise KfclError(f"{path}: cannot write tensor: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return tensor_from_bytes(raw, str(path))


# --- manifests --------------------------------------------------------------------------

def write_manifest(path, entries: dict) -> None:
    lines = []
    for key, value in entries.items():
        value = str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise KfclError(f"manifest entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    out = {}
    for i, line in enumerate(text.split("\n"), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError(f"{path}:{i}: expected key=value")
        out[key] = value
    if out.get("formatVersion") != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported formatVersion {out.get('formatVersion')!r}")
    return out


def _file_name(prefix: str, name: str) -> str:
    return f"{prefix}.{name}.kft"


# --- model checkpoints ---------------------------------------------------------------------

def _node_to_json(node) -> str:
    if isinstance(node, nn.Attention):
        return json.dumps({"attention": node.name, "dim": node.dim})
    return json.dumps({
        "name": node.name, "kind": node.kind, "p": node.p, "q": node.q, "kernel_width": node.kernel_width,
        "has_bias": node.has_bias, "activation": node.activation, "shared_group": node.shared_group,
    })


def _node_from_json(text: str):
    d = json.loads(text)
    if "attention" in d:
        return nn.attention_block(d["attention"], int(d["dim"]))
    return nn.LayerSpec(**d)


def model_manifest(model: nn.Model) -> dict:
    entries = {"formatVersion": FORMAT_VERSION, "arch": model.arch, "k": model.k,
               "feature_dim": model.feature_dim, "window": model.window}
    for i, node in enumerate(model.encoder):
        entries[f"encoder.{i}"] = _node_to_json(node)
    for i, node in enumerate(model.head):
        entries[f"head.{i}"] = _node_to_json(node)
    return entries


def save_model(model: nn.Model, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = model_manifest(model)
    entries["kind"] = "model"
    entries["params"] = ",".join(model.params)
    write_manifest(directory / "manifest", entries)
    for name, value in model.params.items():
        write_tensor(directory / _file_name("param", name), value)
    return directory


def _model_from_manifest(directory: Path, m: dict, params: dict) -> nn.Model:
    def nodes(prefix):
        i, out = 0, []
        while f"{prefix}.{i}" in m:
            out.append(_node_from_json(m[f"{prefix}.{i}"]))
            i += 1
        return out

    try:
        encoder, head = nodes("encoder"), nodes("head")
        k, feature_dim, window = int(m["k"]), int(m["feature_dim"]), int(m["window"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"{directory}: bad model description: {exc}") from None
    nn.validate_architecture(encoder, head, feature_dim, window)
    template = nn.build_model(encoder, head, k, feature_dim, window, 0, arch=m.get("arch", "custom"))
    if set(template.params) != set(params):
        raise ParseError(f"{directory}: stored parameters do not match the architecture")
    for name, value in params.items():
        if value.shape != template.params[name].shape:
            raise ParseError(f"{directory}: parameter {name} has shape {value.shape}, expected {template.params[name].shape}")
    return nn.with_params(template, {n: params[n] for n in template.params})


def load_model(directory) -> nn.Model:
    directory = Path(directory)
    m = read_manifest(directory / "manifest")
    names = [n for n in m.get("params", "").split(",") if n]
    params = {n: read_tensor(directory / _file_name("param", n)) for n in names}
    return _model_from_manifest(directory, m, params)


# --- snapshots --------------------------------------------------------------------------

def _fisher_kind(fisher) -> str:
    if fisher is None:
        return "None"
    return {cv.DiagFisher: "Diag", cv.KfcFisher: "KFC", cv.FullFisher: "Full"}[type(fisher)]


def save_snapshot(snapshot: st.TaskSnapshot, directory, model: nn.Model | None = None) -> Path:
    """Write a snapshot directory.  ``model`` (optional) adds the layer census used on reload."""
    snapshot.verify()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {"formatVersion": FORMAT_VERSION, "kind": "snapshot", "taskId": snapshot.task_id,
               "method": snapshot.method, "lambda": repr(float(snapshot.lam)), "fisher": _fisher_kind(snapshot.fisher),
               "checksum": snapshot.checksum, "mean": ",".join(snapshot.mean)}
    if model is not None:
        entries.update({f"layer.{k}": json.dumps(list(spec.signature())) for k, spec in model.groups().items()})
        entries.update({f"model.{k}": v for k, v in model_manifest(model).items() if k != "formatVersion"})
    arrays = {_file_name("mean", n): v for n, v in snapshot.mean.items()}
    fisher = snapshot.fisher
    if isinstance(fisher, cv.DiagFisher):
        entries["diag"] = ",".join(fisher.diag)
        arrays.update({_file_name("diag", n): v for n, v in fisher.diag.items()})
    elif isinstance(fisher, cv.KfcFisher):
        entries["factors"] = ",".join(f"{k}:{int(p.has_bias)}" for k, p in fisher.factors.items())
        entries["diag"] = ",".join(fisher.diag)
        for key, pair in fisher.factors.items():
            arrays[_file_name("A", key)] = pair.A
            arrays[_file_name("G", key)] = pair.G
        arrays.update({_file_name("diag", n): v for n, v in fisher.diag.items()})
    elif isinstance(fisher, cv.FullFisher):
        entries["full_names"] = ",".join(fisher.names)
        arrays["full.kft"] = fisher.matrix
    write_manifest(directory / "manifest", entries)
    for fname, value in arrays.items():
        write_tensor(directory / fname, value)
    return directory


def _names(m: dict, key: str) -> list[str]:
    return [n for n in m.get(key, "").split(",") if n]


def load_snapshot(directory, model: nn.Model | None = None) -> st.TaskSnapshot:
    """Read a snapshot directory, re-verify its checksum, and optionally check it against ``model``."""
    directory = Path(directory)
    m = read_manifest(directory / "manifest")
    if m.get("kind") != "snapshot":
        raise ParseError(f"{directory}: not a snapshot directory")
    mean = {n: read_tensor(directory / _file_name("mean", n)) for n in _names(m, "mean")}
    kind = m.get("fisher", "None")
    if kind == "None":
        fisher = None
    elif kind == "Diag":
        fisher = cv.DiagFisher({n: read_tensor(directory / _file_name("diag", n)) for n in _names(m, "diag")})
    elif kind == "KFC":
        factors = {}
        for item in _names(m, "factors"):
            key, _, bias = item.rpartition(":")
            factors[key] = cv.KroneckerFactorPair(key, read_tensor(directory / _file_name("A", key)),
                                                  read_tensor(directory / _file_name("G", key)), bias == "1")
        diag = {n: read_tensor(directory / _file_name("diag", n)) for n in _names(m, "diag")}
        fisher = cv.KfcFisher(factors, diag)
    elif kind == "Full":
        fisher = cv.FullFisher(read_tensor(directory / "full.kft"), tuple(_names(m, "full_names")))
    else:
        raise ParseError(f"{directory}: unknown Fisher kind {kind!r}")
    try:
        lam = float(m["lambda"])
        task_id, method = m["taskId"], m["method"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{directory}: bad manifest: {exc}") from None
    snap = st.capture_snapshot(task_id, _MeanHolder(mean), fisher, lam, method)
    if snap.checksum != m.get("checksum"):
        raise SnapshotIncompatibleError(f"{directory}: checksum mismatch, snapshot files were modified")
    if model is not None:
        check_snapshot(snap, model)
    return snap


class _MeanHolder:
    """Just enough of a Model for capture_snapshot."""

    def __init__(self, params):
        self.params = params


def check_snapshot(snapshot: st.TaskSnapshot, model: nn.Model) -> None:
    if set(snapshot.mean) != set(model.params):
        raise SnapshotIncompatibleError(f"snapshot {snapshot.task_id}: parameter names differ from the model")
    for name, value in snapshot.mean.items():
        if value.shape != model.params[name].shape:
            raise SnapshotIncompatibleError(f"snapshot {snapshot.task_id}: {name} has shape {value.shape}, "
                                            f"model has {model.params[name].shape}")


def load_snapshot_model(directory) -> nn.Model:
    """Rebuild the model (at the snapshot mean) from a snapshot saved with ``model=``."""
    directory = Path(directory)
    m = read_manifest(directory / "manifest")
    sub = {k[len("model."):]: v for k, v in m.items() if k.startswith("model.")}
    if not sub:
        raise ParseError(f"{directory}: snapshot carries no model description")
    snap = load_snapshot(directory)
    return _model_from_manifest(directory, sub, dict(snap.mean))
