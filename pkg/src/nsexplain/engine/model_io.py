"""Model persistence: a ``model.json`` manifest plus a flat little-endian float32 blob.

Manifest layout::

    {
      "format": "ns-model/1",
      "input_dims": [3, 32, 32],
      "class_count": 2,
      "weights_file": "weights.bin",
      "layers": [
        {"id": "conv1", "kind": "conv2d", "params": {...},
         "tensors": {"weight": {"offset": 0, "dims": [4, 3, 3, 3]},
                     "bias":   {"offset": 432, "dims": [4]}}},
        {"id": "relu1", "kind": "relu", "params": {}},
        ...
      ]
    }

Offsets are in bytes into the blob; tensors appear in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from nsexplain.engine.network import LAYER_KINDS, LayerSpec, Model
from nsexplain.errors import ModelFormatError, ShapeError

FORMAT = "ns-model/1"
_LE_F32 = np.dtype("<f4")


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / "model.json" if path.is_dir() or not path.suffix else path


def save(model: Model, path: str | Path, weights_file: str = "weights.bin") -> Path:
    """Write ``model`` to ``path`` (a manifest file, or a directory receiving ``model.json``)."""
    manifest_path = _manifest_path(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    chunks: list[bytes] = []
    offset = 0
    layers = []
    for spec in model.layers:
        entry: dict = {"id": spec.id, "kind": spec.kind, "params": dict(spec.params)}
        if spec.id in model.weights:
            tensors = {}
            for name in ("weight", "bias"):
                arr = np.ascontiguousarray(model.weights[spec.id][name], dtype=_LE_F32)
                raw = arr.tobytes()
                tensors[name] = {"offset": offset, "dims": list(arr.shape)}
                chunks.append(raw)
                offset += len(raw)
            entry["tensors"] = tensors
        layers.append(entry)
    manifest = {
        "format": FORMAT,
        "input_dims": list(model.input_dims),
        "class_count": model.class_count,
        "weights_file": weights_file,
        "layers": layers,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    (manifest_path.parent / weights_file).write_bytes(b"".join(chunks))
    return manifest_path


def load(path: str | Path) -> Model:
    manifest_path = _manifest_path(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"model manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed manifest {manifest_path}: {exc}") from None
    if not isinstance(manifest, dict):
        raise ModelFormatError("malformed manifest: top level must be an object")
    if manifest.get("format") != FORMAT:
        raise ModelFormatError(f"manifest format must be {FORMAT!r}, got {manifest.get('format')!r}")
    for key in ("input_dims", "class_count", "layers"):
        if key not in manifest:
            raise ModelFormatError(f"malformed manifest: missing {key!r}")
    if not manifest["layers"]:
        raise ModelFormatError("malformed manifest: model has no layers")

    blob_path = manifest_path.parent / manifest.get("weights_file", "weights.bin")
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"weight blob not found: {blob_path}") from None

    expected = 0
    for entry in manifest["layers"]:
        for t in (entry.get("tensors") or {}).values():
            end = t["offset"] + 4 * int(np.prod(t["dims"], dtype=np.int64))
            expected = max(expected, end)
    if len(blob) != expected:
        raise ModelFormatError(f"weight blob length mismatch: expected {expected} bytes, got {len(blob)}")

    specs = []
    weights = {}
    for entry in manifest["layers"]:
        layer_id = entry.get("id")
        kind = entry.get("kind")
        if layer_id is None or kind is None:
            raise ModelFormatError(f"malformed manifest: layer entry without id/kind: {entry}")
        if kind not in LAYER_KINDS:
            raise ModelFormatError(f"layer {layer_id!r}: unsupported layer kind {kind!r}")
        specs.append(LayerSpec(layer_id, kind, entry.get("params", {})))
        if entry.get("tensors"):
            arrays = {}
            for name, t in entry["tensors"].items():
                count = int(np.prod(t["dims"], dtype=np.int64))
                arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=t["offset"])
                arrays[name] = arr.reshape(t["dims"]).astype(np.float32)
            weights[layer_id] = arrays
    try:
        return Model(tuple(specs), weights, tuple(manifest["input_dims"]), int(manifest["class_count"]))
    except ShapeError as exc:
        raise ModelFormatError(str(exc)) from None
