"""Self-describing single-file checkpoints.

Layout: 6-byte magic ``ENCWM1``, uint32 LE format version, uint64 LE
manifest length, UTF-8 JSON manifest, then the tensor payloads as
little-endian float32 concatenated in manifest order.  Loading validates
magic, version, payload length, and every tensor shape before any model is
constructed, so a corrupt file can never yield a partial model.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .downstream import Classifier
from .encoder import AffineLayer, EncoderModel
from . import tensor as T

MAGIC = b"ENCWM1"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


def _manifest_for(model) -> dict:
    if isinstance(model, EncoderModel):
        kind = "encoder"
        architecture = model.architecture()
    elif isinstance(model, Classifier):
        kind = "classifier"
        architecture = dict(model.encoder.architecture(), classes=model.classes)
    else:
        raise TypeError(f"cannot checkpoint object of type {type(model).__name__}")
    tensors = [{"name": name, "shape": list(p.data.shape)} for name, p in model.named_params()]
    return {"kind": kind, "architecture": architecture, "tensors": tensors}


def save_checkpoint(model, path, config_hash: str = "", provenance: dict | None = None) -> Path:
    """Write an encoder or classifier; round-trips parameters bit-exactly."""
    path = Path(path)
    manifest = _manifest_for(model)
    manifest["provenance"] = dict(provenance or {})
    manifest["config_hash"] = config_hash
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in model.named_params():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return path


def _build_model(manifest: dict):
    arch = manifest["architecture"]
    encoder = EncoderModel.init(arch["input_side"], tuple(arch["hidden_dims"]),
                                arch["feature_dim"], rng=np.random.default_rng(0),
                                channels=arch.get("channels", 3))
    if manifest["kind"] == "encoder":
        return encoder
    if manifest["kind"] == "classifier":
        classes = arch["classes"]
        head = AffineLayer(T.Tensor(np.zeros((arch["feature_dim"], classes), np.float32),
                                    requires_grad=True),
                           T.Tensor(np.zeros(classes, np.float32), requires_grad=True))
        return Classifier(encoder, head, classes)
    raise CheckpointError(f"unknown checkpoint kind {manifest['kind']!r}")


def load_checkpoint(path):
    """Read a checkpoint back into a live model.

    Returns the model; the manifest's provenance dict is attached as
    ``model.provenance`` (classifier) or ``model.meta['provenance']``
    (encoder), and the stored config hash rides along next to it.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path.name}: bad magic (not an ENCWM checkpoint)")
    off = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path.name}: unsupported format version {version}")
    (mlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + mlen:
        raise CheckpointError(f"{path.name}: truncated manifest")
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path.name}: unreadable manifest ({exc})") from None
    off += mlen

    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in manifest["tensors"])
    payload = raw[off:]
    if len(payload) != expected:
        raise CheckpointError(
            f"{path.name}: payload length {len(payload)} does not match manifest total {expected}")

    model = _build_model(manifest)
    params = dict(model.named_params())
    if [t["name"] for t in manifest["tensors"]] != [name for name, _ in model.named_params()]:
        raise CheckpointError(f"{path.name}: manifest tensor list does not match architecture")
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        if params[entry["name"]].data.shape != shape:
            raise CheckpointError(
                f"{path.name}: tensor {entry['name']}: manifest shape {list(shape)} "
                f"does not match architecture shape {list(params[entry['name']].data.shape)}")

    cursor = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=cursor)
        params[entry["name"]].data = arr.reshape(shape).astype(np.float32)
        cursor += 4 * count

    provenance = manifest.get("provenance", {})
    config_hash = manifest.get("config_hash", "")
    if isinstance(model, Classifier):
        model.provenance = dict(provenance)
        model.provenance.setdefault("config_hash", config_hash)
    else:
        model.meta["provenance"] = dict(provenance)
        model.meta["config_hash"] = config_hash
    return model
