"""Checkpoints: a JSON manifest next to a raw little-endian payload.

Layout of a checkpoint directory::

    manifest.json   format version, arch spec, tensor index, RNG state, epoch, sha256
    payload.bin     concatenated tensors, each at its recorded byte offset

Writes go to temporary files first and are renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .arch import ArchSpec, build_network
from .nn import Network
from .optim import OptimizerState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _collect(net: Network, state: OptimizerState | None) -> dict[str, np.ndarray]:
    arrays = {f"param:{p.name}": p.data for p in net.parameters()}
    arrays.update({f"buffer:{k}": v for k, v in net.buffers().items()})
    if state is not None:
        arrays.update({f"velocity:{k}": v for k, v in state.velocity.items()})
    return arrays


def save_checkpoint(net: Network, state: OptimizerState | None, path, **fields) -> Path:
    """Write ``net`` (and optimizer state) to directory ``path``.

    Extra keyword fields (epoch, metrics, ...) are stored in the manifest.
    """
    if net.spec is None:
        raise CheckpointError("only networks built from an ArchSpec can be checkpointed")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in _collect(net, state).items():
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str.lstrip("<>=|"), "offset": offset, "count": int(a.size)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "arch": net.spec.to_dict(),
        "dtype": np.dtype(net.dtype).name,
        "tensors": index,
        "has_optimizer_state": state is not None,
        "rng_state": state.rng.bit_generator.state if state is not None else None,
        "epoch": state.epoch if state is not None else fields.pop("epoch", 0),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "fields": fields,
    }
    _atomic_write(path / "payload.bin", payload)
    _atomic_write(path / "manifest.json", (json.dumps(manifest, indent=2) + "\n").encode())
    return path


def read_manifest(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def load_checkpoint(path, spec: ArchSpec | None = None) -> tuple[Network, OptimizerState | None]:
    """Rebuild the network (and optimizer state) stored at ``path``.

    When ``spec`` is given the checkpoint is loaded into a network built
    from it; any tensor shape disagreement is an error.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    payload = (path / "payload.bin").read_bytes()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["sha256"]:
        raise CheckpointError(f"checksum mismatch: payload {digest[:12]} vs manifest {manifest['sha256'][:12]}")
    stored_spec = ArchSpec.from_dict(manifest["arch"])
    target = stored_spec if spec is None else spec
    net = build_network(target, seed=0, dtype=np.dtype(manifest["dtype"]))
    params = net.named_parameters()
    buffers = net.buffers()
    has_state = manifest["has_optimizer_state"]
    state = OptimizerState() if has_state else None
    seen = set()
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dt, count=entry["count"], offset=entry["offset"])
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=True).reshape(entry["shape"])
        kind, name = entry["name"].split(":", 1)
        if kind == "param":
            if name not in params or params[name].shape != arr.shape:
                have = params[name].shape if name in params else "missing"
                raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(arr.shape)} vs network {have}")
            params[name].data = arr
            seen.add(name)
        elif kind == "buffer":
            if name not in buffers or buffers[name].shape != arr.shape:
                have = buffers[name].shape if name in buffers else "missing"
                raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(arr.shape)} vs network {have}")
            buffers[name][...] = arr
        elif kind == "velocity" and state is not None:
            state.velocity[name] = arr
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"tensor {sorted(missing)[0]}: missing from checkpoint")
    if state is not None:
        state.epoch = int(manifest["epoch"])
        bg = np.random.PCG64()
        bg.state = manifest["rng_state"]
        state.rng = np.random.Generator(bg)
    return net, state
