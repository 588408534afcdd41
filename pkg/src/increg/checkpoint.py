"""Checkpoint files: magic, JSON metadata, then raw float32 tensor blobs.

Layout:

* 8 bytes magic ``INCREG01``,
* 8 bytes little-endian unsigned JSON byte length,
* the JSON metadata block (utf-8, sorted keys, no whitespace),
* for each parametric layer in declaration order: weight, bias (if any),
  weight momentum, bias momentum (if any), each as a raw little-endian
  float32 blob in row-major order.

The JSON carries the architecture, input shape, iteration, seed, data
normalization, and optional scheduler state (per-group factors and pruned
flags), so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import LayerSpec, NetworkState, resolve_layers

MAGIC = b"INCREG01"


class CheckpointError(ValueError):
    """File is not a valid checkpoint."""


def _layer_def(spec: LayerSpec) -> dict:
    if spec.kind == "conv":
        return {
            "kind": "conv",
            "filters": spec.filters,
            "kernel": [spec.geom.kernel_h, spec.geom.kernel_w],
            "stride": spec.geom.stride,
            "pad": spec.geom.pad,
            "bias": spec.use_bias,
            "prune_exempt": spec.prune_exempt,
        }
    if spec.kind == "fc":
        return {"kind": "fc", "out_features": spec.out_features, "bias": spec.use_bias}
    return {"kind": spec.kind}


def save_checkpoint(path, net: NetworkState, scheduler: dict | None = None) -> None:
    """Write a checkpoint; only float32 networks are storable."""
    if net.dtype != np.dtype(np.float32):
        raise CheckpointError(f"checkpoints store float32 networks, got {net.dtype}")
    meta = {
        "format": MAGIC.decode(),
        "layers": [_layer_def(l) for l in net.layers],
        "input_shape": list(net.input_shape),
        "iteration": net.iteration,
        "seed": net.rng_seed,
        "meta": net.meta,
        "scheduler": scheduler,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for i in net.parametric_indices:
            for arr in (net.weights[i], net.biases[i], net.vel_w[i], net.vel_b[i]):
                if arr is not None:
                    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (NetworkState, scheduler dict or None)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"truncated header in {path}")
    (jlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + jlen:
        raise CheckpointError(f"truncated metadata in {path}")
    try:
        meta = json.loads(raw[off : off + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable metadata in {path}: {e}") from e
    off += jlen
    if meta.get("format") != MAGIC.decode():
        raise CheckpointError(f"metadata format tag mismatch in {path}")
    input_shape = tuple(meta["input_shape"])
    layers = resolve_layers(meta["layers"], input_shape)

    def take(shape) -> np.ndarray:
        nonlocal off
        n = int(np.prod(shape)) * 4
        if len(raw) < off + n:
            raise CheckpointError(f"truncated tensor blob at byte {off} in {path}")
        arr = np.frombuffer(raw[off : off + n], dtype="<f4").reshape(shape)
        off += n
        return arr.astype(np.float32, copy=True)

    weights: list[np.ndarray | None] = [None] * len(layers)
    biases: list[np.ndarray | None] = [None] * len(layers)
    vel_w: list[np.ndarray | None] = [None] * len(layers)
    vel_b: list[np.ndarray | None] = [None] * len(layers)
    for i, spec in enumerate(layers):
        if not spec.parametric:
            continue
        shape = spec.weight_shape()
        weights[i] = take(shape)
        if spec.use_bias:
            biases[i] = take((shape[0],))
        vel_w[i] = take(shape)
        if spec.use_bias:
            vel_b[i] = take((shape[0],))
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in {path}")
    net = NetworkState(
        layers=layers,
        input_shape=input_shape,
        weights=weights,
        biases=biases,
        vel_w=vel_w,
        vel_b=vel_b,
        rng_seed=int(meta["seed"]),
        iteration=int(meta["iteration"]),
        dtype=np.dtype(np.float32),
        meta=meta.get("meta") or {},
    )
    return net, meta.get("scheduler")
