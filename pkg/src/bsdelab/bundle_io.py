"""Flat binary persistence for path bundles (format tag ``RBDF1``).

Layout, all little-endian: the 5 magic bytes, then 64-bit header fields
``d``, ``K``, ``n_paths`` (int64), ``dt`` (float64), ``seed`` (uint64),
then the ``states``, ``mart_increments``, ``fv_increments`` float64
arrays in row-major order.  A JSON sidecar ``<path>.json`` echoes the
originating configuration.  Reflection flags are not stored; they are
reconstructed from the decomposition identity on read.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import PathBundle
from .errors import InputError

MAGIC = b"RBDF1"


def write_bundle(bundle: PathBundle, path) -> None:
    path = Path(path)
    n, kp1, d = bundle.states.shape
    steps = kp1 - 1
    dt = float(bundle.config.dt) if bundle.config is not None else float(bundle.times[1])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        header = np.array([d, steps, n], dtype="<i8")
        fh.write(header.tobytes())
        fh.write(np.array([dt], dtype="<f8").tobytes())
        fh.write(np.array([bundle.seed], dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(bundle.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.mart_increments, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(bundle.fv_increments, dtype="<f8").tobytes())
    sidecar = {
        "horizon": float(bundle.times[-1]),
        "config": bundle.config.describe() if bundle.config is not None else None,
    }
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_bundle(path) -> PathBundle:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise InputError(f"{path} is not a bundle file (bad magic)")
    offset = len(MAGIC)
    d, steps, n = (int(v) for v in np.frombuffer(raw, dtype="<i8", count=3, offset=offset))
    offset += 24
    dt = float(np.frombuffer(raw, dtype="<f8", count=1, offset=offset)[0])
    offset += 8
    seed = int(np.frombuffer(raw, dtype="<u8", count=1, offset=offset)[0])
    offset += 8

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += count * 8
        return arr

    states = take((n, steps + 1, d))
    mart = take((n, steps, d))
    fv = take((n, steps, d))

    sidecar_path = path.with_name(path.name + ".json")
    horizon = steps * dt
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text())
        horizon = float(sidecar.get("horizon", horizon))
    times = np.minimum(np.arange(steps + 1) * dt, horizon)
    times[-1] = horizon

    correction = np.diff(states, axis=1) - mart - fv
    flags = np.any(correction != 0.0, axis=2)
    return PathBundle(
        times=times, states=states, mart_increments=mart, fv_increments=fv,
        reflection_flags=flags, seed=seed, config=None,
    )
