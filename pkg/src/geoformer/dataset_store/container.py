"""On-disk dataset container: ``manifest.json`` plus one raw file per city.

Each city file holds little-endian float32 arrays in C row-major order:
the seven explanatory channels (each ``10*rows x 10*cols``) followed by
the BH and BF label grids (``rows x cols``). ``manifest.json`` fields:

``format``          always ``"geoformer-container"``
``version``         integer layout version (1)
``dtype``           ``"float32"``; ``byte_order`` ``"little"``; ``order`` ``"C"``
``pixels_per_cell`` 10
``channel_order``   explanatory channel names, storage order
``cities``          list of per-city objects:
    ``id``, ``year``, ``rows``, ``cols``, ``origin`` [x0, y0],
    ``cell_size``, ``file`` (relative path), ``n_samples``,
    ``valid_bitmap`` (base64 of ``numpy.packbits`` over the row-major
    valid-cell mask), ``attrs`` (free-form generator metadata),
    ``arrays``: list of ``{name, shape, offset, nbytes, sha256}`` with
    byte offsets relative to the start of ``file``.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError
from ..grid_labeling import FishnetGrid
from .types import CHANNELS, PX, CityStack, Sample

FORMAT = "geoformer-container"
VERSION = 1
LABELS = ("BH", "BF")


class ContainerError(DataError):
    """Malformed, truncated or inconsistent container."""


def _safe_name(city: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", city)


def write_container(stacks: Sequence[CityStack], samples: Sequence[Sample] | None, path) -> Path:
    """Write ``stacks`` to directory ``path``.

    When ``samples`` is given, each city's valid bitmap is rebuilt from the
    sample positions; otherwise the stacks' own bitmaps are stored.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ids = [s.city for s in stacks]
    if len(set(ids)) != len(ids):
        raise ContainerError(f"duplicate city ids: {ids}")
    cities = []
    for stack in stacks:
        stack.validate()
        valid = stack.valid.astype(bool)
        if samples is not None:
            valid = np.zeros_like(valid)
            for s in samples:
                if s.city == stack.city:
                    valid[s.row, s.col] = True
            if np.any(valid & ~stack.valid.astype(bool)):
                raise ContainerError(f"{stack.city}: samples reference cells outside the valid bitmap")
        fname = f"{_safe_name(stack.city)}.f32"
        entries = []
        offset = 0
        with open(path / fname, "wb") as fh:
            named = [(n, stack.channels[i]) for i, n in enumerate(CHANNELS)]
            named += [("BH", stack.bh), ("BF", stack.bf)]
            for name, arr in named:
                blob = np.ascontiguousarray(arr, dtype="<f4").tobytes(order="C")
                fh.write(blob)
                entries.append({
                    "name": name,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(blob),
                    "sha256": hashlib.sha256(blob).hexdigest(),
                })
                offset += len(blob)
        cities.append({
            "id": stack.city,
            "year": int(stack.year),
            "rows": stack.rows,
            "cols": stack.cols,
            "origin": [stack.grid.x0, stack.grid.y0],
            "cell_size": stack.grid.cell_size,
            "file": fname,
            "n_samples": int(valid.sum()),
            "valid_bitmap": base64.b64encode(np.packbits(valid.reshape(-1)).tobytes()).decode("ascii"),
            "attrs": stack.attrs,
            "arrays": entries,
        })
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
        "pixels_per_cell": PX,
        "channel_order": list(CHANNELS),
        "cities": cities,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise ContainerError(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ContainerError(f"{mpath}: invalid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{mpath}: not a {FORMAT} manifest")
    if manifest.get("dtype") != "float32" or manifest.get("byte_order") != "little":
        raise ContainerError(f"{mpath}: unsupported dtype/byte order")
    unknown = [c for c in manifest.get("channel_order", []) if c not in CHANNELS]
    if unknown:
        raise ContainerError(f"{mpath}: unknown channel name(s) {unknown}")
    missing = [c for c in CHANNELS if c not in manifest.get("channel_order", [])]
    if missing:
        raise ContainerError(f"{mpath}: channel_order lacks {missing}")
    return manifest


def read_container(path, verify: bool = True) -> tuple[list[CityStack], list[Sample]]:
    """Load every city and its samples; ``verify`` checks per-array SHA-256."""
    path = Path(path)
    manifest = read_manifest(path)
    order = manifest["channel_order"]
    stacks: list[CityStack] = []
    samples: list[Sample] = []
    for meta in manifest["cities"]:
        R, C = int(meta["rows"]), int(meta["cols"])
        fpath = path / meta["file"]
        try:
            raw = fpath.read_bytes()
        except FileNotFoundError:
            raise ContainerError(f"{fpath}: city file missing") from None
        entries = {e["name"]: e for e in meta["arrays"]}
        for name in list(order) + list(LABELS):
            if name not in entries:
                raise ContainerError(f"{meta['id']}: manifest declares channel {name!r} but no array for it")
        unknown = [n for n in entries if n not in CHANNELS and n not in LABELS]
        if unknown:
            raise ContainerError(f"{meta['id']}: unknown channel name(s) {unknown}")

        def load(name, shape):
            e = entries[name]
            if list(e["shape"]) != list(shape):
                raise ContainerError(f"{meta['id']}/{name}: shape {e['shape']} != expected {list(shape)}")
            end = e["offset"] + e["nbytes"]
            if e["nbytes"] != 4 * int(np.prod(shape)) or end > len(raw):
                raise ContainerError(f"{meta['id']}/{name}: truncated array ({len(raw)} bytes in file, need {end})")
            blob = raw[e["offset"]:end]
            if verify and hashlib.sha256(blob).hexdigest() != e["sha256"]:
                raise ContainerError(f"{meta['id']}/{name}: checksum mismatch")
            return np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)

        channels = np.stack([load(n, (PX * R, PX * C)) for n in CHANNELS])
        bh = load("BH", (R, C))
        bf = load("BF", (R, C))
        bits = np.frombuffer(base64.b64decode(meta["valid_bitmap"]), dtype=np.uint8)
        valid = np.unpackbits(bits)[: R * C].reshape(R, C).astype(bool)
        grid = FishnetGrid(float(meta["origin"][0]), float(meta["origin"][1]), R, C, float(meta["cell_size"]))
        stack = CityStack(meta["id"], int(meta["year"]), grid, channels, bh, bf, valid, dict(meta.get("attrs", {})))
        stacks.append(stack)
        samples.extend(stack.samples())
    return stacks, samples
