"""Named-parameter checkpoint container.

Layout (UTF-8 text up to the delimiter, then binary)::

    diican-checkpoint 1
    config.<field>=<value>          # ModelConfig
    stats.<field>=<value>           # NormStats, optional
    meta.<key>=<value>              # free-form, optional
    <name> <shape_csv> <byte_offset>
    ...
    ---
    <little-endian float32 payload>
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import IoFailure, ManifestMismatch, TruncatedPayload
from .features import NormStats
from .model import DIICAN, ModelConfig, init_params

MAGIC = "diican-checkpoint 1"
DELIM = b"\n---\n"


def _encode(model: DIICAN, stats: NormStats | None, meta: dict | None) -> bytes:
    lines = [MAGIC]
    lines += [f"config.{k}={v}" for k, v in model.config.to_items().items()]
    if stats is not None:
        lines += [f"stats.{k}={v}" for k, v in stats.to_items().items()]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={v}")
    offset = 0
    chunks = []
    for name, p in model.params.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    return "\n".join(lines).encode("utf-8") + DELIM + b"".join(chunks)


def save_checkpoint(model: DIICAN, stats: NormStats | None, path, meta: dict | None = None) -> None:
    try:
        Path(path).write_bytes(_encode(model, stats, meta))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def read_header(path) -> tuple[dict[str, str], list[tuple[str, tuple[int, ...], int]], bytes]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    cut = blob.find(DELIM)
    if cut < 0:
        raise ManifestMismatch(f"{path}: no '---' delimiter")
    text = blob[:cut].decode("utf-8").split("\n")
    if text[0] != MAGIC:
        raise ManifestMismatch(f"{path}: not a diican checkpoint")
    items: dict[str, str] = {}
    manifest = []
    for line in text[1:]:
        if "=" in line:
            k, v = line.split("=", 1)
            items[k] = v
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise ManifestMismatch(f"{path}: bad manifest line {line!r}")
        name, shape, off = parts
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        manifest.append((name, dims, int(off)))
    return items, manifest, blob[cut + len(DELIM):]


def load_checkpoint(path, dtype=np.float32) -> DIICAN:
    """Rebuild a model (with ``norm_stats`` and ``meta`` attached) from ``path``."""
    items, manifest, payload = read_header(path)

    def section(prefix):
        return {k[len(prefix):]: v for k, v in items.items() if k.startswith(prefix)}

    config = ModelConfig.from_items(section("config."))
    expected = init_params(config, 0, np.float32)
    names = [m[0] for m in manifest]
    unknown = [n for n in names if n not in expected]
    if unknown:
        raise ManifestMismatch(f"unknown parameter(s) in manifest: {', '.join(unknown)}")
    missing = [n for n in expected if n not in names]
    if missing or len(set(names)) != len(names):
        raise ManifestMismatch(f"manifest missing or duplicating parameters: {', '.join(missing)}")
    need = sum(int(np.prod(s)) * 4 for _, s, _ in manifest)
    if len(payload) < need:
        raise TruncatedPayload(f"{path}: payload has {len(payload)} bytes, manifest needs {need}")
    if len(payload) > need:
        raise ManifestMismatch(f"{path}: {len(payload) - need} trailing payload bytes")
    params = {}
    for name in expected:
        _, shape, off = manifest[names.index(name)]
        if shape != expected[name].shape:
            raise ManifestMismatch(f"{name}: shape {shape} != expected {expected[name].shape}")
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    model = DIICAN(config, params=params)
    stats = section("stats.")
    model.norm_stats = NormStats.from_items(stats) if stats else None
    model.meta = section("meta.")
    return model
