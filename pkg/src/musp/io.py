"""On-disk formats: config files, checkpoints, embedding files, PGM/PPM images, manifests.

Checkpoint layout (binary)::

    MUSP-CKPT 1 <sha256 of the config block>\\n
    config <byte length>\\n
    <config block: "key = value" lines>
    param <name> <ndim> <extent>...\\n
    <raw little-endian float64 values, row-major>
    ...
    end\\n

Embedding file layout (text)::

    MUSP-EMB 1 <n_minus_1> <c>[ <g>]
    <identity> <camera or -> <n-1 area ratios> <(n-1)*c part values> <g global values>

The optional ``<g>`` appears only when the global vector length differs from c.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .cam import EmbeddingRecord
from .synth import Corpus, SampleSpec

CKPT_TAG = "MUSP-CKPT"
CKPT_VERSION = 1
EMB_TAG = "MUSP-EMB"
EMB_VERSION = 1


class FormatError(ValueError):
    """A file does not follow its expected layout."""


class ConfigKeyError(KeyError):
    """Unknown key or unparsable value in a config file."""

    def __str__(self) -> str:
        return str(self.args[0])


# -- config files -------------------------------------------------------------

def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(key: str, raw: str, kind) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        origin = typing.get_origin(kind)
        if origin is tuple:
            (inner, *_rest) = typing.get_args(kind)
            return tuple(inner(tok) for tok in raw.replace(",", " ").split()) if raw else ()
    except ValueError:
        raise ConfigKeyError(f"config key {key!r}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}")
    raise ConfigKeyError(f"config key {key!r}: unsupported type {kind}")


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, schema: Mapping[str, Any]) -> dict[str, Any]:
    """Parse ``key = value`` lines against ``schema`` (name -> type).

    Blank lines and ``#`` comments are ignored; unknown keys are errors.
    """
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in schema:
            raise ConfigKeyError(
                f"unknown config key {key!r}; accepted keys: {', '.join(sorted(schema))}"
            )
        out[key] = _parse_value(key, raw, schema[key])
    return out


def config_schema(cls) -> dict[str, Any]:
    return _field_types(cls)


def format_config(obj, extra: Mapping[str, Any] | None = None) -> str:
    lines = [f"{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {format_value(value)}")
    return "\n".join(lines) + "\n"


# -- checkpoints ----------------------------------------------------------------

def encode_checkpoint(config_text: str, state: Mapping[str, np.ndarray]) -> bytes:
    block = config_text.encode("utf-8")
    digest = hashlib.sha256(block).hexdigest()
    chunks = [f"{CKPT_TAG} {CKPT_VERSION} {digest}\n".encode(), f"config {len(block)}\n".encode(), block]
    for name, arr in state.items():
        if any(ch.isspace() for ch in name):
            raise FormatError(f"parameter name {name!r} contains whitespace")
        arr = np.asarray(arr, dtype="<f8")
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"param {name} {arr.ndim}{' ' + dims if dims else ''}\n".encode())
        chunks.append(np.ascontiguousarray(arr).tobytes())
    chunks.append(b"end\n")
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    pos = 0

    def line() -> str:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise FormatError("checkpoint truncated")
        text = blob[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return text

    head = line().split()
    if len(head) != 3 or head[0] != CKPT_TAG:
        raise FormatError("not a checkpoint file (bad header)")
    if head[1] != str(CKPT_VERSION):
        raise FormatError(f"unsupported checkpoint version {head[1]}")
    cfg = line().split()
    if len(cfg) != 2 or cfg[0] != "config":
        raise FormatError("checkpoint: missing config block")
    n = int(cfg[1])
    block = blob[pos:pos + n]
    pos += n
    if hashlib.sha256(block).hexdigest() != head[2]:
        raise FormatError("checkpoint: config digest mismatch")
    state: dict[str, np.ndarray] = {}
    while True:
        parts = line().split()
        if parts == ["end"]:
            break
        if len(parts) < 3 or parts[0] != "param":
            raise FormatError(f"checkpoint: unexpected record {' '.join(parts)!r}")
        ndim = int(parts[2])
        shape = tuple(int(d) for d in parts[3:3 + ndim])
        count = int(np.prod(shape)) if shape else 1
        raw = blob[pos:pos + 8 * count]
        if len(raw) != 8 * count:
            raise FormatError(f"checkpoint: parameter {parts[1]} truncated")
        pos += 8 * count
        state[parts[1]] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return block.decode("utf-8"), state


def write_checkpoint(path, config_text: str, state: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(config_text, state))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


# -- embedding files ------------------------------------------------------------

def _tok(x: float) -> str:
    return repr(float(x))


def format_embeddings(records: Sequence[EmbeddingRecord], n_minus_1: int, c: int, g: int | None = None) -> str:
    g = c if g is None else g
    header = f"{EMB_TAG} {EMB_VERSION} {n_minus_1} {c}" + (f" {g}" if g != c else "")
    lines = [header]
    for r in records:
        parts_ok = r.parts.shape[0] == n_minus_1 and (n_minus_1 == 0 or r.parts.shape[1] == c)
        if not parts_ok or r.global_vec.shape != (g,):
            raise FormatError(
                f"record {r.identity}: parts {r.parts.shape} / global {r.global_vec.shape} "
                f"do not match header ({n_minus_1}, {c}) / ({g},)"
            )
        ident = str(r.identity)
        cam = "-" if r.camera is None else str(r.camera)
        if not ident or any(ch.isspace() for ch in ident + cam):
            raise FormatError(f"labels must be non-empty and whitespace-free: {ident!r}, {cam!r}")
        values = [*r.area_ratios, *r.parts.reshape(-1), *r.global_vec]
        lines.append(" ".join([ident, cam] + [_tok(v) for v in values]))
    return "\n".join(lines) + "\n"


def parse_embeddings(text: str) -> tuple[list[EmbeddingRecord], int, int, int]:
    """Return (records, n_minus_1, c, g)."""
    lines = text.splitlines()
    if not lines:
        raise FormatError("embedding file is empty (missing header)")
    head = lines[0].split()
    if len(head) not in (4, 5) or head[0] != EMB_TAG or head[1] != str(EMB_VERSION):
        raise FormatError(f"bad embedding header {lines[0]!r}")
    k, c = int(head[2]), int(head[3])
    g = int(head[4]) if len(head) == 5 else c
    expected = 2 + k + k * c + g
    records = []
    for lineno, line in enumerate(lines[1:], 2):
        toks = line.split(" ")
        if len(toks) != expected:
            raise FormatError(f"line {lineno}: {len(toks)} tokens, expected {expected}")
        try:
            vals = np.array([float(t) for t in toks[2:]])
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        records.append(
            EmbeddingRecord(
                identity=toks[0],
                camera=None if toks[1] == "-" else toks[1],
                area_ratios=vals[:k],
                parts=vals[k:k + k * c].reshape(k, c),
                global_vec=vals[k + k * c:],
            )
        )
    return records, k, c, g


def write_embeddings(path, records, n_minus_1: int, c: int, g: int | None = None) -> None:
    Path(path).write_text(format_embeddings(records, n_minus_1, c, g), encoding="ascii")


def read_embeddings(path) -> tuple[list[EmbeddingRecord], int, int, int]:
    return parse_embeddings(Path(path).read_text(encoding="ascii"))


# -- portable pixmaps -----------------------------------------------------------

def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (h, w, 3) image in [0, 1] as binary PPM."""
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_uint8(image).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (h, w) image in [0, 1] as binary PGM."""
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + to_uint8(image).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, got {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    data = np.frombuffer(blob[pos + 1:pos + 1 + w * h * channels], dtype=np.uint8)
    if data.size != w * h * channels or maxval != 255:
        raise FormatError(f"{path}: truncated or unsupported image")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return data.reshape(shape).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


# -- dataset manifests ----------------------------------------------------------

MANIFEST = "manifest.txt"


def manifest_line(filename: str, spec: SampleSpec, split: str) -> str:
    return " ".join(
        [
            filename,
            str(spec.identity),
            split,
            "1" if spec.mirrored else "0",
            repr(spec.shift[0]),
            repr(spec.shift[1]),
            repr(spec.illumination),
            repr(spec.scale),
            str(spec.aug_seed),
        ]
    )


def write_dataset(out_dir, corpus: Corpus) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (spec, split) in enumerate(zip(corpus.specs, corpus.splits)):
        name = f"images/{i:06d}.ppm"
        write_ppm(out / name, corpus.images[i])
        lines.append(manifest_line(name, spec, str(split)))
    (out / MANIFEST).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def read_dataset(data_dir) -> Corpus:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in data directory {root}")
    specs, splits, images = [], [], []
    for lineno, line in enumerate(path.read_text(encoding="ascii").splitlines(), 1):
        toks = line.split()
        if len(toks) != 9:
            raise FormatError(f"{path}:{lineno}: expected 9 fields, got {len(toks)}")
        name, ident, split, mirrored, sx, sy, illum, scale, seed = toks
        specs.append(
            SampleSpec(int(ident), mirrored == "1", (float(sx), float(sy)), float(illum), int(seed), float(scale))
        )
        splits.append(split)
        images.append(read_ppm(root / name))
    size = images[0].shape[0] if images else 0
    return Corpus(
        images=np.stack(images) if images else np.zeros((0, size, size, 3)),
        identities=np.array([s.identity for s in specs], dtype=int),
        splits=np.array(splits),
        specs=specs,
    )
