"""Bit-exact binary persistence for model states, datasets, and reports.

Container layout (little-endian throughout):

    b"AMLG" | u32 manifest length | manifest JSON | payload bytes

The manifest indexes every array in the payload by name, offset, byte
length, shape, and CRC32, so any single flipped byte is caught on load
and reported with its absolute file offset.  Parameters serialize as
f64, labels as u16, masks as u8.  All writes go to a temp file first and
rename into place, so a crash never leaves a half-written artifact.
"""

import dataclasses
import json
import os
import zlib

import numpy as np

from .errors import ConfigurationError, FormatError
from .nets import (ChannelCoding, ModelState, count_params, spec_from_dict,
                   spec_to_dict)
from .scenegen import Sample, SceneConfig
from .tensor import Tensor

MAGIC = b"AMLG"
FORMAT_VERSION = 1


def _atomic_write(path, data: bytes):
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, str(path))


def _pack(manifest: dict, payload: bytes) -> bytes:
    m = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + len(m).to_bytes(4, "little") + m + payload


def _unpack(raw: bytes, kind: str):
    """Returns (manifest, payload, payload's offset in the file)."""
    if len(raw) < 8:
        raise FormatError(f"file holds {len(raw)} bytes, shorter than any header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    mlen = int.from_bytes(raw[4:8], "little")
    if len(raw) < 8 + mlen:
        raise FormatError(f"manifest claims {mlen} bytes but only "
                          f"{len(raw) - 8} follow the header")
    try:
        manifest = json.loads(raw[8:8 + mlen])
    except ValueError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"format version {version!r} not supported "
                          f"(this build reads {FORMAT_VERSION})")
    if manifest.get("kind") != kind:
        raise FormatError(f"expected a {kind} file, found {manifest.get('kind')!r}")
    return manifest, raw[8 + mlen:], 8 + mlen


def _entry(name: str, arr: np.ndarray, dtype: str, offset: int):
    blob = np.ascontiguousarray(arr, dtype=dtype).tobytes()
    return {"name": name, "dtype": dtype, "offset": offset,
            "bytelen": len(blob), "shape": list(arr.shape),
            "crc32": zlib.crc32(blob)}, blob


def _checked_blob(payload: bytes, entry: dict, payload_start: int, what: str) -> np.ndarray:
    off, ln = entry["offset"], entry["bytelen"]
    if off < 0 or off + ln > len(payload):
        raise FormatError(f"{what} {entry['name']!r} extends past the end of the file")
    blob = payload[off:off + ln]
    crc = zlib.crc32(blob)
    if crc != entry["crc32"]:
        lo, hi = payload_start + off, payload_start + off + ln
        raise FormatError(
            f"checksum mismatch for {what} {entry['name']!r}: stored "
            f"{entry['crc32']:#010x}, computed {crc:#010x} "
            f"(file bytes {lo}..{hi})")
    shape = tuple(entry["shape"])
    dtype = np.dtype(entry["dtype"])
    if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != ln:
        raise FormatError(f"{what} {entry['name']!r}: shape {shape} does not "
                          f"fill {ln} bytes of {dtype}")
    return np.frombuffer(blob, dtype=dtype).reshape(shape)


# ---------------------------------------------------------------------------
# model checkpoints

def save_model(path, spec, state: ModelState):
    count_params(spec, state)  # refuse to persist a state that contradicts its spec
    entries, chunks, offset = [], [], 0
    for name, t in state.params.items():
        e, blob = _entry(name, t.data, "<f8", offset)
        entries.append(e)
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "kind": "model",
                "spec": spec_to_dict(spec), "step": state.step,
                "params": entries}
    _atomic_write(path, _pack(manifest, b"".join(chunks)))


def load_model(path, trainable: bool = False):
    """Returns (spec, state); every parameter byte is checksummed."""
    with open(path, "rb") as f:
        raw = f.read()
    manifest, payload, start = _unpack(raw, "model")
    spec = spec_from_dict(manifest["spec"]).validate()
    params = {}
    for e in manifest["params"]:
        arr = _checked_blob(payload, e, start, "parameter").astype(np.float64)
        params[e["name"]] = Tensor(arr, requires_grad=trainable)
    state = ModelState(params, step=int(manifest.get("step", 0)))
    try:
        count_params(spec, state)
    except ConfigurationError as e:
        raise FormatError(f"manifest parameters do not fit its network spec: {e}") from e
    return spec, state


# ---------------------------------------------------------------------------
# dataset shards

_FIELD_DTYPES = (("image", "<f8"), ("seg", "<u2"), ("depth", "<f8"),
                 ("normal", "<f8"), ("mask", "u1"))


def save_shard(path, samples, config: SceneConfig = None):
    if not samples:
        raise ConfigurationError("a shard must hold at least one sample")
    stacked = {
        "image": np.stack([s.image for s in samples]),
        "seg": np.stack([s.seg for s in samples]),
        "depth": np.stack([s.depth for s in samples]),
        "normal": np.stack([s.normal for s in samples]),
        "mask": np.stack([s.mask for s in samples]),
    }
    if stacked["seg"].min() < 0 or stacked["seg"].max() > np.iinfo(np.uint16).max:
        raise ConfigurationError("labels do not fit the shard's u16 encoding")
    entries, chunks, offset = [], [], 0
    for name, dtype in _FIELD_DTYPES:
        e, blob = _entry(name, stacked[name], dtype, offset)
        entries.append(e)
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "kind": "shard",
                "count": len(samples), "fields": entries}
    if config is not None:
        manifest["scene"] = dataclasses.asdict(config)
    _atomic_write(path, _pack(manifest, b"".join(chunks)))


def load_shard(path):
    """Returns (samples, scene config or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    manifest, payload, start = _unpack(raw, "shard")
    fields = {e["name"]: _checked_blob(payload, e, start, "field")
              for e in manifest["fields"]}
    missing = {name for name, _ in _FIELD_DTYPES} - set(fields)
    if missing:
        raise FormatError(f"shard is missing fields {sorted(missing)}")
    count = manifest["count"]
    if any(f.shape[0] != count for f in fields.values()):
        raise FormatError(f"field lengths disagree with sample count {count}")
    samples = [Sample(image=fields["image"][i].astype(np.float64),
                      seg=fields["seg"][i].astype(np.int64),
                      depth=fields["depth"][i].astype(np.float64),
                      normal=fields["normal"][i].astype(np.float64),
                      mask=fields["mask"][i].astype(bool))
               for i in range(count)]
    config = None
    if "scene" in manifest:
        config = SceneConfig(**manifest["scene"]).validate()
    return samples, config


# ---------------------------------------------------------------------------
# online three-task composites

def save_online_student(path, student):
    """Persist the composite's own pieces: trunk, the two codings, and the
    attach points.  The frozen donor networks live in their own model
    checkpoints and are re-attached after loading."""
    count_params(student.trunk_spec, student.trunk_state)
    named = list(student.trunk_state.params.items())
    for label, coding in (("u", student.u_coding), ("m", student.m_coding)):
        for key, t in coding.params().items():
            named.append((f"{label}.{key}", t))
    entries, chunks, offset = [], [], 0
    for name, t in named:
        e, blob = _entry(name, t.data, "<f8", offset)
        entries.append(e)
        chunks.append(blob)
        offset += len(blob)
    manifest = {"format_version": FORMAT_VERSION, "kind": "online",
                "spec": spec_to_dict(student.trunk_spec),
                "attach": {"u": student.attach_u, "m": student.attach_m},
                "params": entries}
    _atomic_write(path, _pack(manifest, b"".join(chunks)))


def load_online_student(path, trainable: bool = False):
    """Returns the composite with empty donor slots (target2, normnet None)."""
    from .amalgamation import OnlineStudent
    with open(path, "rb") as f:
        raw = f.read()
    manifest, payload, start = _unpack(raw, "online")
    spec = spec_from_dict(manifest["spec"]).validate()
    attach = manifest["attach"]
    tensors = {}
    for e in manifest["params"]:
        arr = _checked_blob(payload, e, start, "parameter").astype(np.float64)
        tensors[e["name"]] = Tensor(arr, requires_grad=trainable)
    trunk = {k: t for k, t in tensors.items() if k.startswith("block")}
    state = ModelState(trunk)
    try:
        count_params(spec, state)
    except ConfigurationError as e:
        raise FormatError(f"manifest parameters do not fit its network spec: {e}") from e
    codings = {}
    for label in ("u", "m"):
        try:
            codings[label] = ChannelCoding(*(tensors[f"{label}.coding.{p}"]
                                             for p in ("w1", "b1", "w2", "b2")))
        except KeyError as e:
            raise FormatError(f"online checkpoint is missing coding parameter {e}") from e
        n = int(attach[label])
        if not 1 <= n <= spec.n_blocks:
            raise FormatError(f"attach point {n} outside 1..{spec.n_blocks}")
        if codings[label].channels != spec.widths[n - 1]:
            raise FormatError(
                f"{label} coding carries {codings[label].channels} channels but "
                f"block {n} features carry {spec.widths[n - 1]}")
    return OnlineStudent(spec, state, codings["u"], codings["m"],
                         int(attach["u"]), int(attach["m"]), None, None)


# ---------------------------------------------------------------------------
# JSON and text sidecars (reports, run configuration, tables)

def save_json(path, obj):
    data = (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode()
    _atomic_write(path, data)


def load_json(path):
    with open(path, "rb") as f:
        return json.loads(f.read())


def save_text(path, text: str):
    _atomic_write(path, (text.rstrip("\n") + "\n").encode())
