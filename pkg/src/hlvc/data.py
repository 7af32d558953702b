"""Dataset records, binary shard and checkpoint files, batching, synthesis.

Shard layout (all integers little-endian)::

    magic   b"HLVS"
    version u16
    count   u64
    records:
        id_len u16, id bytes (UTF-8)
        layer_count u8
        per layer: label_count u16, label_count * u32 indices
        feature_kind u8   (bit 0: frame features present instead of pooled,
                           bit 1: audio vector appended)
        pooled:  dim u32, dim * f32
        frames:  dim u32, frame_count u32, frame_count * dim * f32
        audio:   dim u32, dim * f32   (only when bit 1 is set)
    crc32   u32 over every byte after the 6-byte magic+version header

Checkpoints share the framing with magic b"HLVC": step u64, a JSON config
blob, then a tensor directory of named float arrays (dtype byte 0 = f32,
1 = f64), and the same trailing crc32. Fitted normalizer statistics ride
along under reserved "norm." tensor names plus a "normalizer" config entry.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib

import numpy as np

from .features import NormalizerStats, mean_pool, concat_audio
from .hierarchy import LabelHierarchy, ConceptLayer

SHARD_MAGIC = b"HLVS"
SHARD_VERSION = 1
CHECKPOINT_MAGIC = b"HLVC"
CHECKPOINT_VERSION = 1

_KIND_FRAMES = 1
_KIND_AUDIO = 2

_NORM_PREFIX = "norm."


class ShardError(Exception):
    """Base class for shard read/write failures."""


class ShardFormatError(ShardError):
    """Wrong magic, unsupported version, or malformed structure."""


class ShardTruncatedError(ShardError):
    """The file ends before the declared content does."""


class ShardChecksumError(ShardError):
    """Structure parses but the trailing CRC32 does not match."""


class CheckpointError(Exception):
    """A checkpoint file is malformed, corrupted, or inconsistent."""


@dataclasses.dataclass(eq=False)
class VideoRecord:
    """One video: id, per-layer positive labels, and features.

    Exactly one of ``pooled`` (D,) or ``frames`` (T, D) is set; ``audio``
    (Da,) is optional. Feature arrays are float32, matching the shard
    payload, so write/read round-trips are bit-exact.
    """

    video_id: str
    labels: list
    pooled: np.ndarray | None = None
    frames: np.ndarray | None = None
    audio: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.pooled is None) == (self.frames is None):
            raise ValueError("exactly one of pooled or frames must be set")
        self.labels = [
            np.unique(np.asarray(list(layer), dtype=np.int64)) for layer in self.labels
        ]
        if self.pooled is not None:
            self.pooled = np.ascontiguousarray(self.pooled, dtype=np.float32)
            if self.pooled.ndim != 1:
                raise ValueError("pooled features must be 1-D")
        if self.frames is not None:
            self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
            if self.frames.ndim != 2 or self.frames.shape[0] == 0:
                raise ValueError("frames must be a non-empty (T, D) array")
        if self.audio is not None:
            self.audio = np.ascontiguousarray(self.audio, dtype=np.float32)
            if self.audio.ndim != 1:
                raise ValueError("audio features must be 1-D")

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented

        def same(a, b) -> bool:
            if (a is None) != (b is None):
                return False
            return a is None or np.array_equal(a, b)

        return (
            self.video_id == other.video_id
            and len(self.labels) == len(other.labels)
            and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
            and same(self.pooled, other.pooled)
            and same(self.frames, other.frames)
            and same(self.audio, other.audio)
        )


def video_feature(record: VideoRecord, include_audio: bool = False) -> np.ndarray:
    """Video-level float64 feature vector: pooled (or mean of frames), then audio."""
    base = record.pooled if record.pooled is not None else mean_pool(record.frames)
    base = np.asarray(base, dtype=np.float64)
    if include_audio:
        if record.audio is None:
            raise ValueError(f"record {record.video_id!r} has no audio features")
        return concat_audio(base, record.audio)
    return base


def _encode_record(rec: VideoRecord) -> bytes:
    out = bytearray()
    id_bytes = rec.video_id.encode("utf-8")
    if len(id_bytes) > 0xFFFF:
        raise ValueError(f"video id too long: {len(id_bytes)} bytes")
    out += struct.pack("<H", len(id_bytes))
    out += id_bytes
    if len(rec.labels) > 0xFF:
        raise ValueError(f"too many label layers: {len(rec.labels)}")
    out += struct.pack("<B", len(rec.labels))
    for layer in rec.labels:
        if layer.size > 0xFFFF:
            raise ValueError(f"too many labels in one layer: {layer.size}")
        if layer.size and (layer[0] < 0 or layer[-1] > 0xFFFFFFFF):
            raise ValueError("label index out of u32 range")
        out += struct.pack("<H", layer.size)
        out += layer.astype("<u4").tobytes()
    kind = 0
    if rec.frames is not None:
        kind |= _KIND_FRAMES
    if rec.audio is not None:
        kind |= _KIND_AUDIO
    out += struct.pack("<B", kind)
    if rec.frames is not None:
        t, d = rec.frames.shape
        out += struct.pack("<II", d, t)
        out += rec.frames.astype("<f4").tobytes()
    else:
        out += struct.pack("<I", rec.pooled.shape[0])
        out += rec.pooled.astype("<f4").tobytes()
    if rec.audio is not None:
        out += struct.pack("<I", rec.audio.shape[0])
        out += rec.audio.astype("<f4").tobytes()
    return bytes(out)


def write_shard(path, records) -> None:
    """Write records to a shard file with a trailing checksum."""
    records = list(records)
    body = bytearray(struct.pack("<Q", len(records)))
    for rec in records:
        body += _encode_record(rec)
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<H", SHARD_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Cursor:
    """Bounds-checked reader over a byte buffer; overruns raise truncation."""

    def __init__(self, buf: bytes, start: int, end: int, error):
        self.buf = buf
        self.off = start
        self.end = end
        self.error = error

    def take(self, n: int) -> bytes:
        if self.off + n > self.end:
            raise self.error(
                f"need {n} bytes at offset {self.off}, only {self.end - self.off} left"
            )
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_file(path, magic: bytes, version: int, fmt_error, trunc_error) -> _Cursor:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(magic):
        raise trunc_error(f"{path}: file shorter than the magic header")
    if buf[: len(magic)] != magic:
        raise fmt_error(f"{path}: bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    if len(buf) < len(magic) + 2 + 4:
        raise trunc_error(f"{path}: file too short for header and checksum")
    (got_version,) = struct.unpack_from("<H", buf, len(magic))
    if got_version != version:
        raise fmt_error(f"{path}: unsupported version {got_version}, expected {version}")
    return _Cursor(buf, len(magic) + 2, len(buf) - 4, trunc_error)


def _verify_crc(cur: _Cursor, path, fmt_error, crc_error) -> None:
    if cur.off != cur.end:
        raise fmt_error(f"{path}: {cur.end - cur.off} trailing bytes after last record")
    (stored,) = struct.unpack_from("<I", cur.buf, cur.end)
    actual = zlib.crc32(cur.buf[6 : cur.end])
    if stored != actual:
        raise crc_error(f"{path}: checksum mismatch (stored {stored:#x}, computed {actual:#x})")


def read_shard(path) -> list:
    """Read a shard; magic, version, truncation, and checksum failures raise
    distinct error types."""
    cur = _read_file(path, SHARD_MAGIC, SHARD_VERSION, ShardFormatError, ShardTruncatedError)
    (count,) = cur.unpack("<Q")
    records = []
    for _ in range(count):
        (id_len,) = cur.unpack("<H")
        try:
            video_id = cur.take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ShardFormatError(f"{path}: undecodable video id: {exc}") from None
        (layer_count,) = cur.unpack("<B")
        labels = []
        for _ in range(layer_count):
            (n,) = cur.unpack("<H")
            idx = np.frombuffer(cur.take(4 * n), dtype="<u4").astype(np.int64)
            labels.append(idx)
        (kind,) = cur.unpack("<B")
        if kind > 3:
            raise ShardFormatError(f"{path}: unknown feature kind {kind}")
        pooled = frames = audio = None
        if kind & _KIND_FRAMES:
            d, t = cur.unpack("<II")
            if t == 0:
                raise ShardFormatError(f"{path}: record {video_id!r} has zero frames")
            frames = np.frombuffer(cur.take(4 * d * t), dtype="<f4").reshape(t, d).copy()
        else:
            (d,) = cur.unpack("<I")
            pooled = np.frombuffer(cur.take(4 * d), dtype="<f4").copy()
        if kind & _KIND_AUDIO:
            (da,) = cur.unpack("<I")
            audio = np.frombuffer(cur.take(4 * da), dtype="<f4").copy()
        records.append(
            VideoRecord(video_id, labels, pooled=pooled, frames=frames, audio=audio)
        )
    _verify_crc(cur, path, ShardFormatError, ShardChecksumError)
    return records


@dataclasses.dataclass
class Checkpoint:
    """A loaded checkpoint: training step, run config, tensors, normalizer."""

    step: int
    config: dict
    tensors: dict
    normalizer: NormalizerStats | None = None


def save_checkpoint(path, *, step: int, config: dict, tensors, normalizer=None) -> None:
    """Write tensors plus config to a checkpoint file.

    Tensor dtypes are preserved (float32 or float64) so reloading is
    bitwise. Names starting with "norm." are reserved for the normalizer.
    """
    entries = dict(tensors)
    for name in entries:
        if name.startswith(_NORM_PREFIX):
            raise ValueError(f"tensor name {name!r} collides with the normalizer prefix")
    config = dict(config)
    if normalizer is not None:
        config["normalizer"] = {
            "kind": normalizer.kind,
            "epsilon": normalizer.epsilon,
            "l2_after": normalizer.l2_after,
        }
        entries[_NORM_PREFIX + "mean"] = normalizer.mean
        entries[_NORM_PREFIX + "scale"] = normalizer.scale
    else:
        config["normalizer"] = None

    body = bytearray(struct.pack("<Q", step))
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(blob))
    body += blob
    body += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.asarray(entries[name])
        if arr.dtype == np.float32:
            dtype_byte, code = 0, "<f4"
        else:
            arr = arr.astype(np.float64, copy=False)
            dtype_byte, code = 1, "<f8"
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        body += struct.pack("<H", len(name_bytes))
        body += name_bytes
        body += struct.pack("<BB", dtype_byte, arr.ndim)
        for dim in arr.shape:
            body += struct.pack("<I", dim)
        body += arr.astype(code).tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint; any corruption raises CheckpointError."""
    cur = _read_file(
        path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CheckpointError, CheckpointError
    )
    (step,) = cur.unpack("<Q")
    (blob_len,) = cur.unpack("<I")
    try:
        config = json.loads(cur.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad config blob: {exc}") from None
    (count,) = cur.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = cur.unpack("<H")
        try:
            name = cur.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: undecodable tensor name: {exc}") from None
        dtype_byte, ndim = cur.unpack("<BB")
        if dtype_byte not in (0, 1):
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {dtype_byte}")
        shape = tuple(cur.unpack("<" + "I" * ndim)) if ndim else ()
        code = "<f4" if dtype_byte == 0 else "<f8"
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(cur.take(size * (4 if dtype_byte == 0 else 8)), dtype=code)
        tensors[name] = arr.reshape(shape).copy()
    _verify_crc(cur, path, CheckpointError, CheckpointError)

    normalizer = None
    norm_cfg = config.get("normalizer")
    if norm_cfg is not None:
        try:
            normalizer = NormalizerStats(
                kind=norm_cfg["kind"],
                mean=tensors.pop(_NORM_PREFIX + "mean"),
                scale=tensors.pop(_NORM_PREFIX + "scale"),
                epsilon=float(norm_cfg["epsilon"]),
                l2_after=bool(norm_cfg["l2_after"]),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad normalizer block: {exc}") from None
    return Checkpoint(step=step, config=config, tensors=tensors, normalizer=normalizer)


def batch_indices(count: int, batch_size: int, seed: int, epoch: int):
    """Shuffled minibatch index arrays for one epoch.

    A pure function of (seed, epoch): the same pair always yields the same
    batches, which is what makes interrupted training resumable. The final
    batch may be short.
    """
    if count < 1:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield perm[start : start + batch_size]


@dataclasses.dataclass
class SynthConfig:
    """Knobs for the synthetic two-layer dataset generator."""

    num_verticals: int = 25
    num_entities: int = 200
    max_parents: int = 3
    dim: int = 64
    audio_dim: int = 0
    mean_entities_per_video: float = 1.8
    noise_std: float = 0.1
    prototype_scale: float = 1.0
    num_train: int = 20000
    num_val: int = 2000
    seed: int = 0

    def validate(self) -> None:
        if self.num_verticals < 1 or self.num_entities < 1:
            raise ValueError("need at least one vertical and one entity")
        if not (1 <= self.max_parents <= 3):
            raise ValueError(f"max_parents must be 1..3, got {self.max_parents}")
        if self.max_parents > self.num_verticals:
            raise ValueError("max_parents cannot exceed the vertical count")
        if self.dim < 1 or self.audio_dim < 0:
            raise ValueError("bad feature dimensions")
        if self.mean_entities_per_video < 1.0:
            raise ValueError("mean entities per video must be at least 1")
        if self.noise_std < 0 or self.prototype_scale <= 0:
            raise ValueError("bad noise or prototype scale")
        if self.num_train < 1 or self.num_val < 0:
            raise ValueError("bad video counts")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def _poisson_rate_for_mean(target: float) -> float:
    """Rate lambda such that E[max(1, Poisson(lambda))] equals target.

    The clamp at 1 lifts the mean to lambda + exp(-lambda), so solve that
    for the requested mean by bisection (the function is increasing).
    """
    if target <= 1.0:
        return 0.0
    lo, hi = 0.0, target
    for _ in range(200):
        mid = (lo + hi) / 2.0
        if mid + math.exp(-mid) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def synth_generate(cfg: SynthConfig):
    """Deterministic synthetic dataset: (hierarchy, train records, val records).

    Entities get Gaussian prototype vectors; each video samples a clamped
    Poisson count of distinct entities, averages their prototypes, and adds
    Gaussian noise. Vertical labels are exactly the union of the sampled
    entities' parents, so the hierarchy invariant holds by construction.
    One RNG stream drives everything: edges, prototypes, then per-video
    draws (count, entities, rgb noise, audio noise) for train then val.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    vw = max(1, len(str(cfg.num_verticals - 1)))
    ew = max(1, len(str(cfg.num_entities - 1)))
    verticals = ConceptLayer(
        "verticals", tuple(f"vertical_{i:0{vw}d}" for i in range(cfg.num_verticals))
    )
    entities = ConceptLayer(
        "entities", tuple(f"entity_{i:0{ew}d}" for i in range(cfg.num_entities))
    )
    edges = {}
    for ent in range(cfg.num_entities):
        k = int(rng.integers(1, cfg.max_parents + 1))
        parents = rng.choice(cfg.num_verticals, size=k, replace=False)
        edges[ent] = tuple(sorted(int(p) for p in parents))
    hierarchy = LabelHierarchy((verticals, entities), edges)

    protos = rng.normal(0.0, cfg.prototype_scale, (cfg.num_entities, cfg.dim)).astype(
        np.float32
    )
    audio_protos = None
    if cfg.audio_dim:
        audio_protos = rng.normal(
            0.0, cfg.prototype_scale, (cfg.num_entities, cfg.audio_dim)
        ).astype(np.float32)

    lam = _poisson_rate_for_mean(cfg.mean_entities_per_video)

    def make_split(prefix: str, count: int) -> list:
        width = max(1, len(str(max(count - 1, 0))))
        records = []
        for i in range(count):
            k = 1 if lam == 0.0 else max(1, int(rng.poisson(lam)))
            k = min(k, cfg.num_entities)
            ents = np.sort(rng.choice(cfg.num_entities, size=k, replace=False))
            feat = protos[ents].mean(axis=0) + rng.normal(0.0, cfg.noise_std, cfg.dim)
            audio = None
            if audio_protos is not None:
                audio = (
                    audio_protos[ents].mean(axis=0)
                    + rng.normal(0.0, cfg.noise_std, cfg.audio_dim)
                ).astype(np.float32)
            vert = np.sort(np.fromiter(hierarchy.induce_vertical_labels(ents), dtype=np.int64))
            records.append(
                VideoRecord(
                    f"{prefix}_{i:0{width}d}",
                    [vert, ents],
                    pooled=feat.astype(np.float32),
                    audio=audio,
                )
            )
        return records

    train = make_split("train", cfg.num_train)
    val = make_split("val", cfg.num_val)
    return hierarchy, train, val
