"""Dataset records, deterministic pseudo features, and synthetic annotation generation.

Everything here is plain numpy and stdlib; model tensors are built downstream.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VIDEO_ENCODER_KINDS = ("clip_v", "slowfast", "blip_v")
TEXT_ENCODER_KINDS = ("clip_t", "blip_t")
ENCODER_KINDS = VIDEO_ENCODER_KINDS + TEXT_ENCODER_KINDS

FEATURE_MAGIC = b"VLFT"


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class Annotation:
    """One (query, video) pair with its moment windows and clip saliency levels."""
    qid: int
    query: str
    vid: str
    duration: float
    relevant_windows: list
    saliency_levels: list
    relevant_clip_ids: list
    clip_len: float = 2.0

    @property
    def num_clips(self):
        return int(math.ceil(self.duration / self.clip_len))

    def validate(self):
        def bad(field_name, msg):
            return ValidationError(f"qid {self.qid}: field '{field_name}' {msg}")

        if not isinstance(self.qid, int) or self.qid < 0:
            raise bad("qid", "must be a non-negative int")
        if not self.query:
            raise bad("query", "must be non-empty")
        if not self.vid:
            raise bad("vid", "must be non-empty")
        if not (self.duration > 0):
            raise bad("duration", "must be positive")
        if not (self.clip_len > 0):
            raise bad("clip_len", "must be positive")
        if not self.relevant_windows:
            raise bad("relevant_windows", "must contain at least one window")
        for w in self.relevant_windows:
            if len(w) != 2:
                raise bad("relevant_windows", f"window {w} is not a [start, end] pair")
            s, e = float(w[0]), float(w[1])
            if not (0.0 <= s < e <= self.duration):
                raise bad("relevant_windows", f"window {w} outside [0, {self.duration}] or empty")
        n = self.num_clips
        if len(self.saliency_levels) != n:
            raise bad("saliency_levels", f"length {len(self.saliency_levels)} != clip count {n}")
        for lv in self.saliency_levels:
            if not isinstance(lv, int) or not (0 <= lv <= 4):
                raise bad("saliency_levels", f"level {lv} outside 0..4")
        expected = clips_overlapping_windows(self.relevant_windows, self.duration, self.clip_len)
        if sorted(self.relevant_clip_ids) != expected:
            raise bad("relevant_clip_ids", f"{sorted(self.relevant_clip_ids)} inconsistent with windows (expected {expected})")
        return self


def clips_overlapping_windows(windows, duration, clip_len):
    """Sorted ids of clips with positive overlap against any window."""
    n = int(math.ceil(duration / clip_len))
    ids = set()
    for s, e in windows:
        first = max(0, int(math.floor(float(s) / clip_len)))
        for i in range(first, n):
            cs, ce = i * clip_len, min((i + 1) * clip_len, duration)
            if cs < float(e) and ce > float(s):
                ids.add(i)
            elif cs >= float(e):
                break
    return sorted(ids)


_ANNOTATION_FIELDS = ("qid", "query", "vid", "duration", "relevant_windows",
                      "saliency_levels", "relevant_clip_ids")


def load_dataset(path, default_clip_len=2.0):
    """Read line-delimited JSON annotations; parse errors carry line numbers."""
    annotations = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({err.msg})") from err
            missing = [f for f in _ANNOTATION_FIELDS if f not in obj]
            if missing:
                raise ParseError(f"{path}:{lineno}: missing fields {missing}")
            ann = Annotation(
                qid=obj["qid"],
                query=obj["query"],
                vid=obj["vid"],
                duration=float(obj["duration"]),
                relevant_windows=[[float(a), float(b)] for a, b in obj["relevant_windows"]],
                saliency_levels=[int(x) for x in obj["saliency_levels"]],
                relevant_clip_ids=[int(x) for x in obj["relevant_clip_ids"]],
                clip_len=float(obj.get("clip_len", default_clip_len)),
            )
            try:
                ann.validate()
            except ValidationError as err:
                raise ValidationError(f"{path}:{lineno}: {err}") from err
            annotations.append(ann)
    return annotations


def save_dataset(annotations, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            obj = {
                "qid": ann.qid,
                "query": ann.query,
                "vid": ann.vid,
                "duration": ann.duration,
                "relevant_windows": ann.relevant_windows,
                "saliency_levels": ann.saliency_levels,
                "relevant_clip_ids": ann.relevant_clip_ids,
                "clip_len": ann.clip_len,
            }
            fh.write(json.dumps(obj) + "\n")


# -- deterministic pseudo encoders -----------------------------------------


def stable_hash(kind, ident):
    """Platform-stable 64-bit hash of an (encoder kind, id) pair."""
    digest = hashlib.blake2b(f"{kind}:{ident}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def pseudo_encode(kind, ident, length, dim):
    """Deterministic stand-in features: value[i][j] = sin(h + i*dim + j) * 0.5."""
    if kind not in ENCODER_KINDS:
        raise ValueError(f"unknown encoder kind '{kind}' (expected one of {ENCODER_KINDS})")
    if length <= 0 or dim <= 0:
        raise ValueError("pseudo_encode needs positive length and dim")
    h = stable_hash(kind, ident) % 1000
    grid = np.arange(length * dim, dtype=np.float64).reshape(length, dim)
    return np.sin(h + grid) * 0.5


def concat_features(parts):
    """Column-concatenate per-encoder feature blocks sharing a row count."""
    if not parts:
        raise ValueError("concat_features needs at least one part")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise ValueError(f"feature part shape {p.shape} does not share row count {rows}")
    return np.concatenate(parts, axis=1)


# -- precomputed feature files ----------------------------------------------


def save_features(path, arr):
    """Write a (L, d) float array as magic + u32 L + u32 d + little-endian f32 rows."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    if a.ndim != 2:
        raise ValueError("feature arrays must be rank-2")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", a.shape[0], a.shape[1], 0))
        fh.write(a.tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (bad magic)")
        length, dim, _reserved = struct.unpack("<III", header[4:])
        payload = fh.read()
    expected = length * dim * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(length, dim).astype(np.float64)


# -- feature assembly --------------------------------------------------------


@dataclass
class FeatureBundle:
    video: np.ndarray       # (L, d_v)
    text: np.ndarray        # (N, d_t)
    video_mask: np.ndarray  # (L,) bool
    text_mask: np.ndarray   # (N,) bool


def text_token_count(query, max_text_len):
    return min(max(1, len(query.split())), max_text_len)


def encode_item(ann, video_parts, text_parts, max_text_len, feature_dir=None):
    """Build the per-item feature bundle from pseudo encoders or feature files.

    Precomputed files, when present under feature_dir, are named
    "<vid>.<kind>.vlft" for video parts and "qid<qid>.<kind>.vlft" for text
    parts; missing files fall back to the pseudo encoder.
    """
    length = ann.num_clips
    vparts = []
    for kind, dim in video_parts:
        arr = _maybe_load(feature_dir, f"{ann.vid}.{kind}.vlft", length, dim)
        if arr is None:
            arr = pseudo_encode(kind, ann.vid, length, dim)
        vparts.append(arr)
    n_tok = text_token_count(ann.query, max_text_len)
    tparts = []
    for kind, dim in text_parts:
        arr = _maybe_load(feature_dir, f"qid{ann.qid}.{kind}.vlft", n_tok, dim)
        if arr is None:
            arr = pseudo_encode(kind, ann.query, n_tok, dim)
        tparts.append(arr)
    return FeatureBundle(
        video=concat_features(vparts),
        text=concat_features(tparts),
        video_mask=np.ones(length, dtype=bool),
        text_mask=np.ones(n_tok, dtype=bool),
    )


def _maybe_load(feature_dir, name, length, dim):
    if feature_dir is None:
        return None
    path = Path(feature_dir) / name
    if not path.exists():
        return None
    arr = load_features(path)
    if arr.shape != (length, dim):
        raise ValueError(f"{path}: shape {arr.shape} does not match expected ({length}, {dim})")
    return arr


# -- synthetic data generation ------------------------------------------------


@dataclass
class SyntheticRecord:
    caption: str
    interval: tuple
    saliency: list = field(default_factory=list)
    flagged: bool = False


def _interval_frames(start, end):
    ticks = np.arange(start + 0.5, end, 1.0)
    if ticks.size == 0:
        return [0.5 * (start + end)]
    return [float(t) for t in ticks]


def generate_synthetic(duration, captioner, embedder, interval_len=10.0):
    """Tile [0, duration] into <= interval_len chunks and score frames against captions.

    The representative frame of each interval (its middle 1 Hz tick) is
    captioned; every frame's saliency is the cosine between the caption
    embedding and the frame embedding. Zero-norm embeddings flag the record
    and contribute saliency 0.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(math.ceil(duration / interval_len))
    records = []
    for i in range(n):
        start = i * interval_len
        end = min((i + 1) * interval_len, duration)
        frames = _interval_frames(start, end)
        caption = captioner(frames[len(frames) // 2])
        cap_vec = np.asarray(embedder(caption), dtype=np.float64)
        saliency = []
        flagged = False
        for t in frames:
            frame_vec = np.asarray(embedder(t), dtype=np.float64)
            denom = np.linalg.norm(cap_vec) * np.linalg.norm(frame_vec)
            if denom == 0.0:
                saliency.append(0.0)
                flagged = True
            else:
                cos = np.dot(cap_vec, frame_vec) / denom
                saliency.append(float(np.clip(cos, -1.0, 1.0)))  # rounding can push |cos| past 1
        records.append(SyntheticRecord(caption=caption, interval=(start, end),
                                       saliency=saliency, flagged=flagged))
    return records


def default_captioner(vid):
    def caption(t):
        return f"scene {vid} around second {int(t)}"
    return caption


def default_embedder(vid, dim=16):
    """Embeds captions by their text and frames by (vid, floor(t)), both via sin-hash."""
    def embed(x):
        if isinstance(x, str):
            return pseudo_encode("clip_t", x, 1, dim)[0]
        return pseudo_encode("clip_v", f"{vid}@{int(math.floor(x))}", 1, dim)[0]
    return embed


def synthetic_level(mean_cosine):
    """Map a [-1, 1] cosine to an integer saliency level 0..4."""
    unit = min(1.0, max(0.0, (mean_cosine + 1.0) * 0.5))
    return int(round(unit * 4.0))


def records_to_annotations(vid, duration, records, clip_len=2.0, qid_start=0):
    """Convert synthetic records into one Annotation per (caption, interval)."""
    n_clips = int(math.ceil(duration / clip_len))
    annotations = []
    for offset, rec in enumerate(records):
        start, end = rec.interval
        frames = _interval_frames(start, end)
        levels = [0] * n_clips
        per_clip = {}
        for t, s in zip(frames, rec.saliency):
            idx = min(int(t // clip_len), n_clips - 1)
            per_clip.setdefault(idx, []).append(s)
        for idx, vals in per_clip.items():
            levels[idx] = synthetic_level(sum(vals) / len(vals))
        window = [float(start), float(end)]
        ann = Annotation(
            qid=qid_start + offset,
            query=rec.caption,
            vid=vid,
            duration=float(duration),
            relevant_windows=[window],
            saliency_levels=levels,
            relevant_clip_ids=clips_overlapping_windows([window], duration, clip_len),
            clip_len=clip_len,
        )
        annotations.append(ann.validate())
    return annotations


def load_manifest(path):
    """Read a jsonl manifest of {vid, duration}; duplicate vids are an error."""
    entries = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({err.msg})") from err
            if "vid" not in obj or "duration" not in obj:
                raise ParseError(f"{path}:{lineno}: manifest rows need vid and duration")
            vid = str(obj["vid"])
            if vid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate vid '{vid}'")
            seen.add(vid)
            entries.append((vid, float(obj["duration"])))
    return entries
