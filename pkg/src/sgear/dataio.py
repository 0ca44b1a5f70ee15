"""Dataset manifests, binary feature/prototype files and synthetic data.

Binary formats (little-endian throughout):

* Feature file: magic ``SGFT``, u32 version (=1), u32 T, u32 tokens, u32 d,
  then T*tokens*d IEEE-754 float32 values in (t, token, channel) row-major
  order.
* Prototype file: magic ``SGLP``, u32 version (=1), u32 K, u32 d, then K*d
  float32 values row-major.

Manifests are line-delimited JSON: a header line
``{"format": "sgear-manifest", "version": 1, ...}`` followed by one record
per line. This keeps large datasets streamable and diffable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

FEATURE_MAGIC = b"SGFT"
PROTO_MAGIC = b"SGLP"
MANIFEST_FORMAT = "sgear-manifest"


# -- record types ---------------------------------------------------------------

@dataclass
class SegmentRecord:
    clip_id: str
    feature_path: str
    start_time: float          # action start tau_s, seconds
    target_class: int
    labels: list = field(default_factory=list)  # [(time_sec, class), ...]

    def validate(self, num_classes):
        if self.start_time < 0:
            raise DataError(f"{self.clip_id}: start_time must be >= 0")
        if not 0 <= self.target_class < num_classes:
            raise DataError(f"{self.clip_id}: target class {self.target_class} "
                            f"out of range for K={num_classes}")
        for t, c in self.labels:
            if t >= self.start_time:
                raise DataError(f"{self.clip_id}: past label at {t} not before "
                                f"start_time {self.start_time}")
            if not 0 <= c < num_classes:
                raise DataError(f"{self.clip_id}: label class {c} out of range")


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list
    tau_o: float
    tau_a: float
    fps: float
    records: list = field(default_factory=list)

    @property
    def frames_per_clip(self):
        return int(round(self.tau_o * self.fps))

    def validate(self):
        if len(self.class_names) != self.num_classes:
            raise DataError("class_names length does not match class count")
        if len(set(self.class_names)) != self.num_classes:
            raise DataError("class_names must be unique")
        if self.frames_per_clip < 1:
            raise DataError("tau_o * fps must round to at least one frame")
        for rec in self.records:
            rec.validate(self.num_classes)


def write_manifest(path, manifest: DatasetManifest):
    manifest.validate()
    header = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "K": manifest.num_classes,
        "class_names": manifest.class_names,
        "tau_o": manifest.tau_o,
        "tau_a": manifest.tau_a,
        "fps": manifest.fps,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps({
                "clip_id": rec.clip_id,
                "feature_path": rec.feature_path,
                "start_time": rec.start_time,
                "target": rec.target_class,
                "labels": rec.labels,
            }) + "\n")


def read_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} file")
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported manifest version {header.get('version')}")
    records = []
    for ln in lines[1:]:
        obj = json.loads(ln)
        records.append(SegmentRecord(
            clip_id=obj["clip_id"],
            feature_path=obj["feature_path"],
            start_time=obj["start_time"],
            target_class=obj["target"],
            labels=[tuple(lbl) for lbl in obj.get("labels", [])],
        ))
    manifest = DatasetManifest(
        num_classes=header["K"],
        class_names=header["class_names"],
        tau_o=header["tau_o"],
        tau_a=header["tau_a"],
        fps=header["fps"],
        records=records,
    )
    manifest.validate()
    return manifest


# -- binary files --------------------------------------------------------------

def _read_exact(fh, n, offset, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset=offset)
    return buf


def write_feature_file(path, features: np.ndarray):
    """features: (T, tokens, d) array; stored as float32."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 3:
        raise DataError(f"feature payload must be 3-d, got shape {arr.shape}")
    t, tokens, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IIII", 1, t, tokens, d))
        fh.write(arr.tobytes())


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, 0, "magic")
        if magic != FEATURE_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}",
                              offset=0)
        version, t, tokens, d = struct.unpack("<IIII", _read_exact(fh, 16, 4, "header"))
        if version != 1:
            raise FormatError(f"unsupported feature-file version {version}", offset=4)
        count = t * tokens * d
        payload = _read_exact(fh, count * 4, 20, f"{count} float32 values")
        if fh.read(1):
            raise FormatError("trailing bytes after payload", offset=20 + count * 4)
    return np.frombuffer(payload, dtype="<f4").reshape(t, tokens, d)


def write_prototype_file(path, protos: np.ndarray):
    """protos: (K, d) array; stored as float32."""
    arr = np.ascontiguousarray(protos, dtype="<f4")
    if arr.ndim != 2:
        raise DataError(f"prototype payload must be 2-d, got shape {arr.shape}")
    k, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(PROTO_MAGIC)
        fh.write(struct.pack("<III", 1, k, d))
        fh.write(arr.tobytes())


def read_prototype_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, 0, "magic")
        if magic != PROTO_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {PROTO_MAGIC!r}",
                              offset=0)
        version, k, d = struct.unpack("<III", _read_exact(fh, 12, 4, "header"))
        if version != 1:
            raise FormatError(f"unsupported prototype-file version {version}", offset=4)
        payload = _read_exact(fh, k * d * 4, 16, f"{k * d} float32 values")
        if fh.read(1):
            raise FormatError("trailing bytes after payload", offset=16 + k * d * 4)
    return np.frombuffer(payload, dtype="<f4").reshape(k, d)


# -- observation windows ------------------------------------------------------------

def sample_observation_window(tau_s, tau_o, tau_a, fps):
    """Frame times for the window [tau_s-(tau_o+tau_a), tau_s-tau_a).

    T = round(tau_o*fps) left-aligned uniform samples. Windows underflowing
    time 0 are clamped to 0, duplicating the earliest frame.
    """
    t_count = int(round(tau_o * fps))
    if t_count < 1:
        raise ConfigError("tau_o * fps must round to at least one frame")
    start = tau_s - tau_a - tau_o
    times = [start + i / fps for i in range(t_count)]
    return [max(0.0, t) for t in times]


# -- synthetic task -------------------------------------------------------------

def markov_sequence(co_graph, length, rng, start=None):
    """Draw an action sequence from the row-stochastic transition matrix."""
    k = co_graph.shape[0]
    seq = [int(rng.integers(k)) if start is None else int(start)]
    for _ in range(length - 1):
        seq.append(int(rng.choice(k, p=co_graph[seq[-1]])))
    return seq


def language_prototypes_from_cooccurrence(co_graph, d):
    """Unit prototypes whose pairwise cosine grows with symmetrized co-occurrence.

    Construction: take A = (C + C^T)/2, shift its diagonal until positive
    semidefinite, factor the Gram matrix through its eigendecomposition and
    keep the top-d coordinates, then row-normalize. With K <= d the Gram is
    represented exactly, so cos(rho[i], rho[j]) is monotone in A[i][j].
    """
    a = 0.5 * (co_graph + co_graph.T)
    vals, vecs = np.linalg.eigh(a)
    shift = max(0.0, -vals.min()) + 0.05
    vals = vals + shift
    emb = vecs * np.sqrt(vals)          # rows: Gram factor of A + shift*I
    k = a.shape[0]
    if k > d:
        order = np.argsort(vals)[::-1][:d]
        emb = emb[:, order]
    out = np.zeros((k, d))
    out[:, :emb.shape[1]] = emb
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out


def generate_synthetic_dataset(out_dir, num_classes, frames, d, n_clips, co_graph,
                               seed, tokens=1, noise=0.25, class_names=None):
    """Write a complete synthetic dataset under `out_dir`.

    Action sequences follow a Markov chain over `co_graph`; every frame's
    tokens are class-conditioned Gaussians (per-class mean, sigma=`noise`)
    so classes are linearly separable. Deterministic for a fixed seed.

    Returns (manifest_path, prototype_path).
    """
    co_graph = np.asarray(co_graph, dtype=np.float64)
    if num_classes < 2:
        raise ConfigError("need at least 2 classes")
    if co_graph.shape != (num_classes, num_classes):
        raise DataError(f"co_graph shape {co_graph.shape} does not match "
                        f"K={num_classes}")
    row_sums = co_graph.sum(axis=1)
    bad = np.where(np.abs(row_sums - 1.0) > 1e-6)[0]
    if bad.size:
        raise DataError(f"co_graph row {bad[0]} sums to {row_sums[bad[0]]:.6f}, "
                        "expected 1")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    class_means = rng.normal(0.0, 1.0, (num_classes, d))
    if class_names is None:
        class_names = [f"action_{i:03d}" for i in range(num_classes)]

    tau_a = 1.0
    fps = 1.0
    tau_o = float(frames)
    records = []
    for ci in range(n_clips):
        seq = markov_sequence(co_graph, frames + 1, rng)
        feats = np.empty((frames, tokens, d), dtype=np.float32)
        for t in range(frames):
            feats[t] = (class_means[seq[t]]
                        + rng.normal(0.0, noise, (tokens, d)))
        clip_id = f"clip_{ci:05d}"
        fpath = out_dir / f"{clip_id}.sgft"
        write_feature_file(fpath, feats)
        tau_s = tau_o + tau_a
        times = sample_observation_window(tau_s, tau_o, tau_a, fps)
        records.append(SegmentRecord(
            clip_id=clip_id,
            feature_path=fpath.name,
            start_time=tau_s,
            target_class=seq[frames],
            labels=[(times[t], seq[t]) for t in range(frames)],
        ))

    manifest = DatasetManifest(num_classes=num_classes, class_names=class_names,
                               tau_o=tau_o, tau_a=tau_a, fps=fps, records=records)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, manifest)

    proto_path = out_dir / "language_prototypes.sglp"
    write_prototype_file(
        proto_path, language_prototypes_from_cooccurrence(co_graph, d))
    return manifest_path, proto_path


def load_clip_features(manifest_path, record: SegmentRecord) -> np.ndarray:
    """Resolve a record's feature file relative to its manifest and read it."""
    base = Path(manifest_path).parent
    path = Path(record.feature_path)
    if not path.is_absolute():
        path = base / path
    return read_feature_file(path)
