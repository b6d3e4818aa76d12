"""Feature ingestion and the frame pipeline.

Features arrive precomputed (or synthetic): this module normalizes them
with corpus-level mean/variance statistics, stacks consecutive frames,
subsamples, groups utterances into padded batches, and round-trips
corpora through a simple binary feature file plus a JSONL manifest.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

MAGIC = b"SMFE"
FORMAT_VERSION = 1
VARIANCE_FLOOR = 1e-8


@dataclass
class Utterance:
    """One utterance: float32 feature frames and its label sequence."""
    id: str
    features: np.ndarray  # (frames, dim) float32
    labels: np.ndarray  # (n_labels,) int64, blank never included

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError(
                f"features must be (frames, dim), got {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError(f"utterance {self.id!r} has non-finite features")
        if self.labels.ndim != 1 or (self.labels.size and self.labels.min() < 0):
            raise ContractError(
                f"utterance {self.id!r} labels must be nonnegative ints")

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Batch:
    """Padded utterance group. Padding frames are zero; every consumer uses
    feature_lengths to exclude them."""
    ids: list[str]
    features: np.ndarray  # (B, Tmax, dim) float64, zero-padded
    feature_lengths: np.ndarray  # (B,)
    labels: list[np.ndarray]
    label_lengths: np.ndarray  # (B,)

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ContractError(f"batch features must be (B, Tmax, dim), "
                                f"got {self.features.shape}")
        if self.feature_lengths.max(initial=0) > self.features.shape[1]:
            raise ContractError("feature length exceeds padded extent")

    @property
    def size(self) -> int:
        return len(self.ids)

    def utterance_features(self, i: int) -> np.ndarray:
        return self.features[i, :self.feature_lengths[i]]


def stack_subsample(features: np.ndarray, stack: int = 8,
                    rate: int = 3) -> np.ndarray:
    """Stack consecutive frames and subsample.

    Output frame t gathers input frames [rate*t, rate*t + stack), flattened
    in time order, with zeros past the end of the utterance. The output has
    ceil(T / rate) frames of width dim * stack.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"need (T>=1, dim) features, got {x.shape}")
    if stack < 1 or rate < 1:
        raise ContractError(f"stack and rate must be >= 1, got {stack}, {rate}")
    t, dim = x.shape
    t_out = -(-t // rate)
    padded = np.zeros((rate * (t_out - 1) + stack, dim))
    padded[:t] = x
    return np.stack([padded[rate * i:rate * i + stack].reshape(-1)
                     for i in range(t_out)])


@dataclass
class CmvnStats:
    """Per-coordinate corpus mean and (population) variance."""
    mean: np.ndarray
    var: np.ndarray


def cmvn_fit(corpus: list[Utterance]) -> CmvnStats:
    """Pool all frames of the corpus into per-coordinate mean/variance."""
    if not corpus:
        raise ContractError("cmvn_fit needs a non-empty corpus")
    total = sum(u.frames for u in corpus)
    if total == 0:
        raise ContractError("cmvn_fit needs at least one frame")
    dim = corpus[0].dim
    s1 = np.zeros(dim)
    s2 = np.zeros(dim)
    for u in corpus:
        x = u.features.astype(np.float64)
        s1 += x.sum(axis=0)
        s2 += (x * x).sum(axis=0)
    mean = s1 / total
    var = s2 / total - mean * mean
    return CmvnStats(mean=mean, var=np.maximum(var, 0.0))


def cmvn_apply(features: np.ndarray, stats: CmvnStats) -> np.ndarray:
    """Standardize frames; variances below the floor wash out to zeros."""
    x = np.asarray(features, dtype=np.float64)
    return (x - stats.mean) / np.sqrt(np.maximum(stats.var, VARIANCE_FLOOR))


def pipeline_features(features: np.ndarray, stats: CmvnStats,
                      stack: int = 8, rate: int = 3) -> np.ndarray:
    """Normalize raw frames, then stack and subsample them."""
    return stack_subsample(cmvn_apply(features, stats), stack, rate)


@dataclass
class SynthSpec:
    """Recipe for a synthetic Gaussian-cluster corpus.

    Each utterance is a run of segments; segment frames are drawn from the
    segment's cluster Gaussian and the target is the cluster-id sequence.
    Adjacent segments use distinct clusters so targets stay recoverable
    from the features. Cluster ids double as labels, so clusters must fit
    below the blank at vocab - 1.
    """
    clusters: int = 2
    vocab: int = 8
    utterances: int = 50
    min_frames: int = 24
    max_frames: int = 72
    feature_dim: int = 16
    max_segments: int = 3
    separation: float = 3.0
    noise: float = 0.5
    anisotropy: float = 1.0  # ratio of largest to smallest noise axis
    seed: int = 0
    min_segment_frames: int = 8

    def __post_init__(self):
        if self.clusters < 1:
            raise ContractError("need at least one cluster")
        if self.clusters > self.vocab - 1:
            raise ContractError(
                f"{self.clusters} clusters do not fit below the blank "
                f"in a vocab of {self.vocab}")
        if self.min_frames < self.min_segment_frames:
            raise ContractError("min_frames below one segment's minimum")
        if self.anisotropy < 1.0:
            raise ContractError("anisotropy is a >= 1 axis ratio")


def synth_corpus(spec: SynthSpec) -> list[Utterance]:
    """Generate the corpus described by spec, deterministically per seed.

    Each cluster is one Gaussian: a mean scaled by ``separation`` and, when
    ``anisotropy`` exceeds 1, a full covariance whose axis scales spread
    log-uniformly over that ratio around ``noise`` in randomly rotated
    directions.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(size=(spec.clusters, spec.feature_dim)) * spec.separation
    chols = []
    for _ in range(spec.clusters):
        if spec.anisotropy == 1.0:
            chols.append(None)  # isotropic: scale samples by noise directly
            continue
        q, r = np.linalg.qr(rng.normal(size=(spec.feature_dim,
                                             spec.feature_dim)))
        q = q * np.sign(np.diag(r))
        half = 0.5 * np.log(spec.anisotropy)
        scales = np.exp(rng.uniform(-half, half, size=spec.feature_dim))
        chols.append(q * (spec.noise * scales))
    corpus = []
    for i in range(spec.utterances):
        total = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        seg_cap = max(1, total // spec.min_segment_frames)
        n_seg = int(rng.integers(1, min(spec.max_segments, seg_cap) + 1))
        labels = np.empty(n_seg, dtype=np.int64)
        labels[0] = rng.integers(spec.clusters)
        for j in range(1, n_seg):
            if spec.clusters == 1:
                labels[j] = 0
            else:
                step = rng.integers(1, spec.clusters)
                labels[j] = (labels[j - 1] + step) % spec.clusters
        extra = rng.multinomial(total - n_seg * spec.min_segment_frames,
                                np.full(n_seg, 1.0 / n_seg))
        lengths = spec.min_segment_frames + extra
        pieces = []
        for j in range(n_seg):
            z = rng.normal(size=(lengths[j], spec.feature_dim))
            chol = chols[labels[j]]
            noise = z * spec.noise if chol is None else z @ chol.T
            pieces.append(means[labels[j]] + noise)
        frames = np.concatenate(pieces)
        corpus.append(Utterance(id=f"utt{i:05d}",
                                features=frames.astype(np.float32),
                                labels=labels))
    return corpus


def write_features(corpus: list[Utterance], path: str) -> list[int]:
    """Serialize the corpus; returns each utterance's byte offset."""
    offsets = []
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(corpus)))
        for u in corpus:
            offsets.append(f.tell())
            ident = u.id.encode("utf-8")
            if len(ident) > 0xFFFF:
                raise ContractError(f"utterance id too long: {u.id!r}")
            f.write(struct.pack("<H", len(ident)))
            f.write(ident)
            f.write(struct.pack("<II", u.frames, u.dim))
            f.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
            f.write(struct.pack("<I", len(u.labels)))
            f.write(np.ascontiguousarray(u.labels, dtype="<u4").tobytes())
    return offsets


def _need(buf: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(buf):
        raise FormatError(
            f"truncated feature file: {what} needs {count} bytes but only "
            f"{len(buf) - offset} remain", offset=offset)
    return offset + count


def read_features(path: str) -> list[Utterance]:
    """Parse a feature file back into a corpus.

    Raises FormatError, carrying the byte offset, on a bad magic, an
    unsupported version, truncation, or non-finite feature values.
    """
    with open(path, "rb") as f:
        buf = f.read()
    off = _need(buf, 0, 12, "header")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}",
                          offset=0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    corpus = []
    for _ in range(count):
        start = off
        off = _need(buf, off, 2, "id length")
        (id_len,) = struct.unpack_from("<H", buf, start)
        off = _need(buf, off, id_len, "utterance id")
        ident = buf[off - id_len:off].decode("utf-8")
        off = _need(buf, off, 8, "frame header")
        frames, dim = struct.unpack_from("<II", buf, off - 8)
        feat_off = off
        off = _need(buf, off, 4 * frames * dim, "feature block")
        feats = np.frombuffer(buf, dtype="<f4", count=frames * dim,
                              offset=feat_off).reshape(frames, dim)
        if not np.all(np.isfinite(feats)):
            raise FormatError(
                f"non-finite feature values in utterance {ident!r}",
                offset=feat_off)
        off = _need(buf, off, 4, "label count")
        (n_labels,) = struct.unpack_from("<I", buf, off - 4)
        off = _need(buf, off, 4 * n_labels, "label block")
        labels = np.frombuffer(buf, dtype="<u4", count=n_labels,
                               offset=off - 4 * n_labels).astype(np.int64)
        corpus.append(Utterance(id=ident, features=feats.copy(),
                                labels=labels))
    if off != len(buf):
        raise FormatError(
            f"{len(buf) - off} trailing bytes after the last utterance",
            offset=off)
    return corpus


def write_manifest(corpus: list[Utterance], feature_path: str,
                   offsets: list[int], manifest_path: str) -> None:
    """One JSON object per utterance: {id, path, offset}."""
    with open(manifest_path, "w", encoding="utf-8") as f:
        for u, offset in zip(corpus, offsets):
            f.write(json.dumps({"id": u.id, "path": feature_path,
                                "offset": offset}) + "\n")


def read_manifest(manifest_path: str) -> list[dict]:
    entries = []
    with open(manifest_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(
                    f"manifest line {line_no} is not JSON: {e}",
                    offset=0) from e
            for key in ("id", "path", "offset"):
                if key not in entry:
                    raise FormatError(
                        f"manifest line {line_no} missing field {key!r}",
                        offset=0)
            entries.append(entry)
    return entries


def make_batches(corpus: list[Utterance], stats: CmvnStats,
                 frames_budget: int = 2048, stack: int = 8,
                 rate: int = 3) -> list[Batch]:
    """Run the feature pipeline and group utterances into padded batches.

    Utterances are sorted by pipelined length so batch padding stays small,
    then packed greedily while B * Tmax fits the frame budget.
    """
    if not corpus:
        raise ContractError("make_batches needs a non-empty corpus")
    prepared = [(u, pipeline_features(u.features, stats, stack, rate))
                for u in corpus]
    prepared.sort(key=lambda p: (p[1].shape[0], p[0].id))
    batches = []
    group: list = []
    tmax = 0
    for u, x in prepared:
        t = x.shape[0]
        if group and (len(group) + 1) * max(tmax, t) > frames_budget:
            batches.append(_pack(group))
            group, tmax = [], 0
        group.append((u, x))
        tmax = max(tmax, t)
    if group:
        batches.append(_pack(group))
    return batches


def _pack(group: list) -> Batch:
    tmax = max(x.shape[0] for _, x in group)
    dim = group[0][1].shape[1]
    feats = np.zeros((len(group), tmax, dim))
    for i, (_, x) in enumerate(group):
        feats[i, :x.shape[0]] = x
    return Batch(ids=[u.id for u, _ in group],
                 features=feats,
                 feature_lengths=np.array([x.shape[0] for _, x in group]),
                 labels=[u.labels.copy() for u, _ in group],
                 label_lengths=np.array([u.labels.size for u, _ in group]))
