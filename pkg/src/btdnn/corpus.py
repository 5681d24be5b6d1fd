"""Synthetic corpora: Gaussian emissions over a label alphabet, geometric
segment durations, deterministic splits, and an add-1 bigram over the
training transcripts.

Label 0 is reserved for the sentence start; alignments use labels
``1..num_labels`` and the model output dimension is ``num_labels + 1``.

Container format (one file per split, little-endian):
``magic "BCRP" | u8 version | u8 hash_len | spec hash | u32 count`` then per
utterance ``u16 id_len | id utf-8 | u32 T | u32 F | T*F float32 features |
T uint16 alignment``.  Features are stored in 32-bit and widened to 64-bit
on load.  The bigram is a text file with one ``prev next logprob`` line per
transition (prev 0 = sentence start).
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"BCRP"
_VERSION = 1


@dataclass(frozen=True)
class DomainShift:
    """Affine feature transform plus a duration scale for the target domain."""

    transform: np.ndarray   # (F, F)
    offset: np.ndarray      # (F,)
    duration_scale: float = 1.0

    @staticmethod
    def identity(feat_dim):
        return DomainShift(np.eye(feat_dim), np.zeros(feat_dim), 1.0)


@dataclass(frozen=True)
class CorpusSpec:
    num_labels: int
    feat_dim: int
    means: np.ndarray            # (L, F) emission means, label l at row l-1
    covs: np.ndarray             # (L, F, F)
    duration_means: np.ndarray   # (L,) mean segment length per label
    num_utterances: int = 200
    utt_frames: tuple = (8, 16)  # uniform target length range, inclusive
    seed: int = 0
    domain_shift: DomainShift | None = None

    def __post_init__(self):
        if self.num_labels < 2:
            raise DataError("need at least 2 labels")
        if self.means.shape != (self.num_labels, self.feat_dim):
            raise DataError(f"means shape {self.means.shape} disagrees with "
                            f"({self.num_labels}, {self.feat_dim})")
        if self.covs.shape != (self.num_labels, self.feat_dim, self.feat_dim):
            raise DataError("covariance tensor has the wrong shape")
        eig = np.linalg.eigvalsh(self.covs)
        if eig.min() < 1e-3:
            raise DataError(f"emission covariances are ill-conditioned "
                            f"(min eigenvalue {eig.min():.2e})")
        if np.any(self.duration_means < 1.0):
            raise DataError("duration means must be >= 1 frame")
        if self.utt_frames[0] < 1 or self.utt_frames[1] < self.utt_frames[0]:
            raise DataError(f"bad utterance length range {self.utt_frames}")

    @staticmethod
    def toy(num_labels=3, feat_dim=5, separation=3.0, mean_duration=3.0,
            num_utterances=200, utt_frames=(8, 16), seed=0,
            domain_shift=None):
        """Random unit-covariance emissions with means ``separation`` apart
        in expectation; the knob that controls class overlap."""
        rng = np.random.default_rng([seed, 99])
        dirs = rng.standard_normal((num_labels, feat_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = separation * dirs
        covs = np.tile(np.eye(feat_dim), (num_labels, 1, 1))
        return CorpusSpec(num_labels=num_labels, feat_dim=feat_dim,
                          means=means, covs=covs,
                          duration_means=np.full(num_labels, mean_duration),
                          num_utterances=num_utterances,
                          utt_frames=utt_frames, seed=seed,
                          domain_shift=domain_shift)

    def with_shift(self, shift):
        return replace(self, domain_shift=shift)

    def content_hash(self):
        blob = {
            "num_labels": self.num_labels,
            "feat_dim": self.feat_dim,
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "duration_means": self.duration_means.tolist(),
            "num_utterances": self.num_utterances,
            "utt_frames": list(self.utt_frames),
            "seed": self.seed,
            "shift": (None if self.domain_shift is None else {
                "transform": self.domain_shift.transform.tolist(),
                "offset": self.domain_shift.offset.tolist(),
                "duration_scale": self.domain_shift.duration_scale,
            }),
        }
        raw = json.dumps(blob, sort_keys=True).encode()
        return hashlib.blake2b(raw, digest_size=8).hexdigest()


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray      # (T, F) float64 in memory
    alignment: np.ndarray     # (T,) labels in 1..L
    transcript: tuple

    @property
    def num_frames(self):
        return self.features.shape[0]


def run_length_collapse(labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        return ()
    keep = np.ones(labels.size, dtype=bool)
    keep[1:] = labels[1:] != labels[:-1]
    return tuple(int(x) for x in labels[keep])


def _sample_utterance(spec, rng):
    target = int(rng.integers(spec.utt_frames[0], spec.utt_frames[1] + 1))
    shift = spec.domain_shift
    dur_scale = shift.duration_scale if shift is not None else 1.0
    frames, labels = [], []
    prev = 0
    while len(labels) < target:
        lab = int(rng.integers(1, spec.num_labels + 1))
        if lab == prev:
            lab = lab % spec.num_labels + 1
        mean_dur = max(1.0, spec.duration_means[lab - 1] * dur_scale)
        dur = int(rng.geometric(1.0 / mean_dur))
        dur = min(dur, target - len(labels))
        x = rng.multivariate_normal(spec.means[lab - 1], spec.covs[lab - 1],
                                    size=dur)
        frames.append(x)
        labels.extend([lab] * dur)
        prev = lab
    feats = np.concatenate(frames, axis=0)[:target]
    labels = np.array(labels[:target], dtype=np.int64)
    if shift is not None:
        feats = feats @ shift.transform.T + shift.offset
    return feats.astype(np.float32), labels


def _split_of(utt_id, seed):
    digest = hashlib.blake2b(f"{seed}:{utt_id}".encode(),
                             digest_size=8).digest()
    bucket = int.from_bytes(digest, "little") % 10
    return "train" if bucket < 8 else ("dev" if bucket == 8 else "test")


def estimate_bigram(utterances, num_labels):
    """Add-1 smoothed transcript bigram, rows 0..L over successors 1..L in
    the log domain (row 0 is the sentence start)."""
    counts = np.ones((num_labels + 1, num_labels + 1))
    counts[:, 0] = 0.0
    for utt in utterances:
        prev = 0
        for lab in utt.transcript:
            counts[prev, lab] += 1.0
            prev = lab
    table = np.full((num_labels + 1, num_labels + 1), -np.inf)
    table[:, 1:] = np.log(counts[:, 1:] / counts[:, 1:].sum(axis=1,
                                                            keepdims=True))
    return table


def generate(spec, out_dir):
    """Write train/dev/test containers plus the bigram file.

    Deterministic given the spec: every utterance derives its own generator
    from (seed, domain, index) and the split is a pure function of
    (utterance id, seed).  Returns the path map.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domain = 0 if spec.domain_shift is None else 1
    tag = "s" if domain == 0 else "t"
    splits = {"train": [], "dev": [], "test": []}
    for idx in range(spec.num_utterances):
        rng = np.random.default_rng([spec.seed, domain, idx])
        feats, labels = _sample_utterance(spec, rng)
        utt = Utterance(utt_id=f"{tag}{idx:06d}",
                        features=feats.astype(np.float64),
                        alignment=labels,
                        transcript=run_length_collapse(labels))
        splits[_split_of(utt.utt_id, spec.seed)].append(utt)
    if not splits["train"]:
        raise DataError("degenerate spec: empty training split")

    paths = {}
    spec_hash = spec.content_hash()
    for name, utts in splits.items():
        path = out_dir / f"{name}.bcorp"
        save_split(path, utts, spec_hash)
        paths[name] = path
    bigram = estimate_bigram(splits["train"], spec.num_labels)
    paths["bigram"] = out_dir / "bigram.txt"
    save_bigram(paths["bigram"], bigram)
    return paths


def save_split(path, utterances, spec_hash=""):
    hash_bytes = spec_hash.encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", _VERSION, len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(utterances)))
        for utt in utterances:
            ident = utt.utt_id.encode()
            T, F = utt.features.shape
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<II", T, F))
            fh.write(utt.features.astype("<f4").tobytes())
            fh.write(utt.alignment.astype("<u2").tobytes())


def load_split(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != _MAGIC:
        raise DataError(f"bad corpus magic in {path}")
    version, hash_len = struct.unpack_from("<BB", blob, 4)
    if version != _VERSION:
        raise DataError(f"unsupported corpus version {version}")
    off = 6 + hash_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    utts = []
    try:
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            ident = blob[off:off + id_len].decode()
            off += id_len
            T, F = struct.unpack_from("<II", blob, off)
            off += 8
            feats = np.frombuffer(blob, dtype="<f4", count=T * F,
                                  offset=off).reshape(T, F)
            off += 4 * T * F
            align = np.frombuffer(blob, dtype="<u2", count=T, offset=off)
            off += 2 * T
            align = align.astype(np.int64)
            utts.append(Utterance(utt_id=ident,
                                  features=feats.astype(np.float64),
                                  alignment=align,
                                  transcript=run_length_collapse(align)))
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated corpus file {path}: {exc}") from exc
    return utts


def save_bigram(path, table):
    lines = []
    n = table.shape[0]
    for i in range(n):
        for j in range(1, n):
            if table[i, j] > -np.inf:
                lines.append(f"{i} {j} {table[i, j]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_bigram(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"bigram file not found: {path}")
    entries = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 'prev next logprob'")
        entries.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if not entries:
        raise DataError(f"empty bigram file {path}")
    n = max(max(i, j) for i, j, _ in entries) + 1
    table = np.full((n, n), -np.inf)
    for i, j, w in entries:
        table[i, j] = w
    return table
