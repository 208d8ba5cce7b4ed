"""Synthetic speaker corpora, crops, trial lists and their file formats.

Frames follow ``x_t = m_s + c_u + n_t``: a speaker mean, a per-utterance
channel offset and AR(1) frame noise. Target-domain frames are further mapped
through an affine shift ``x -> A x + b``. Features are quantized to float32 at
generation time, so a corpus written to disk and read back is identical to the
in-memory one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm
from scipy.signal import lfilter

from .numerics import Rng

DOMAINS = ("source", "target")
CORPUS_MAGIC = b"SVDCORPS"
CORPUS_VERSION = 1


class CorruptFileError(ValueError):
    pass


@dataclass
class Utterance:
    speaker_id: int
    domain: str
    features: np.ndarray  # (T, D) float32

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Corpus:
    utterances: list[Utterance] = field(default_factory=list)
    feature_dim: int = 30

    def __len__(self):
        return len(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def speaker_ids(self) -> np.ndarray:
        return np.array([u.speaker_id for u in self.utterances], dtype=np.int64)

    @property
    def speakers(self) -> list[int]:
        return sorted(set(self.speaker_ids.tolist()))

    def subset(self, indices) -> "Corpus":
        return Corpus([self.utterances[i] for i in indices], self.feature_dim)

    def equals(self, other: "Corpus") -> bool:
        return (self.feature_dim == other.feature_dim and len(self) == len(other) and all(
            a.speaker_id == b.speaker_id and a.domain == b.domain
            and np.array_equal(a.features, b.features)
            for a, b in zip(self.utterances, other.utterances)))


@dataclass
class DomainShift:
    A: np.ndarray
    b: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T + self.b


def make_domain_shift(dim: int, seed: int, rotation: float = np.pi, scale: float = 0.9,
                      bias_norm: float = 1.0) -> DomainShift:
    """A = scale * expm(rotation * K) for a random unit skew-symmetric K; |b| = bias_norm.

    ``rotation`` is the largest principal rotation angle in radians, so pi gives
    a fully random rotation and 0 the identity.
    """
    rng = Rng(seed)
    g = rng.gen.standard_normal((dim, dim))
    k = g - g.T
    k /= np.max(np.abs(np.linalg.eigvals(k))) if dim > 1 else 1.0
    a = scale * expm(rotation * k)
    b = rng.gen.standard_normal(dim)
    b *= bias_norm / np.linalg.norm(b)
    return DomainShift(a, b)


@dataclass
class CorpusSpec:
    n_speakers: int = 200
    utts_per_speaker: int = 20
    feature_dim: int = 30
    long_frames: tuple[int, int] = (300, 800)
    short_frames: tuple[int, int] = (80, 240)
    speaker_spread: float = 1.0
    channel_spread: float = 0.5
    frame_noise: float = 1.0
    ar_coeff: float = 0.5
    domain_shift: DomainShift | None = None
    seed: int = 0
    # per-dimension multipliers of the three spreads; None = isotropic
    speaker_profile: np.ndarray | None = None
    channel_profile: np.ndarray | None = None
    noise_profile: np.ndarray | None = None
    speaker_offset: int = 0  # first speaker id

    def validate(self):
        if self.n_speakers < 1 or self.utts_per_speaker < 1 or self.feature_dim < 1:
            raise ValueError("speaker count, utterances per speaker and feature_dim must be >= 1")
        for name in ("long_frames", "short_frames"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"invalid {name} range {(lo, hi)}")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ValueError(f"ar_coeff must be in [0, 1), got {self.ar_coeff}")
        if min(self.speaker_spread, self.channel_spread, self.frame_noise) < 0:
            raise ValueError("spreads must be nonnegative")
        for name in ("speaker_profile", "channel_profile", "noise_profile"):
            prof = getattr(self, name)
            if prof is not None and np.shape(prof) != (self.feature_dim,):
                raise ValueError(f"{name} must have length feature_dim")
        if self.domain_shift is not None:
            if self.domain_shift.A.shape != (self.feature_dim,) * 2 or \
                    self.domain_shift.b.shape != (self.feature_dim,):
                raise ValueError("domain shift does not match feature_dim")


def _profile(prof, dim):
    return np.ones(dim) if prof is None else np.asarray(prof, dtype=np.float64)


def generate_corpus(spec: CorpusSpec, domain: str = "source") -> Corpus:
    """Deterministic synthetic corpus; every utterance draws from its own sub-stream."""
    spec.validate()
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    d = spec.feature_dim
    rng = Rng(spec.seed)
    lo, hi = spec.long_frames if domain == "source" else spec.short_frames
    spk_scale = spec.speaker_spread * _profile(spec.speaker_profile, d)
    chan_scale = spec.channel_spread * _profile(spec.channel_profile, d)
    noise_scale = spec.frame_noise * _profile(spec.noise_profile, d)
    rho = spec.ar_coeff
    innov = np.sqrt(1.0 - rho * rho)
    shift = spec.domain_shift if domain == "target" else None

    utts = []
    for s in range(spec.n_speakers):
        mean = spk_scale * rng.spawn(0, s).gen.standard_normal(d)
        for j in range(spec.utts_per_speaker):
            urng = rng.spawn(1, s, j)
            t = int(urng.integers(lo, hi + 1))
            chan = chan_scale * urng.gen.standard_normal(d)
            w = urng.gen.standard_normal((t, d))
            w[0] /= innov  # stationary start: n_0 ~ N(0, sigma^2)
            noise = lfilter([innov], [1.0, -rho], w, axis=0) * noise_scale
            x = mean + chan + noise
            if shift is not None:
                x = shift.apply(x)
            utts.append(Utterance(spec.speaker_offset + s, domain, x.astype(np.float32)))
    return Corpus(utts, d)


def split_by_speaker(corpus: Corpus, n_first: int) -> tuple[Corpus, Corpus]:
    """First ``n_first`` speakers (sorted ids) vs the rest; speaker sets are disjoint."""
    first = set(corpus.speakers[:n_first])
    a = [i for i, u in enumerate(corpus.utterances) if u.speaker_id in first]
    b = [i for i, u in enumerate(corpus.utterances) if u.speaker_id not in first]
    return corpus.subset(a), corpus.subset(b)


def crop(utt, frames: int, rng: Rng) -> np.ndarray:
    """Contiguous ``frames``-long slice with a uniform random start."""
    x = utt.features if isinstance(utt, Utterance) else np.asarray(utt)
    t = x.shape[0]
    if frames < 1 or frames > t:
        raise ValueError(f"cannot crop {frames} frames from a {t}-frame utterance")
    start = int(rng.integers(0, t - frames + 1))
    return x[start:start + frames]


def crop_or_whole(utt, frames: int, rng: Rng) -> np.ndarray:
    """Crop when long enough, otherwise the whole utterance (no padding)."""
    x = utt.features if isinstance(utt, Utterance) else np.asarray(utt)
    if x.shape[0] <= frames:
        return x
    return crop(x, frames, rng)


# ---------------------------------------------------------------------------
# trials


@dataclass
class TrialList:
    enroll: np.ndarray
    test: np.ndarray
    is_target: np.ndarray

    def __len__(self):
        return len(self.enroll)

    @property
    def n_target(self) -> int:
        return int(np.sum(self.is_target))

    @property
    def n_nontarget(self) -> int:
        return len(self) - self.n_target


def make_trials(corpus: Corpus, n_target: int, n_nontarget: int, rng: Rng) -> TrialList:
    """Sample distinct unordered utterance pairs with labels from speaker ids."""
    spk = corpus.speaker_ids
    n = len(spk)
    if n_nontarget > 0 and len(set(spk.tolist())) < 2:
        raise ValueError("nontarget trials need at least two speakers")
    i, j = np.triu_indices(n, k=1)
    same = spk[i] == spk[j]
    picks = []
    for want, mask, kind in ((n_target, same, "target"), (n_nontarget, ~same, "nontarget")):
        pool = np.nonzero(mask)[0]
        if want > len(pool):
            raise ValueError(f"only {len(pool)} {kind} pairs available, {want} requested")
        picks.append(rng.choice(pool, size=want, replace=False) if want else np.zeros(0, np.int64))
    sel = np.sort(np.concatenate(picks)).astype(np.int64)
    return TrialList(i[sel], j[sel], same[sel])


def save_trials(trials: TrialList, path):
    lines = [f"{e}\t{t}\t{'target' if y else 'nontarget'}\n"
             for e, t, y in zip(trials.enroll, trials.test, trials.is_target)]
    Path(path).write_text("".join(lines))


def load_trials(path) -> TrialList:
    enroll, test, lab = [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
            raise CorruptFileError(f"{path}:{n}: malformed trial line {line!r}")
        enroll.append(int(parts[0]))
        test.append(int(parts[1]))
        lab.append(parts[2] == "target")
    return TrialList(np.array(enroll, dtype=np.int64), np.array(test, dtype=np.int64),
                     np.array(lab, dtype=bool))


# ---------------------------------------------------------------------------
# corpus files
#
#   8s  magic b"SVDCORPS"; u32 version (1); u32 feature dim D; u32 utterance count
#   per utterance: u32 speaker id; u8 domain (0 source, 1 target); u32 T;
#                  T*D float32 row-major
# all little-endian


def save_corpus(corpus: Corpus, path):
    d = corpus.feature_dim
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC + struct.pack("<III", CORPUS_VERSION, d, len(corpus)))
        for u in corpus.utterances:
            if u.features.shape[1] != d:
                raise ValueError("utterance feature dim differs from corpus")
            fh.write(struct.pack("<IBI", u.speaker_id, DOMAINS.index(u.domain), u.num_frames))
            fh.write(np.ascontiguousarray(u.features, dtype="<f4").tobytes())


def load_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    head = len(CORPUS_MAGIC) + 12
    if len(data) < head or data[:len(CORPUS_MAGIC)] != CORPUS_MAGIC:
        raise CorruptFileError(f"{path}: not a corpus file")
    version, d, count = struct.unpack_from("<III", data, len(CORPUS_MAGIC))
    if version != CORPUS_VERSION:
        raise CorruptFileError(f"{path}: unsupported corpus version {version}")
    pos, utts = head, []
    for _ in range(count):
        if pos + 9 > len(data):
            raise CorruptFileError(f"{path}: truncated utterance header")
        spk, dom, t = struct.unpack_from("<IBI", data, pos)
        pos += 9
        if dom >= len(DOMAINS):
            raise CorruptFileError(f"{path}: bad domain tag {dom}")
        nbytes = 4 * t * d
        if pos + nbytes > len(data):
            raise CorruptFileError(f"{path}: truncated features")
        feats = np.frombuffer(data, dtype="<f4", count=t * d, offset=pos).reshape(t, d).astype(np.float32)
        pos += nbytes
        utts.append(Utterance(spk, DOMAINS[dom], feats))
    if pos != len(data):
        raise CorruptFileError(f"{path}: trailing bytes")
    return Corpus(utts, d)


def summarize(corpus: Corpus, bins: int = 5) -> dict:
    lengths = np.array([u.num_frames for u in corpus.utterances], dtype=np.int64)
    summary = {"speakers": len(corpus.speakers), "utterances": len(corpus)}
    if len(lengths):
        counts, edges = np.histogram(lengths, bins=bins)
        summary.update(min_frames=int(lengths.min()), max_frames=int(lengths.max()),
                       mean_frames=float(lengths.mean()),
                       length_histogram=[[int(edges[k]), int(edges[k + 1]), int(c)]
                                         for k, c in enumerate(counts)])
    return summary
