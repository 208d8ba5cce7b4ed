"""Speaker-embedding network with hand-written forward and backward passes.

Architecture: ``n`` encoder blocks (1-D convolution over a context window,
affine, tanh), a temporal pooling layer (mean or learnable dictionary
encoding), ``fc1`` (affine + tanh, the embedding layer) and ``fc2`` (the
speaker classifier).

A batch holds utterances of different lengths: their frames are stacked into
one ``(total_frames, dim)`` matrix and ``offsets`` mark where each utterance
starts. Frame context is edge-replicated inside each utterance, so encoder
output length equals input length.
"""

from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng

LDE_DELTA = 1e-8
SELECTIONS = ("last2fc", "last2fc+pool+lastblock", "all")


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 30
    block_widths: tuple[int, ...] = (32, 32, 32)
    conv_context: int = 3
    pooling: str = "lde"
    lde_components: int = 4
    embedding_dim: int = 32
    num_classes: int = 200
    embedding_tap: str = "post"  # fc1 output after ("post") or before ("pre") tanh

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if self.input_dim < 1 or not self.block_widths or min(self.block_widths) < 1:
            raise ValueError("input_dim and block widths must be positive")
        if self.conv_context < 1 or self.conv_context % 2 == 0:
            raise ValueError(f"conv_context must be a positive odd number, got {self.conv_context}")
        if self.pooling not in ("mean", "lde"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "lde" and self.lde_components < 1:
            raise ValueError("lde_components must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.embedding_tap not in ("post", "pre"):
            raise ValueError(f"unknown embedding_tap {self.embedding_tap!r}")

    @property
    def block_names(self) -> list[str]:
        return [f"enc.block{i + 1}" for i in range(len(self.block_widths))]

    @property
    def pooled_dim(self) -> int:
        h = self.block_widths[-1]
        return h * self.lde_components if self.pooling == "lde" else h

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_widths"] = list(self.block_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


class ParameterSet:
    """Ordered named parameter groups, each a dict of arrays, with matching grads.

    ``modified`` holds the names of groups whose architecture changed after
    pre-training (the replaced classifier).
    """

    def __init__(self, values: dict[str, dict[str, np.ndarray]], modified=()):
        self.values = {g: {k: np.asarray(v, dtype=np.float64) for k, v in arrs.items()}
                       for g, arrs in values.items()}
        self.grads = {g: {k: np.zeros_like(v) for k, v in arrs.items()}
                      for g, arrs in self.values.items()}
        self.modified = frozenset(modified)

    @property
    def group_names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self):
        for arrs in self.grads.values():
            for v in arrs.values():
                v.fill(0.0)

    def copy(self) -> "ParameterSet":
        return ParameterSet(copy.deepcopy(self.values), self.modified)

    def snapshot(self) -> "ParameterSet":
        """Read-only copy, usable as a start-point reference."""
        snap = self.copy()
        for arrs in snap.values.values():
            for v in arrs.values():
                v.flags.writeable = False
        return snap

    def flat(self, groups=None) -> np.ndarray:
        groups = self.group_names if groups is None else groups
        parts = [v.ravel() for g in groups for v in self.values[g].values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def shapes(self) -> dict[str, dict[str, tuple]]:
        return {g: {k: v.shape for k, v in arrs.items()} for g, arrs in self.values.items()}

    def equals(self, other: "ParameterSet") -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(np.array_equal(v, other.values[g][k])
                   for g, arrs in self.values.items() for k, v in arrs.items())


def _init_linear(rng: Rng, fan_in: int, fan_out: int) -> dict[str, np.ndarray]:
    w = rng.gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
    return {"W": w, "b": np.zeros(fan_out)}


def init_params(cfg: EncoderConfig, seed: int) -> ParameterSet:
    """Seeded initialization: weights N(0, 1/fan_in), zero biases, unit LDE scales."""
    rng = Rng(seed)
    values: dict[str, dict[str, np.ndarray]] = {}
    h_in = cfg.input_dim
    for i, (name, h_out) in enumerate(zip(cfg.block_names, cfg.block_widths)):
        values[name] = _init_linear(rng.spawn(i), cfg.conv_context * h_in, h_out)
        h_in = h_out
    if cfg.pooling == "lde":
        prng = rng.spawn(100)
        values["pool.lde"] = {
            "means": 0.5 * prng.gen.standard_normal((cfg.lde_components, h_in)),
            "log_scales": np.zeros(cfg.lde_components),
        }
    values["fc1"] = _init_linear(rng.spawn(200), cfg.pooled_dim, cfg.embedding_dim)
    values["fc2"] = _init_linear(rng.spawn(300), cfg.embedding_dim, cfg.num_classes)
    return ParameterSet(values)


def check_params(params: ParameterSet, cfg: EncoderConfig):
    expected = init_shapes(cfg)
    if params.shapes() != expected:
        raise ValueError("parameter shapes do not match the encoder config")


def init_shapes(cfg: EncoderConfig) -> dict[str, dict[str, tuple]]:
    shapes: dict[str, dict[str, tuple]] = {}
    h_in = cfg.input_dim
    for name, h_out in zip(cfg.block_names, cfg.block_widths):
        shapes[name] = {"W": (cfg.conv_context * h_in, h_out), "b": (h_out,)}
        h_in = h_out
    if cfg.pooling == "lde":
        shapes["pool.lde"] = {"means": (cfg.lde_components, h_in), "log_scales": (cfg.lde_components,)}
    shapes["fc1"] = {"W": (cfg.pooled_dim, cfg.embedding_dim), "b": (cfg.embedding_dim,)}
    shapes["fc2"] = {"W": (cfg.embedding_dim, cfg.num_classes), "b": (cfg.num_classes,)}
    return shapes


# ---------------------------------------------------------------------------
# batching helpers


@dataclass
class Batch:
    frames: np.ndarray          # (total_frames, dim)
    offsets: np.ndarray         # (B,) start row of each utterance
    lengths: np.ndarray         # (B,)
    seg: np.ndarray             # (total_frames,) utterance index of every row

    @property
    def size(self) -> int:
        return len(self.lengths)


def make_batch(sequences) -> Batch:
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    seg = np.repeat(np.arange(len(seqs)), lengths)
    return Batch(np.concatenate(seqs, axis=0), offsets, lengths, seg)


def _context_index(batch: Batch, context: int) -> list[np.ndarray]:
    """Row index of each context offset, clipped to the owning utterance."""
    r = context // 2
    rows = np.arange(batch.frames.shape[0])
    start = batch.offsets[batch.seg]
    end = start + batch.lengths[batch.seg] - 1
    return [np.clip(rows + k, start, end) for k in range(-r, r + 1)]


def _scatter_rows(target: np.ndarray, idx: np.ndarray, rows: np.ndarray, shift: int):
    """target[idx] += rows, exploiting that most rows map to i + shift."""
    n = len(idx)
    plain = idx == np.arange(n) + shift
    src = np.nonzero(plain)[0]
    target[src + shift] += rows[src]
    clipped = np.nonzero(~plain)[0]
    if len(clipped):
        np.add.at(target, idx[clipped], rows[clipped])


# ---------------------------------------------------------------------------
# learnable dictionary encoding


def lde_pool(frames, means, scales):
    """Learnable dictionary encoding of one utterance.

    ``frames`` is T x H, ``means`` C x H, ``scales`` C positive reals. Returns a
    vector of length C*H: the soft-assigned mean residual of every component.
    """
    frames = np.asarray(frames, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0):
        raise ValueError("LDE scales must be positive")
    batch = make_batch([frames])
    out, _ = _lde_forward(batch, np.asarray(means, dtype=np.float64), np.log(scales))
    return out[0]


def _lde_forward(batch: Batch, means, log_scales, x=None):
    x = batch.frames if x is None else x
    scales = np.exp(log_scales)
    resid = x[:, None, :] - means[None, :, :]                 # (N, C, H)
    dist = np.einsum("nch,nch->nc", resid, resid)
    logits = -scales[None, :] * dist
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)                         # (N, C)
    wsum = np.add.reduceat(w, batch.offsets, axis=0)          # (B, C)
    wx = np.add.reduceat(w[:, :, None] * x[:, None, :], batch.offsets, axis=0)  # (B, C, H)
    denom = wsum + LDE_DELTA
    e = (wx - wsum[:, :, None] * means[None]) / denom[:, :, None]
    cache = {"x": x, "resid": resid, "dist": dist, "w": w, "wsum": wsum, "denom": denom,
             "e": e, "scales": scales}
    return e.reshape(batch.size, -1), cache


def _lde_backward(batch: Batch, means, cache, d_out):
    b, (c, h) = batch.size, means.shape
    de = d_out.reshape(b, c, h)
    w, resid, denom, e = cache["w"], cache["resid"], cache["denom"], cache["e"]
    de_n = de[batch.seg]                                     # (N, C, H)
    inv = 1.0 / denom[batch.seg]                             # (N, C)
    # d e_c / d w_tc = (x_t - mu_c - e_c) / S_c
    dw = np.einsum("nch,nch->nc", de_n, resid - e[batch.seg]) * inv
    dx = np.einsum("nc,nch->nh", w * inv, de_n)
    dmeans = -np.einsum("bc,bch->ch", cache["wsum"] / denom, de)
    da = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    scales = cache["scales"]
    dlog_scales = -np.sum(da * cache["dist"], axis=0) * scales
    dd = -scales[None, :] * da                               # d loss / d dist
    dx += 2.0 * np.einsum("nc,nch->nh", dd, resid)
    dmeans -= 2.0 * np.einsum("nc,nch->ch", dd, resid)
    return dx, dmeans, dlog_scales


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    batch: Batch
    cfg: EncoderConfig
    param_id: int
    block_inputs: list = field(default_factory=list)   # stacked context inputs U
    block_outputs: list = field(default_factory=list)  # tanh activations
    ctx_index: list = field(default_factory=list)
    lde_cache: dict | None = None
    pooled: np.ndarray | None = None
    hidden: np.ndarray | None = None     # fc1 output after tanh, classifier input
    embedding: np.ndarray | None = None  # (B, E)
    logits: np.ndarray | None = None     # (B, N)


def forward(params: ParameterSet, cfg: EncoderConfig, x) -> ForwardTrace:
    """Run the network on one sequence (T x D array) or a list of sequences."""
    if isinstance(x, Batch):
        batch = x
    elif isinstance(x, np.ndarray) and x.ndim == 2:
        batch = make_batch([x])
    else:
        batch = make_batch(x)
    if batch.frames.shape[1] != cfg.input_dim:
        raise ValueError(f"feature dim {batch.frames.shape[1]} != input_dim {cfg.input_dim}")
    if np.min(batch.lengths) < cfg.conv_context:
        raise ValueError(f"sequence shorter than the frame context ({cfg.conv_context})")
    v = params.values
    tr = ForwardTrace(batch=batch, cfg=cfg, param_id=id(params))
    tr.ctx_index = _context_index(batch, cfg.conv_context)
    h = batch.frames
    for name in cfg.block_names:
        u = np.concatenate([h[idx] for idx in tr.ctx_index], axis=1)
        h = np.tanh(u @ v[name]["W"] + v[name]["b"])
        tr.block_inputs.append(u)
        tr.block_outputs.append(h)
    if cfg.pooling == "lde":
        tr.pooled, tr.lde_cache = _lde_forward(batch, v["pool.lde"]["means"],
                                               v["pool.lde"]["log_scales"], x=h)
    else:
        tr.pooled = np.add.reduceat(h, batch.offsets, axis=0) / batch.lengths[:, None]
    z1 = tr.pooled @ v["fc1"]["W"] + v["fc1"]["b"]
    tr.hidden = np.tanh(z1)
    tr.embedding = tr.hidden if cfg.embedding_tap == "post" else z1
    tr.logits = tr.hidden @ v["fc2"]["W"] + v["fc2"]["b"]
    return tr


def backward(params: ParameterSet, trace: ForwardTrace, d_logits=None, d_embedding=None,
             d_hidden=None, trainable=None):
    """Accumulate parameter gradients into ``params.grads``.

    Upstream gradients may arrive at the logits, at the embedding tap and at
    the classifier input (the angular-margin head bypasses the linear fc2).
    Groups outside ``trainable`` (a set of names, None = all) get nothing.
    """
    if trace.param_id != id(params):
        raise ValueError("trace was produced by a different parameter set")
    cfg, batch, v, g = trace.cfg, trace.batch, params.values, params.grads
    b, n_cls = trace.logits.shape
    d_hidden = np.zeros_like(trace.hidden) if d_hidden is None else np.asarray(d_hidden, dtype=np.float64)
    for name, arr, shape in (("d_logits", d_logits, trace.logits.shape),
                             ("d_embedding", d_embedding, trace.embedding.shape),
                             ("d_hidden", d_hidden, trace.hidden.shape)):
        if arr is not None and np.shape(arr) != shape:
            raise ValueError(f"{name} shape {np.shape(arr)} != {shape}")
    train = set(params.group_names) if trainable is None else set(trainable)

    if d_logits is not None:
        if "fc2" in train:
            g["fc2"]["W"] += trace.hidden.T @ d_logits
            g["fc2"]["b"] += d_logits.sum(axis=0)
        d_hidden = d_hidden + d_logits @ v["fc2"]["W"].T
    dz1 = d_hidden * (1.0 - trace.hidden ** 2)
    if d_embedding is not None:
        if cfg.embedding_tap == "post":
            dz1 = dz1 + d_embedding * (1.0 - trace.hidden ** 2)
        else:
            dz1 = dz1 + d_embedding
    if "fc1" in train:
        g["fc1"]["W"] += trace.pooled.T @ dz1
        g["fc1"]["b"] += dz1.sum(axis=0)

    if not any(n in train for n in cfg.block_names + ["pool.lde"]):
        return
    d_pooled = dz1 @ v["fc1"]["W"].T
    if cfg.pooling == "lde":
        dh, dmeans, dls = _lde_backward(batch, v["pool.lde"]["means"], trace.lde_cache, d_pooled)
        if "pool.lde" in train:
            g["pool.lde"]["means"] += dmeans
            g["pool.lde"]["log_scales"] += dls
    else:
        dh = (d_pooled / batch.lengths[:, None])[batch.seg]

    names = cfg.block_names
    lowest = min((names.index(n) for n in names if n in train), default=len(names))
    r = cfg.conv_context // 2
    for i in range(len(names) - 1, lowest - 1, -1):
        name = names[i]
        out = trace.block_outputs[i]
        dz = dh * (1.0 - out ** 2)
        if name in train:
            g[name]["W"] += trace.block_inputs[i].T @ dz
            g[name]["b"] += dz.sum(axis=0)
        if i == lowest:
            break
        du = dz @ v[name]["W"].T
        h_in = du.shape[1] // cfg.conv_context
        dh = np.zeros((du.shape[0], h_in))
        for j, idx in enumerate(trace.ctx_index):
            _scatter_rows(dh, idx, du[:, j * h_in:(j + 1) * h_in], j - r)


# ---------------------------------------------------------------------------
# layer selection and classifier replacement


def select_groups(params: ParameterSet, cfg: EncoderConfig, selection: str) -> list[str]:
    """Names of the groups trained under a fine-tuning layer selection."""
    if selection == "all":
        chosen = params.group_names
    elif selection == "last2fc":
        chosen = ["fc1", "fc2"]
    elif selection == "last2fc+pool+lastblock":
        chosen = [cfg.block_names[-1]] + (["pool.lde"] if cfg.pooling == "lde" else []) + ["fc1", "fc2"]
    else:
        raise ValueError(f"unknown layer selection {selection!r}; expected one of {SELECTIONS}")
    missing = [n for n in chosen if n not in params.values]
    if missing:
        raise ValueError(f"selection {selection!r} names unknown groups {missing}")
    return [n for n in params.group_names if n in chosen]


def replace_classifier(params: ParameterSet, cfg: EncoderConfig, new_num_classes: int,
                       seed: int) -> tuple[ParameterSet, EncoderConfig]:
    """Fresh ``fc2`` for a new class count; every other group is copied bitwise."""
    if new_num_classes < 2:
        raise ValueError(f"invalid class count {new_num_classes}")
    new_cfg = EncoderConfig(**{**cfg.to_dict(), "num_classes": int(new_num_classes)})
    values = copy.deepcopy(params.values)
    values["fc2"] = _init_linear(Rng(seed).spawn(301), cfg.embedding_dim, new_num_classes)
    return ParameterSet(values, modified=params.modified | {"fc2"}), new_cfg


# ---------------------------------------------------------------------------
# model files
#
# layout (little-endian):
#   8s  magic b"SVDMODEL"
#   u32 format version (1)
#   u32 n, then n bytes of UTF-8 JSON EncoderConfig
#   u32 number of groups, then per group:
#       u16 n, name bytes; u8 flags (bit 0: modified); u32 number of arrays
#       per array: u16 n, name bytes; u32 ndim; ndim x u32 dims; f64 values row-major
#   u32 CRC-32 of everything before it

MODEL_MAGIC = b"SVDMODEL"
MODEL_VERSION = 1


class CorruptFileError(ValueError):
    pass


def _pack_str(s: str, fmt: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(fmt, len(raw)) + raw


def save_params(params: ParameterSet, cfg: EncoderConfig, path):
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(_pack_str(json.dumps(cfg.to_dict(), sort_keys=True), "<I"))
    buf.write(struct.pack("<I", len(params.values)))
    for gname, arrs in params.values.items():
        buf.write(_pack_str(gname, "<H"))
        buf.write(struct.pack("<BI", 1 if gname in params.modified else 0, len(arrs)))
        for aname, arr in arrs.items():
            buf.write(_pack_str(aname, "<H"))
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError("unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, fmt: str) -> str:
        (n,) = self.unpack(fmt)
        return self.take(n).decode("utf-8")


def load_params(path, expected_cfg: EncoderConfig | None = None) -> tuple[ParameterSet, EncoderConfig]:
    data = Path(path).read_bytes()
    if len(data) < len(MODEL_MAGIC) + 8 or data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise CorruptFileError(f"{path}: not a model file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(len(MODEL_MAGIC))
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise CorruptFileError(f"{path}: unsupported model format version {version}")
    cfg = EncoderConfig.from_dict(json.loads(r.string("<I")))
    (n_groups,) = r.unpack("<I")
    values, modified = {}, set()
    for _ in range(n_groups):
        gname = r.string("<H")
        flags, n_arrs = r.unpack("<BI")
        if flags & 1:
            modified.add(gname)
        arrs = {}
        for _ in range(n_arrs):
            aname = r.string("<H")
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I")
            count = int(np.prod(shape)) if ndim else 1
            arrs[aname] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        values[gname] = arrs
    if r.pos != len(body):
        raise CorruptFileError(f"{path}: trailing bytes after last group")
    params = ParameterSet(values, modified)
    check_params(params, cfg)
    if expected_cfg is not None and expected_cfg != cfg:
        raise ValueError(f"{path}: model config {cfg} does not match expected {expected_cfg}")
    return params, cfg
