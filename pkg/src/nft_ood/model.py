"""Learnable feature-tuning parameters and the transform applied to text features.

The model maps each pre-trained text feature c to a tuned feature c' with a
per-distribution (positive / negative) affine transform whose parameters are
optionally modulated per image by a small meta-network. At a fresh
initialization the transform is the identity for every mode, so tuned scoring
coincides with zero-shot scoring.
"""

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, FormatError, InvalidDim, ZeroNorm
from .numerics import as_f64, l2_normalize, normalize_rows

MODES = ("const_shift", "vec_shift", "scale_shift", "mlp")
ROLES = ("positive", "negative")

_MODE_CODE = {m: i for i, m in enumerate(MODES)}

CHECKPOINT_MAGIC = b"NFTC"
CHECKPOINT_VERSION = 1


@dataclass
class FeatureBank:
    """Immutable matrix of unit-norm text features: N positive rows then M negative."""

    pos: np.ndarray  # (N, D)
    neg: np.ndarray  # (M, D)
    labels: list

    @classmethod
    def from_rows(cls, pos, neg, labels=None):
        pos = as_f64(np.atleast_2d(pos))
        neg = as_f64(neg).reshape(-1, pos.shape[1]) if np.size(neg) else np.zeros((0, pos.shape[1]))
        if pos.shape[0] < 1:
            raise InvalidDim("bank needs at least one positive label row")
        if labels is None:
            labels = [f"pos_{i}" for i in range(pos.shape[0])] + [
                f"neg_{j}" for j in range(neg.shape[0])
            ]
        if len(labels) != pos.shape[0] + neg.shape[0]:
            raise DimMismatch("label count does not match row count")
        if len(set(labels)) != len(labels):
            raise DimMismatch("duplicate row identifiers in bank")
        norms = np.sqrt(np.sum(pos * pos, axis=1))
        if neg.shape[0]:
            norms = np.concatenate([norms, np.sqrt(np.sum(neg * neg, axis=1))])
        if np.any(np.abs(norms - 1.0) > 1e-5):
            warnings.warn("bank rows deviate from unit norm by > 1e-5; re-normalizing")
        pos = normalize_rows(pos)
        if neg.shape[0]:
            neg = normalize_rows(neg)
        return cls(pos=pos, neg=neg, labels=list(labels))

    @property
    def dim(self):
        return self.pos.shape[1]

    @property
    def n_pos(self):
        return self.pos.shape[0]

    @property
    def n_neg(self):
        return self.neg.shape[0]

    def rows(self):
        return np.vstack([self.pos, self.neg])


@dataclass
class TrainingSet:
    """Positive samples (feature, class index) and negative samples (feature only)."""

    pos_features: np.ndarray  # (n_p, D)
    pos_labels: np.ndarray  # (n_p,) int class indices
    neg_features: np.ndarray  # (n_n, D)

    @property
    def n_pos(self):
        return self.pos_features.shape[0]

    @property
    def n_neg(self):
        return self.neg_features.shape[0]


@dataclass
class TransformHead:
    alpha: np.ndarray  # (D,), all ones at init
    beta: np.ndarray  # (D,), all zeros at init


@dataclass
class MetaNet:
    """Shared trunk (D -> hidden, relu) with zero-initialized alpha/beta heads."""

    w1: np.ndarray  # (hidden, D)
    b1: np.ndarray  # (hidden,)
    w_alpha: np.ndarray  # (D, hidden)
    b_alpha: np.ndarray  # (D,)
    w_beta: np.ndarray  # (D, hidden)
    b_beta: np.ndarray  # (D,)

    @property
    def hidden(self):
        return self.w1.shape[0]


@dataclass
class ModelState:
    mode: str
    dim: int
    hidden: int
    pos_head: TransformHead
    neg_head: TransformHead
    pos_net: MetaNet
    neg_net: MetaNet

    def head(self, role):
        return self.pos_head if role == "positive" else self.neg_head

    def net(self, role):
        return self.pos_net if role == "positive" else self.neg_net

    def params(self):
        """Live views of every parameter array, keyed by a stable path."""
        out = {}
        for hname, h in (("pos_head", self.pos_head), ("neg_head", self.neg_head)):
            out[f"{hname}.alpha"] = h.alpha
            out[f"{hname}.beta"] = h.beta
        for nname, n in (("pos_net", self.pos_net), ("neg_net", self.neg_net)):
            for f in ("w1", "b1", "w_alpha", "b_alpha", "w_beta", "b_beta"):
                out[f"{nname}.{f}"] = getattr(n, f)
        return out

    def copy(self):
        def _h(h):
            return TransformHead(alpha=h.alpha.copy(), beta=h.beta.copy())

        def _n(n):
            return MetaNet(
                w1=n.w1.copy(),
                b1=n.b1.copy(),
                w_alpha=n.w_alpha.copy(),
                b_alpha=n.b_alpha.copy(),
                w_beta=n.w_beta.copy(),
                b_beta=n.b_beta.copy(),
            )

        return ModelState(
            mode=self.mode,
            dim=self.dim,
            hidden=self.hidden,
            pos_head=_h(self.pos_head),
            neg_head=_h(self.neg_head),
            pos_net=_n(self.pos_net),
            neg_net=_n(self.neg_net),
        )


@dataclass
class Checkpoint:
    model: ModelState
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def default_hidden(dim):
    return max(dim // 16, 8)


def init_model(dim, hidden=None, mode="scale_shift", seed=0):
    """Identity-initialized model: transform(c) == c for every mode and input."""
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise InvalidDim(f"dim must be a positive integer, got {dim}")
    if hidden is None:
        hidden = default_hidden(dim)
    if hidden < 1:
        raise InvalidDim(f"hidden must be >= 1, got {hidden}")
    if mode not in MODES:
        raise InvalidDim(f"unknown transform mode {mode!r}")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    bound = 1.0 / np.sqrt(dim)

    def _net():
        return MetaNet(
            w1=rng.uniform(-bound, bound, size=(hidden, dim)),
            b1=rng.uniform(-bound, bound, size=hidden),
            w_alpha=np.zeros((dim, hidden)),
            b_alpha=np.zeros(dim),
            w_beta=np.zeros((dim, hidden)),
            b_beta=np.zeros(dim),
        )

    def _head():
        return TransformHead(alpha=np.ones(dim), beta=np.zeros(dim))

    return ModelState(
        mode=mode,
        dim=int(dim),
        hidden=int(hidden),
        pos_head=_head(),
        neg_head=_head(),
        pos_net=_net(),
        neg_net=_net(),
    )


def metanet_forward(net, v):
    """Image-conditional residuals (alpha_res, beta_res) for image feature v."""
    v = as_f64(v)
    if v.shape != (net.w1.shape[1],):
        raise DimMismatch(f"expected image feature of length {net.w1.shape[1]}")
    z = net.w1 @ v + net.b1
    h = np.maximum(z, 0.0)
    return net.w_alpha @ h + net.b_alpha, net.w_beta @ h + net.b_beta


def affine_params(state, v, role):
    """Effective (alpha, beta) for one role, including image-conditional residuals.

    Returns None for modes whose transform is not an affine map on c.
    """
    head = state.head(role)
    if state.mode == "const_shift":
        return np.ones(state.dim), np.full(state.dim, head.beta[0])
    if state.mode == "vec_shift":
        _, beta_res = metanet_forward(state.net(role), v)
        return np.ones(state.dim), head.beta + beta_res
    if state.mode == "scale_shift":
        alpha_res, beta_res = metanet_forward(state.net(role), v)
        return head.alpha + alpha_res, head.beta + beta_res
    return None


def mlp_residual(net, c_rows):
    """Residual of the two-layer MLP transform applied to each row of c_rows."""
    z = c_rows @ net.w1.T + net.b1
    h = np.maximum(z, 0.0)
    return h @ net.w_beta.T + net.b_beta


def _transform_rows(state, c_rows, v, role):
    c_rows = np.atleast_2d(c_rows)
    if c_rows.shape[1] != state.dim:
        raise DimMismatch(
            f"bank dim {c_rows.shape[1]} does not match model dim {state.dim}"
        )
    if state.mode == "mlp":
        u = c_rows + mlp_residual(state.net(role), c_rows)
    else:
        a, b = affine_params(state, v, role)
        u = a * c_rows + b
    norms = np.sqrt(np.sum(u * u, axis=1))
    if np.any(norms <= 1e-12):
        raise ZeroNorm("transform produced a zero vector; parameters are degenerate")
    return u / norms[:, None]


def transform(state, c, v, role):
    """Tuned feature for one text feature c, conditioned on image feature v."""
    if role not in ROLES:
        raise DimMismatch(f"unknown role {role!r}")
    c = as_f64(c)
    v = as_f64(v)
    if c.shape != (state.dim,) or v.shape != (state.dim,):
        raise DimMismatch("c and v must both have the model dimension")
    return _transform_rows(state, c[None, :], v, role)[0]


def transform_bank(state, bank, v):
    """Tuned bank: positive rows with the positive head/net, negative with the negative."""
    v = as_f64(v)
    if bank.dim != state.dim or v.shape != (state.dim,):
        raise DimMismatch("bank, model and image feature dimensions must agree")
    parts = [_transform_rows(state, bank.pos, v, "positive")]
    if bank.n_neg:
        parts.append(_transform_rows(state, bank.neg, v, "negative"))
    return np.vstack(parts)


_PARAM_ORDER = (
    "pos_head.alpha",
    "pos_head.beta",
    "neg_head.alpha",
    "neg_head.beta",
    "pos_net.w1",
    "pos_net.b1",
    "pos_net.w_alpha",
    "pos_net.b_alpha",
    "pos_net.w_beta",
    "pos_net.b_beta",
    "neg_net.w1",
    "neg_net.b1",
    "neg_net.w_alpha",
    "neg_net.b_alpha",
    "neg_net.w_beta",
    "neg_net.b_beta",
)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(ckpt, path):
    """Write a checkpoint: NFTC magic, version, dims, JSON metadata, raw float64 params."""
    state = ckpt.model
    meta_blob = _canonical_json({"config": ckpt.config, "meta": ckpt.meta})
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BBH", CHECKPOINT_VERSION, _MODE_CODE[state.mode], 0))
        f.write(struct.pack("<II", state.dim, state.hidden))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        params = state.params()
        for key in _PARAM_ORDER:
            f.write(params[key].astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise FormatError("checkpoint file truncated")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, mode_code, _ = struct.unpack("<BBH", take(4))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if mode_code >= len(MODES):
        raise FormatError(f"unknown transform mode code {mode_code}")
    dim, hidden = struct.unpack("<II", take(8))
    (meta_len,) = struct.unpack("<I", take(4))
    blob = json.loads(take(meta_len).decode("utf-8"))
    state = init_model(dim, hidden=hidden, mode=MODES[mode_code], seed=0)
    params = state.params()
    for key in _PARAM_ORDER:
        arr = params[key]
        raw = take(arr.size * 8)
        arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return Checkpoint(model=state, config=blob["config"], meta=blob["meta"])


def checkpoint_digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def states_equal(a, b):
    if a.mode != b.mode or a.dim != b.dim or a.hidden != b.hidden:
        return False
    pa, pb = a.params(), b.params()
    return all(np.array_equal(pa[k], pb[k]) for k in pa)
