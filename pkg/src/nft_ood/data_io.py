"""Feature-bank file format, JSONL manifests, and the synthetic dataset generator.

The FBNK container stores row-major float32 little-endian payloads regardless
of host endianness. All randomness flows through a counter-based Philox
generator keyed on the config seed, so fixtures are portable.
"""

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidConfig, SchemaError, ZeroNorm
from .mining import CropSet, build_training_set, select_outliers
from .model import FeatureBank, TrainingSet
from .numerics import as_f64, normalize_rows

BANK_MAGIC = b"FBNK"
BANK_VERSION = 1
BANK_DTYPE_F32 = 1

MANIFEST_ROLES = (
    "pos_label",
    "neg_label",
    "train_pos",
    "train_neg",
    "test_id",
    "test_ood",
    "crop",
)
_CLASS_REQUIRED = {"train_pos", "crop"}
_CLASS_FORBIDDEN = {"neg_label", "train_neg", "test_ood"}
_KNOWN_KEYS = ("row", "id", "role", "class", "parent")


def write_bank(path, mat):
    mat = as_f64(np.atleast_2d(mat))
    rows, dim = mat.shape
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<BBH", BANK_VERSION, BANK_DTYPE_F32, 0))
        f.write(struct.pack("<QQ", rows, dim))
        f.write(mat.astype("<f4").tobytes())


def read_bank(path, unit_rows=False):
    """Read an FBNK file as a float64 matrix.

    With unit_rows=True the rows are treated as feature vectors: rows whose
    norm deviates from 1 by more than 1e-5 are re-normalized with a warning,
    and rows with norm below 1e-6 are rejected.
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 24:
        raise FormatError("bank file too short for header")
    if data[:4] != BANK_MAGIC:
        raise FormatError("bad bank magic")
    version, dtype, _ = struct.unpack("<BBH", data[4:8])
    if version != BANK_VERSION:
        raise FormatError(f"unsupported bank version {version}")
    if dtype != BANK_DTYPE_F32:
        raise FormatError(f"unsupported bank dtype code {dtype}")
    rows, dim = struct.unpack("<QQ", data[8:24])
    expected = rows * dim * 4
    if len(data) - 24 != expected:
        raise FormatError(
            f"payload length {len(data) - 24} != rows*dim*4 = {expected}"
        )
    mat = np.frombuffer(data[24:], dtype="<f4").astype(np.float64).reshape(rows, dim)
    if unit_rows:
        norms = np.sqrt(np.sum(mat * mat, axis=1))
        if np.any(norms < 1e-6):
            raise ZeroNorm("bank contains a near-zero feature row")
        if np.any(np.abs(norms - 1.0) > 1e-5):
            warnings.warn("bank rows deviate from unit norm by > 1e-5; re-normalizing")
            mat = mat / norms[:, None]
    return mat


def write_manifest(path, records):
    """Write JSONL manifest records; unknown keys are dropped with a warning."""
    dropped = set()
    with open(path, "w") as f:
        for rec in records:
            extra = set(rec) - set(_KNOWN_KEYS)
            dropped |= extra
            out = {k: rec[k] for k in _KNOWN_KEYS if k in rec}
            f.write(json.dumps(out, sort_keys=True) + "\n")
    if dropped:
        warnings.warn(f"dropped unknown manifest keys: {sorted(dropped)}")


def _validate_record(rec, lineno):
    for key in ("row", "id", "role"):
        if key not in rec:
            raise SchemaError(f"manifest line {lineno}: missing key {key!r}")
    if rec["role"] not in MANIFEST_ROLES:
        raise SchemaError(f"manifest line {lineno}: unknown role {rec['role']!r}")
    if rec["role"] in _CLASS_REQUIRED and "class" not in rec:
        raise SchemaError(
            f"manifest line {lineno}: role {rec['role']!r} requires a class index"
        )
    if rec["role"] in _CLASS_FORBIDDEN and "class" in rec:
        raise SchemaError(
            f"manifest line {lineno}: role {rec['role']!r} must not carry a class"
        )


def read_manifest(path, n_rows=None):
    """Read JSONL manifest records, preserving unknown keys."""
    records = []
    seen_rows = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            _validate_record(rec, lineno)
            if rec["row"] in seen_rows:
                raise SchemaError(f"manifest line {lineno}: duplicate row {rec['row']}")
            if n_rows is not None and not 0 <= rec["row"] < n_rows:
                raise SchemaError(
                    f"manifest line {lineno}: row {rec['row']} outside bank bounds"
                )
            seen_rows.add(rec["row"])
            records.append(rec)
    return records


@dataclass
class SynthConfig:
    dim: int = 32
    n_classes: int = 8
    m_neg: int = 64
    shots: int = 4
    crops_per_sample: int = 16
    select: int = 4
    kappa: float = 0.3
    seed: int = 7
    n_test_per_class: int = 16
    n_test_ood: int = 128
    background_fraction: float = 0.5

    def __post_init__(self):
        for name in ("dim", "n_classes", "m_neg", "shots", "crops_per_sample",
                     "select", "n_test_per_class", "n_test_ood"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.kappa < 0:
            raise InvalidConfig("kappa must be >= 0 (0 means noiseless prototypes)")
        if 2 * self.select > self.crops_per_sample:
            raise InvalidConfig("need 2*select <= crops_per_sample")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SynthResult:
    bank: FeatureBank
    training: TrainingSet
    test_id: np.ndarray
    test_ood: np.ndarray
    test_id_classes: np.ndarray
    records: list = field(default_factory=list)
    crop_sets: list = field(default_factory=list)


def _sphere(rng, n, dim):
    g = rng.standard_normal((n, dim))
    return normalize_rows(g)


def _around(rng, proto, kappa, n, dim):
    pts = proto + kappa * rng.standard_normal((n, dim))
    return normalize_rows(pts)


def synth_dataset(cfg):
    """Deterministic synthetic embedding dataset on the unit sphere.

    Positive and negative label prototypes are uniform on the sphere; ID
    images are noisy copies of their class prototype, OOD images noisy copies
    of negative prototypes, and crops mix class-prototype copies with planted
    background crops near negative prototypes.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed)))
    d, n, m = cfg.dim, cfg.n_classes, cfg.m_neg
    pos_proto = _sphere(rng, n, d)
    neg_proto = _sphere(rng, m, d)
    bank = FeatureBank.from_rows(pos_proto, neg_proto)

    crop_sets = []
    selections = []
    n_bg = int(round(cfg.crops_per_sample * cfg.background_fraction))
    n_fg = cfg.crops_per_sample - n_bg
    for c in range(n):
        for s in range(cfg.shots):
            fg = _around(rng, pos_proto[c], cfg.kappa, n_fg, d)
            bg_protos = neg_proto[rng.integers(0, m, size=n_bg)]
            bg = normalize_rows(bg_protos + cfg.kappa * rng.standard_normal((n_bg, d)))
            feats = np.vstack([fg, bg])
            cs = CropSet(parent_id=f"train_{c}_{s}", label_index=c, features=feats)
            crop_sets.append(cs)
            selections.append(select_outliers(cs, pos_proto[c], cfg.select))
    training = build_training_set(selections, crop_sets)

    test_id_classes = np.repeat(np.arange(n), cfg.n_test_per_class)
    test_id = normalize_rows(
        pos_proto[test_id_classes]
        + cfg.kappa * rng.standard_normal((test_id_classes.size, d))
    )
    ood_protos = neg_proto[rng.integers(0, m, size=cfg.n_test_ood)]
    test_ood = normalize_rows(
        ood_protos + cfg.kappa * rng.standard_normal((cfg.n_test_ood, d))
    )

    # manifest rows index the virtual concatenation [labels, train, test_id, test_ood]
    records = []
    row = 0
    for i in range(n):
        records.append({"row": row, "id": f"pos_{i}", "role": "pos_label", "class": i})
        row += 1
    for j in range(m):
        records.append({"row": row, "id": f"neg_{j}", "role": "neg_label"})
        row += 1
    for i in range(training.n_pos):
        records.append({
            "row": row, "id": f"train_pos_{i}", "role": "train_pos",
            "class": int(training.pos_labels[i]),
        })
        row += 1
    for i in range(training.n_neg):
        records.append({"row": row, "id": f"train_neg_{i}", "role": "train_neg"})
        row += 1
    for i, c in enumerate(test_id_classes):
        records.append({"row": row, "id": f"test_id_{i}", "role": "test_id",
                        "class": int(c)})
        row += 1
    for i in range(cfg.n_test_ood):
        records.append({"row": row, "id": f"test_ood_{i}", "role": "test_ood"})
        row += 1

    return SynthResult(
        bank=bank,
        training=training,
        test_id=test_id,
        test_ood=test_ood,
        test_id_classes=test_id_classes,
        records=records,
        crop_sets=crop_sets,
    )
