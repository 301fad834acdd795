import json
import struct

import numpy as np
import pytest

from nft_ood.errors import (
    FormatError,
    InvalidConfig,
    SchemaError,
    ZeroNorm,
)
from nft_ood.data_io import (
    SynthConfig,
    read_bank,
    read_manifest,
    synth_dataset,
    write_bank,
    write_manifest,
)


# ---- FBNK format ----


def test_bank_round_trip():
    rng = np.random.default_rng(80)
    mat = rng.standard_normal((3, 4))
    path = None
    import tempfile, os

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.fbnk")
        write_bank(path, mat)
        back = read_bank(path)
        assert back.shape == (3, 4)
        assert np.max(np.abs(back - mat)) < 1e-6  # float32 storage rounding


def test_bank_header_fields_exact(tmp_path):
    path = tmp_path / "m.fbnk"
    write_bank(path, np.zeros((2, 5)) + 0.5)
    data = path.read_bytes()
    assert data[:4] == b"FBNK"
    version, dtype, reserved = struct.unpack("<BBH", data[4:8])
    assert (version, dtype, reserved) == (1, 1, 0)
    rows, dim = struct.unpack("<QQ", data[8:24])
    assert (rows, dim) == (2, 5)
    assert len(data) == 24 + 2 * 5 * 4


def test_bank_bad_magic(tmp_path):
    path = tmp_path / "m.fbnk"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(FormatError):
        read_bank(path)


def test_bank_short_payload(tmp_path):
    path = tmp_path / "m.fbnk"
    header = b"FBNK" + struct.pack("<BBH", 1, 1, 0) + struct.pack("<QQ", 2, 2)
    path.write_bytes(header + b"\x00" * 15)  # needs 16 payload bytes
    with pytest.raises(FormatError):
        read_bank(path)


def test_bank_unknown_version_and_dtype(tmp_path):
    path = tmp_path / "m.fbnk"
    header = b"FBNK" + struct.pack("<BBH", 2, 1, 0) + struct.pack("<QQ", 0, 0)
    path.write_bytes(header)
    with pytest.raises(FormatError):
        read_bank(path)
    header = b"FBNK" + struct.pack("<BBH", 1, 9, 0) + struct.pack("<QQ", 0, 0)
    path.write_bytes(header)
    with pytest.raises(FormatError):
        read_bank(path)


def test_bank_unit_rows_renormalized_with_warning(tmp_path):
    path = tmp_path / "m.fbnk"
    write_bank(path, np.array([[3.0, 4.0]]))
    with pytest.warns(UserWarning):
        mat = read_bank(path, unit_rows=True)
    assert np.allclose(mat[0], [0.6, 0.8], atol=1e-6)


def test_bank_unit_rows_rejects_near_zero(tmp_path):
    path = tmp_path / "m.fbnk"
    write_bank(path, np.array([[1e-7, 0.0]]))
    with pytest.raises(ZeroNorm):
        read_bank(path, unit_rows=True)


def test_bank_round_trip_random_sizes(tmp_path):
    rng = np.random.default_rng(81)
    for i in range(10):
        rows = int(rng.integers(1, 20))
        dim = int(rng.integers(1, 20))
        mat = rng.standard_normal((rows, dim)).astype(np.float32).astype(np.float64)
        path = tmp_path / f"m{i}.fbnk"
        write_bank(path, mat)
        assert np.array_equal(read_bank(path), mat)  # exact: values are f32


# ---- manifests ----


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "m.jsonl"
    records = [
        {"row": 0, "id": "a", "role": "pos_label", "class": 0},
        {"row": 1, "id": "b", "role": "neg_label"},
        {"row": 2, "id": "c", "role": "train_pos", "class": 1},
        {"row": 3, "id": "d", "role": "train_neg"},
        {"row": 4, "id": "e", "role": "test_id", "class": 0},
    ]
    write_manifest(path, records)
    assert read_manifest(path) == records


def test_manifest_duplicate_row(tmp_path):
    path = tmp_path / "m.jsonl"
    write_manifest(
        path,
        [
            {"row": 0, "id": "a", "role": "neg_label"},
            {"row": 0, "id": "b", "role": "neg_label"},
        ],
    )
    with pytest.raises(SchemaError):
        read_manifest(path)


def test_manifest_train_pos_requires_class(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"row": 0, "id": "a", "role": "train_pos"}) + "\n")
    with pytest.raises(SchemaError):
        read_manifest(path)


def test_manifest_class_forbidden_on_negatives(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(
        json.dumps({"row": 0, "id": "a", "role": "neg_label", "class": 2}) + "\n"
    )
    with pytest.raises(SchemaError):
        read_manifest(path)


def test_manifest_unknown_keys(tmp_path):
    path = tmp_path / "m.jsonl"
    with pytest.warns(UserWarning):
        write_manifest(
            path, [{"row": 0, "id": "a", "role": "neg_label", "color": "red"}]
        )
    assert "color" not in read_manifest(path)[0]
    # unknown keys written by other tools are preserved on read
    path.write_text(
        json.dumps({"row": 0, "id": "a", "role": "neg_label", "extra": 5}) + "\n"
    )
    assert read_manifest(path)[0]["extra"] == 5


def test_manifest_row_bounds(tmp_path):
    path = tmp_path / "m.jsonl"
    write_manifest(path, [{"row": 9, "id": "a", "role": "neg_label"}])
    with pytest.raises(SchemaError):
        read_manifest(path, n_rows=5)


def test_manifest_missing_key(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"row": 0, "role": "neg_label"}) + "\n")
    with pytest.raises(SchemaError):
        read_manifest(path)


# ---- synthetic generator ----


def test_synth_config_validation():
    with pytest.raises(InvalidConfig):
        SynthConfig(dim=0)
    with pytest.raises(InvalidConfig):
        SynthConfig(kappa=-0.1)
    with pytest.raises(InvalidConfig):
        SynthConfig(select=10, crops_per_sample=16)


def test_synth_deterministic():
    a = synth_dataset(SynthConfig(seed=7))
    b = synth_dataset(SynthConfig(seed=7))
    assert np.array_equal(a.bank.rows(), b.bank.rows())
    assert np.array_equal(a.training.pos_features, b.training.pos_features)
    assert np.array_equal(a.test_id, b.test_id)
    assert np.array_equal(a.test_ood, b.test_ood)
    assert a.records == b.records
    c = synth_dataset(SynthConfig(seed=8))
    assert not np.array_equal(a.bank.rows(), c.bank.rows())


def test_synth_structure_counts():
    cfg = SynthConfig()  # D=32, N=8, M=64, S=4, P=16, Q=4
    res = synth_dataset(cfg)
    assert res.bank.n_pos == 8 and res.bank.n_neg == 64 and res.bank.dim == 32
    k = cfg.n_classes * cfg.shots
    assert res.training.n_pos == k * cfg.select == 128
    assert res.training.n_neg == k * cfg.select == 128
    assert res.test_id.shape == (8 * cfg.n_test_per_class, 32)
    assert res.test_ood.shape == (cfg.n_test_ood, 32)
    roles = [r["role"] for r in res.records]
    assert roles.count("pos_label") == 8
    assert roles.count("neg_label") == 64
    assert roles.count("train_pos") == 128
    assert roles.count("train_neg") == 128
    rows = [r["row"] for r in res.records]
    assert rows == list(range(len(rows)))


def test_synth_noiseless_prototypes():
    res = synth_dataset(SynthConfig(kappa=0.0, n_test_per_class=4, n_test_ood=16))
    protos = res.bank.pos
    for i, c in enumerate(res.test_id_classes):
        assert np.allclose(res.test_id[i], protos[c], atol=1e-12)


def test_synth_rows_unit_norm():
    res = synth_dataset(SynthConfig())
    for mat in (res.bank.rows(), res.training.pos_features, res.test_id, res.test_ood):
        assert np.max(np.abs(np.linalg.norm(mat, axis=1) - 1.0)) < 1e-12
