import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advsep.datasets import (
    BadMagicError,
    CountMismatchError,
    DataError,
    Dataset,
    TrailingBytesError,
    TruncatedError,
    from_csv,
    load_idx,
    read_idx,
    stratified_split,
    subset,
    synth_blobs,
    to_csv,
    write_idx,
)


def _idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


def _write(tmp_path, name, data):
    p = tmp_path / name
    p.write_bytes(data)
    return p


def test_single_zero_image(tmp_path):
    img = _write(tmp_path, "i", _idx_bytes(0x803, (1, 2, 2), [0, 0, 0, 0]))
    lab = _write(tmp_path, "l", _idx_bytes(0x801, (1,), [0]))
    ds = load_idx(img, lab)
    np.testing.assert_array_equal(ds.inputs, [[0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(ds.labels, [0])
    assert ds.num_classes == 10 and ds.input_dim == 4


def test_known_bytes_scale_by_255(tmp_path):
    pix = [0, 255, 128, 1, 254, 0, 17, 200]
    img = _write(tmp_path, "i", _idx_bytes(0x803, (2, 2, 2), pix))
    lab = _write(tmp_path, "l", _idx_bytes(0x801, (2,), [3, 9]))
    ds = load_idx(img, lab)
    np.testing.assert_array_equal(ds.inputs.ravel(), np.array(pix) / 255.0)
    assert ds.inputs[0, 1] == 1.0


def test_gzip_round_trip(tmp_path):
    a = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.gz", a)
    np.testing.assert_array_equal(read_idx(tmp_path / "a.gz", 0x803), a)
    write_idx(tmp_path / "b.gz", a)
    assert (tmp_path / "a.gz").read_bytes() == (tmp_path / "b.gz").read_bytes()


@pytest.mark.parametrize(
    "data, err",
    [
        (_idx_bytes(0x801, (1, 2, 2), [0] * 4), BadMagicError),
        (b"\x00\x00", TruncatedError),
        (struct.pack(">I", 0x803) + b"\x00\x00\x00\x01", TruncatedError),
        (_idx_bytes(0x803, (2, 2, 2), [0] * 7), TruncatedError),
        (_idx_bytes(0x803, (1, 2, 2), [0] * 5), TrailingBytesError),
    ],
)
def test_malformed_images_raise_distinct_errors(tmp_path, data, err):
    with pytest.raises(err):
        read_idx(_write(tmp_path, "x", data), 0x803)


def test_count_mismatch(tmp_path):
    img = _write(tmp_path, "i", _idx_bytes(0x803, (2, 1, 1), [0, 1]))
    lab = _write(tmp_path, "l", _idx_bytes(0x801, (1,), [0]))
    with pytest.raises(CountMismatchError):
        load_idx(img, lab)


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        read_idx(tmp_path / "nope", 0x803)


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.array([[1.5]]), [0], 2)
    with pytest.raises(DataError):
        Dataset(np.array([[0.5]]), [2], 2)
    with pytest.raises(DataError):
        Dataset(np.array([[0.5], [0.1]]), [0], 2)
    ds = Dataset(np.array([[0.5, 0.1]]), [1], 2)
    np.testing.assert_array_equal(ds.one_hot(), [[0.0, 1.0]])
    with pytest.raises(ValueError):
        ds.inputs[0, 0] = 0.0


def test_blobs_deterministic_and_in_range():
    a = synth_blobs(3, 50, 4, 0.1, seed=7)
    b = synth_blobs(3, 50, 4, 0.1, seed=7)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0
    np.testing.assert_array_equal(a.class_counts(), [50, 50, 50])
    c = synth_blobs(3, 50, 4, 0.1, seed=8)
    assert c.inputs.tobytes() != a.inputs.tobytes()


def test_blob_variance_shrinks_with_spread():
    vs = []
    for spread in (0.1, 0.01, 0.001):
        ds = synth_blobs(2, 200, 3, spread, seed=0)
        vs.append(max(ds.inputs[ds.labels == c].var(axis=0).max() for c in range(2)))
    assert vs[0] > vs[1] > vs[2] and vs[2] < 1e-5


@pytest.mark.parametrize("args", [(1, 5, 2, 0.1), (2, 5, 1, 0.1), (2, 5, 2, 0.0)])
def test_blobs_reject_bad_params(args):
    with pytest.raises(ValueError):
        synth_blobs(*args, seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**16))
def test_subset_balance_is_exact(m, seed):
    ds = synth_blobs(3, 12, 2, 0.1, seed=1)
    sub = subset(ds, m, seed)
    np.testing.assert_array_equal(sub.class_counts(), [m, m, m])


def test_split_parts_are_disjoint():
    ds = synth_blobs(3, 30, 5, 0.1, seed=0)
    parts = stratified_split(ds, [10, 5, 15], seed=4)
    rows = [set(map(bytes, (p.inputs.tobytes()[i * 40 : (i + 1) * 40] for i in range(len(p))))) for p in parts]
    assert sum(len(r) for r in rows) == 90
    assert len(rows[0] | rows[1] | rows[2]) == 90
    with pytest.raises(DataError):
        stratified_split(ds, [20, 20], seed=0)


def test_csv_round_trip_is_exact(tmp_path):
    ds = synth_blobs(2, 10, 3, 0.2, seed=5)
    to_csv(ds, tmp_path / "d.csv")
    head = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert head == "label,x0,x1,x2"
    back = from_csv(tmp_path / "d.csv", 2)
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_csv_malformed(tmp_path):
    (tmp_path / "bad.csv").write_text("label,x0\n0,abc\n")
    with pytest.raises(DataError):
        from_csv(tmp_path / "bad.csv", 2)
    (tmp_path / "nohead.csv").write_text("0,0.5\n")
    with pytest.raises(DataError):
        from_csv(tmp_path / "nohead.csv", 2)
