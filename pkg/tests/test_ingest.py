import gzip
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_array_equal

from rotinv import ingest
from rotinv.ingest import (BY_CLASS, BY_IDENTITY, DatasetError, IdxError, PreprocessConfig, RawDataset, SplitSpec,
                           parse_idx, preprocess_face, split_by_identity, split_by_labels, write_idx)


def digits_like(n_per=6, classes=10, side=4, seed=0):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), n_per)
    return RawDataset(r.random((len(labels), side, side)).astype(np.float32), labels, "toy")


def faces_like(counts, seed=0):
    labels = np.concatenate([[f"id{k:03d}"] * c for k, c in enumerate(counts)]).astype(object)
    imgs = np.random.default_rng(seed).random((len(labels), 3, 3)).astype(np.float32)
    return RawDataset(imgs, labels, "faces")


# -- IDX -------------------------------------------------------------------------------

def test_idx_u8_cube():
    buf = bytes.fromhex("00000803") + struct.pack(">3I", 2, 2, 2) + bytes(range(8))
    arr, dims = parse_idx(buf)
    assert dims == [2, 2, 2]
    assert_array_equal(arr, np.arange(8, dtype=np.uint8).reshape(2, 2, 2))


def test_idx_label_vector():
    arr, dims = parse_idx(bytes.fromhex("00000801") + struct.pack(">I", 3) + b"\x01\x02\x03")
    assert dims == [3]
    assert arr.tolist() == [1, 2, 3]


def test_idx_empty_buffer():
    with pytest.raises(IdxError, match="truncated header") as err:
        parse_idx(b"")
    assert err.value.offset == 0


@pytest.mark.parametrize("buf,what,offset", [
    (b"\x01\x00\x08\x01" + struct.pack(">I", 1) + b"\x00", "magic", 0),
    (b"\x00\x00\x07\x01" + struct.pack(">I", 1) + b"\x00", "type code", 2),
    (b"\x00\x00\x08\x02" + struct.pack(">I", 1), "truncated header", 8),
    (b"\x00\x00\x08\x01" + struct.pack(">I", 4) + b"\x00", "truncated payload", 9),
    (b"\x00\x00\x08\x01" + struct.pack(">I", 1) + b"\x00\x00", "trailing", 9),
    (b"\x00\x00\x0e\x03" + struct.pack(">3I", 2 ** 32 - 1, 2 ** 32 - 1, 2 ** 32 - 1), "overflow", 4),
])
def test_idx_errors_carry_offsets(buf, what, offset):
    with pytest.raises(IdxError, match=what) as err:
        parse_idx(buf)
    assert err.value.offset == offset


def test_idx_big_endian_types():
    arr = np.array([[1.5, -2.0]], dtype=">f4")
    buf = bytes.fromhex("00000d02") + struct.pack(">2I", 1, 2) + arr.tobytes()
    out, _ = parse_idx(buf)
    assert out.dtype == np.float32 and out.tolist() == [[1.5, -2.0]]


@settings(max_examples=50)
@given(hnp.arrays(st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
                  hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)))
def test_idx_round_trip(arr):
    out, dims = parse_idx(write_idx(arr))
    assert dims == list(arr.shape)
    assert out.dtype == arr.dtype
    assert_array_equal(out, arr)


def test_idx_file_gzip(tmp_path):
    path = tmp_path / "x.idx.gz"
    path.write_bytes(gzip.compress(write_idx(np.arange(6, dtype=np.uint8).reshape(2, 3))))
    assert ingest.read_idx_file(path).shape == (2, 3)


def test_load_idx_dataset_normalizes(tmp_path):
    (tmp_path / "i").write_bytes(write_idx(np.array([[[0, 255], [51, 102]]], dtype=np.uint8)))
    (tmp_path / "l").write_bytes(write_idx(np.array([7], dtype=np.uint8)))
    ds = ingest.load_idx_dataset(tmp_path / "i", tmp_path / "l", "d")
    assert ds.images.dtype == np.float32
    assert ds.images.max() == 1.0 and ds.images.min() == 0.0
    assert ds.labels.tolist() == [7]


def test_find_idx_corpus(tmp_path):
    assert ingest.find_idx_corpus(tmp_path) is None
    for stem in ingest.IDX_TRAIN_FILES:
        (tmp_path / (stem + ".gz")).write_bytes(b"")
    assert ingest.find_idx_corpus(tmp_path)[0].name == "train-images-idx3-ubyte.gz"


def test_raw_dataset_invariants():
    with pytest.raises(DatasetError):
        RawDataset(np.zeros((2, 3, 3)), np.zeros(3), "x")
    with pytest.raises(DatasetError):
        RawDataset(np.full((1, 2, 2), 1.5), np.zeros(1), "x")


# -- splits ------------------------------------------------------------------------------------

def test_split_by_labels_halves():
    ds = digits_like()
    X1, X2 = split_by_labels(ds, SplitSpec(BY_CLASS, {0, 1, 2, 3, 4}))
    assert set(X1.labels.tolist()) == {0, 1, 2, 3, 4}
    assert set(X2.labels.tolist()) == {5, 6, 7, 8, 9}
    assert len(X1) + len(X2) == len(ds)
    assert X1.provenance["side"] == "X1" and X2.provenance["side"] == "X2"
    assert X2.provenance["train_labels"] == [0, 1, 2, 3, 4]


def test_split_single_class():
    X1, X2 = split_by_labels(digits_like(), SplitSpec(BY_CLASS, {0}))
    assert X1.classes == [0] and len(X2.classes) == 9


def test_split_rejects_full_and_unknown_classes():
    with pytest.raises(DatasetError, match="every class"):
        split_by_labels(digits_like(), SplitSpec(BY_CLASS, set(range(10))))
    with pytest.raises(DatasetError, match="do not occur"):
        split_by_labels(digits_like(), SplitSpec(BY_CLASS, {11}))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=40), st.integers(0, 2 ** 32), st.integers(1, 9))
def test_identity_split_closed_and_total(counts, seed, tenths):
    ds = faces_like(counts)
    frac = Fraction(tenths, 10)
    spec = SplitSpec(BY_IDENTITY, test_fraction=frac, seed=seed)
    try:
        X1, X2 = split_by_identity(ds, spec)
    except DatasetError:
        # only possible when the fraction swallows every identity
        return
    a, b = set(X1.labels.tolist()), set(X2.labels.tolist())
    assert not a & b
    assert len(X1) + len(X2) == len(ds)
    assert len(X2) >= frac * len(ds)
    assert a and b


def test_identity_split_deterministic_and_even():
    ds = faces_like([5, 5])
    X1, X2 = split_by_identity(ds, SplitSpec(BY_IDENTITY, test_fraction=Fraction(1, 2), seed=3))
    assert len(X1.classes) == 1 and len(X2.classes) == 1
    again = split_by_identity(ds, SplitSpec(BY_IDENTITY, test_fraction=Fraction(1, 2), seed=3))[1]
    assert_array_equal(X2.images, again.images)
    assert X2.labels.tolist() == again.labels.tolist()


def test_identity_split_single_identity():
    with pytest.raises(DatasetError):
        split_by_identity(faces_like([4]), SplitSpec(BY_IDENTITY, seed=0))


def test_identity_split_smallest_closed_set():
    counts = np.random.default_rng(0).integers(1, 8, 300).tolist()
    ds = faces_like(counts)
    X1, X2 = split_by_identity(ds, SplitSpec(BY_IDENTITY, seed=9))
    need = Fraction(1, 10) * len(ds)
    assert len(X2) >= need
    # every identity in X2 was needed: removing the most recently added one falls below the target
    ids = np.unique(ds.labels)
    order = ids[np.random.Generator(np.random.PCG64(9)).permutation(len(ids))]
    last = [i for i in order if i in set(X2.labels.tolist())][-1]
    assert len(X2) - int((X2.labels == last).sum()) < need


# -- preprocessing -------------------------------------------------------------------------------

def test_face_preprocess_geometry():
    img = np.random.default_rng(1).uniform(0.1, 1.0, (250, 250))
    out = preprocess_face(img, PreprocessConfig())
    assert out.shape == (72, 72)
    frame = np.ones((72, 72), bool)
    frame[11:61, 11:61] = False
    assert_array_equal(out[frame], 0.0)
    assert (out[11:61, 11:61] > 0).all()
    assert out.min() >= 0 and out.max() <= 1


def test_face_preprocess_box_filter():
    # a 150-px crop of a 250 image downsampled by 3: each output pixel is a 3x3 mean
    img = np.random.default_rng(2).random((250, 250))
    out = preprocess_face(img, PreprocessConfig())
    crop = img[50:200, 50:200]
    expect = crop.reshape(50, 3, 50, 3).mean(axis=(1, 3))
    np.testing.assert_allclose(out[11:61, 11:61], expect.astype(np.float32), rtol=1e-6)


def test_face_preprocess_zero_and_identity():
    assert_array_equal(preprocess_face(np.zeros((250, 250)), PreprocessConfig()), 0.0)
    img = np.random.default_rng(3).random((40, 40)).astype(np.float32)
    assert_array_equal(preprocess_face(img, PreprocessConfig(1.0, 40, 40)), img)


def test_face_preprocess_errors():
    with pytest.raises(DatasetError):
        preprocess_face(np.zeros((60, 60)), PreprocessConfig())
    with pytest.raises(ValueError):
        PreprocessConfig(pad_to=40)


def test_non_integer_area_ratio_preserves_mean():
    img = np.random.default_rng(4).random((37, 37))
    out = ingest.area_downsample(img, 10)
    assert abs(out.mean() - img.mean()) < 1e-12


def test_face_directory(tmp_path):
    r = np.random.default_rng(0)
    for ident in ("alice", "bob"):
        (tmp_path / ident).mkdir()
        for k in range(3):
            ingest.write_pgm(tmp_path / ident / f"{k}.pgm", r.random((100, 90)))
    ds = ingest.load_face_dir(tmp_path, PreprocessConfig(0.6, 50, 72))
    assert ds.images.shape == (6, 72, 72)
    assert sorted(set(ds.labels.tolist())) == ["alice", "bob"]


def test_pgm_round_trip(tmp_path):
    px = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    ingest.write_pgm(tmp_path / "a.pgm", px / 255)
    assert_array_equal(np.round(ingest.read_pgm(tmp_path / "a.pgm") * 255), px)
    (tmp_path / "b.pgm").write_bytes(b"P2\n# c\n2 1\n10\n0 10\n")
    assert ingest.read_pgm(tmp_path / "b.pgm").tolist() == [[0.0, 1.0]]


# -- cache ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("ds", [digits_like(2), faces_like([2, 1, 3])])
def test_cache_round_trip(ds, tmp_path):
    ingest.save_dataset(ds, tmp_path / "c.ivlb")
    back = ingest.load_dataset(tmp_path / "c.ivlb")
    assert_array_equal(back.images, ds.images)
    assert back.labels.tolist() == ds.labels.tolist()
    assert back.name == ds.name
    raw = (tmp_path / "c.ivlb").read_bytes()
    assert raw[:4] == b"IVLB"
    assert struct.unpack("<IIHH", raw[4:16]) == (1, len(ds), ds.side, ds.side)
    assert ingest.dataset_to_bytes(back) == raw


def test_cache_corruption_detected(tmp_path):
    raw = bytearray(ingest.dataset_to_bytes(digits_like(1)))
    raw[20] ^= 0xFF
    with pytest.raises(DatasetError):
        ingest.dataset_from_bytes(bytes(raw))
