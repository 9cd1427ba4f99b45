import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignscope.dataio import (
    CIFAR_RECORD,
    Dataset,
    load_cifar10,
    read_grad_dump,
    shuffle_labels,
    synth_blobs,
    write_grad_dump,
)
from alignscope.errors import FormatError, InvalidParameterError
from alignscope.numkit import Rng
from oracles import perceptron_separable


def test_dataset_invariants():
    with pytest.raises(InvalidParameterError):
        Dataset(np.ones((3, 2)), [0, 1, 3], 3)
    with pytest.raises(InvalidParameterError):
        Dataset(np.array([[np.inf, 0.0]]), [0], 2)
    ds = Dataset(np.ones((3, 2)), [0, 1, 2], 3)
    assert not ds.inputs.flags.writeable and ds.n == 3 and ds.dim == 2


def test_blobs_noise_free_and_deterministic():
    ds = synth_blobs(3, 5, 4, 1.0, 0.0, Rng(0))
    for c in range(3):
        pts = ds.inputs[ds.labels == c]
        assert np.all(pts == pts[0])
    again = synth_blobs(3, 5, 4, 1.0, 0.0, Rng(0))
    assert np.array_equal(ds.inputs, again.inputs)
    with pytest.raises(InvalidParameterError):
        synth_blobs(3, 0, 4, 1.0, 0.1, Rng(0))


def test_blobs_separable_when_centres_dominate():
    ds = synth_blobs(2, 100, 5, 5.0, 0.1, Rng(1))
    assert perceptron_separable(ds.inputs, ds.labels)


def test_blobs_shared_centres_for_splits():
    from alignscope.dataio import blob_centers

    centres = blob_centers(4, 6, 2.0, Rng(2))
    a = synth_blobs(4, 300, 6, 2.0, 0.1, Rng(3), centres)
    b = synth_blobs(4, 300, 6, 2.0, 0.1, Rng(4), centres, "test")
    for c in range(4):
        assert np.allclose(a.inputs[a.labels == c].mean(axis=0), b.inputs[b.labels == c].mean(axis=0), atol=0.05)
    assert b.split == "test"


def _cifar_bytes(labels, pixel_fn):
    out = bytearray()
    for i, lab in enumerate(labels):
        out.append(lab)
        out.extend(bytes(pixel_fn(i)))
    return bytes(out)


def test_cifar_single_record(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    f.write_bytes(_cifar_bytes([7], lambda i: [255] * 3072))
    t = tmp_path / "test_batch.bin"
    t.write_bytes(_cifar_bytes([1, 2], lambda i: [i * 50] * 3072))
    train, test = load_cifar10([f, t], None, Rng(0))
    assert train.n == 1 and train.labels[0] == 7 and np.all(train.inputs == 1.0)
    assert test.n == 2 and list(test.labels) == [1, 2] and test.split == "test"
    assert test.inputs.min() >= 0 and test.inputs.max() <= 1


def test_cifar_channel_planes_in_file_order(tmp_path):
    f = tmp_path / "data_batch_1.bin"
    f.write_bytes(_cifar_bytes([0], lambda i: [10] * 1024 + [20] * 1024 + [30] * 1024))
    t = tmp_path / "test_batch.bin"
    t.write_bytes(_cifar_bytes([0], lambda i: [0] * 3072))
    train, _ = load_cifar10([f, t], None, Rng(0))
    assert np.allclose(train.inputs[0, :1024], 10 / 255) and np.allclose(train.inputs[0, 2048:], 30 / 255)


def test_cifar_format_errors(tmp_path):
    t = tmp_path / "test_batch.bin"
    t.write_bytes(_cifar_bytes([0], lambda i: [0] * 3072))
    short = tmp_path / "data_batch_1.bin"
    short.write_bytes(b"\x00" * 3072)
    with pytest.raises(FormatError) as e:
        load_cifar10([short, t], None, Rng(0))
    assert e.value.offset == 0
    two_and_bit = tmp_path / "data_batch_2.bin"
    two_and_bit.write_bytes(b"\x01" * (2 * CIFAR_RECORD + 5))
    with pytest.raises(FormatError) as e:
        load_cifar10([two_and_bit, t], None, Rng(0))
    assert e.value.offset == 2 * CIFAR_RECORD
    bad_label = tmp_path / "data_batch_3.bin"
    bad_label.write_bytes(_cifar_bytes([3, 12], lambda i: [0] * 3072))
    with pytest.raises(FormatError) as e:
        load_cifar10([bad_label, t], None, Rng(0))
    assert e.value.offset == CIFAR_RECORD


def test_cifar_full_file_histogram(tmp_path):
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 10, size=10_000).astype(np.uint8)
    pixels = rng.integers(0, 256, size=(10_000, 3072)).astype(np.uint8)
    blob = np.hstack([labels[:, None], pixels]).tobytes()
    f = tmp_path / "data_batch_1.bin"
    f.write_bytes(blob)
    t = tmp_path / "test_batch.bin"
    t.write_bytes(blob)
    train, test = load_cifar10([f, t], None, Rng(0))
    # byte-level scan, independent of the loader
    raw = f.read_bytes()
    counts = [0] * 10
    for off in range(0, len(raw), CIFAR_RECORD):
        counts[raw[off]] += 1
    assert test.n == 10_000
    assert list(np.bincount(train.labels, minlength=10)) == counts
    sub, _ = load_cifar10([f, t], 500, Rng(1))
    sub2, _ = load_cifar10([f, t], 500, Rng(1))
    assert sub.n == 500 and np.array_equal(sub.inputs, sub2.inputs)


def test_shuffle_labels():
    ds = synth_blobs(10, 1000, 3, 1.0, 0.5, Rng(0))
    assert shuffle_labels(ds, 0.0, Rng(1)) is ds
    sh = shuffle_labels(ds, 1.0, Rng(1))
    assert np.array_equal(sh.inputs, ds.inputs)
    same = int((sh.labels == ds.labels).sum())
    n, p = ds.n, 0.1
    assert abs(same - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    assert np.array_equal(sh.labels, shuffle_labels(ds, 1.0, Rng(1)).labels)
    half = shuffle_labels(ds, 0.5, Rng(2))
    changed = int((half.labels != ds.labels).sum())
    assert changed <= ds.n // 2
    with pytest.raises(InvalidParameterError):
        shuffle_labels(ds, 1.5, Rng(0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20), st.integers(0, 9), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_grad_dump_round_trip(tmp_path_factory, n, d, k, seed):
    path = tmp_path_factory.mktemp("dump") / "g.pegd"
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d)) * 10.0 ** rng.integers(-300, 300, size=(n, d))
    y = rng.integers(0, k, size=n)
    write_grad_dump(path, g, y, k)
    back = read_grad_dump(path)
    assert back.grads.tobytes() == g.tobytes() and np.array_equal(back.labels, y) and back.k == k


def test_grad_dump_layout_and_errors(tmp_path):
    p = tmp_path / "g.pegd"
    write_grad_dump(p, np.zeros((0, 3)), np.zeros(0, dtype=int), 2)
    empty = read_grad_dump(p)
    assert empty.n == 0 and empty.d == 3
    write_grad_dump(p, [[1.5]], [1], 2)
    raw = p.read_bytes()
    assert raw[:4] == b"PEGD" and len(raw) == 4 + 4 + 24 + 8 + 8
    assert raw[32:40] == np.float64(1.5).astype("<f8").tobytes()
    bad = tmp_path / "bad.pegd"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        read_grad_dump(bad)
    bad.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        read_grad_dump(bad)
    bad.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_grad_dump(bad)
    with pytest.raises(InvalidParameterError):
        write_grad_dump(p, [[1.0]], [2], 2)
