import gzip
import itertools
import json
import struct

import numpy as np
import pytest

from pfeddsu.data import (Dataset, DatasetFormatError, deal_classes, load_cifar_binary, load_idx_gzip,
                          partition_by_classes, synth_classification, write_cifar_binary, write_idx_gzip)
from pfeddsu.tensor import Rng


def greedy_dealer(num_clients, num_classes, s, rng):
    """Walk one shuffled cycle of classes, handing each client its next s entries."""
    order = rng.generator().permutation(num_classes)
    stream = itertools.cycle(order.tolist())
    return [[next(stream) for _ in range(s)] for _ in range(num_clients)]


def test_dealer_matches_greedy_oracle():
    data = synth_classification(10, 40, 4, 1.0, Rng(0))
    plan = partition_by_classes(data, 20, 5, Rng(9))
    assert plan.client_classes == greedy_dealer(20, 10, 5, Rng(9))
    assert deal_classes(20, 10, 5, Rng(9).generator()) == plan.client_classes


@pytest.mark.parametrize("n,k,s", [(2, 4, 2), (20, 10, 2), (20, 10, 5), (7, 10, 3), (5, 10, 10), (3, 4, 9)])
def test_partition_soundness(n, k, s):
    data = synth_classification(k, 50, 3, 1.0, Rng(1))
    plan = partition_by_classes(data, n, s, Rng(2))
    seen = np.concatenate([plan.train_indices[i] + plan.test_indices[i] for i in range(n)])
    assert len(seen) == len(set(seen.tolist()))
    assert len(seen) + plan.dropped == len(data)
    for shard in plan.shards(data):
        assert len(shard.classes) == min(s, k)
        assert set(np.unique(shard.test.labels).tolist()) == shard.classes
        assert len(shard.train) + len(shard.test) == plan.shard_size * min(s, k)


def test_full_class_coverage_is_iid_like():
    data = synth_classification(4, 40, 3, 1.0, Rng(1))
    plan = partition_by_classes(data, 4, 4, Rng(2))
    for shard in plan.shards(data):
        assert np.array_equal(np.bincount(shard.train.labels, minlength=4),
                              np.full(4, shard.train.labels.size // 4))


def test_infeasible_partition_explains():
    data = synth_classification(4, 3, 3, 1.0, Rng(1))
    with pytest.raises(ValueError, match="infeasible"):
        partition_by_classes(data, 10, 2, Rng(2))
    with pytest.raises(ValueError):
        partition_by_classes(data, 2, 2, Rng(2), train_fraction=1.0)


def test_partition_plan_json_and_determinism():
    data = synth_classification(6, 20, 3, 1.0, Rng(1))
    a = partition_by_classes(data, 4, 3, Rng(5))
    b = partition_by_classes(data, 4, 3, Rng(5))
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["classes_per_client"] == 3 and len(doc["train_indices"]) == 4


def test_synthetic_determinism_and_balance():
    a = synth_classification(5, 7, 3, 2.0, Rng(3))
    b = synth_classification(5, 7, 3, 2.0, Rng(3))
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert np.array_equal(np.bincount(a.labels), np.full(5, 7))


def _lda_accuracy(train, test):
    k = train.num_classes
    means = np.stack([train.inputs[train.labels == c].mean(0) for c in range(k)])
    cov = np.cov((train.inputs - means[train.labels]).T)
    prec = np.linalg.inv(cov)
    w = means @ prec
    b = -0.5 * np.einsum("kd,kd->k", w, means)
    return float(np.mean(np.argmax(test.inputs @ w.T + b, 1) == test.labels))


def test_well_separated_blobs_are_linearly_separable():
    train = synth_classification(10, 200, 16, 10.0, Rng(4))
    test = synth_classification(10, 100, 16, 10.0, Rng(4))  # same means, fresh draws below
    gen = np.random.default_rng(5)
    means = np.stack([train.inputs[train.labels == c].mean(0) for c in range(10)])
    test = Dataset(means[test.labels] + gen.standard_normal(test.inputs.shape), test.labels, 10)
    assert _lda_accuracy(train, test) >= 0.95


def test_zero_separation_is_chance_level():
    train = synth_classification(10, 300, 8, 0.0, Rng(6))
    test = synth_classification(10, 300, 8, 0.0, Rng(7))
    assert abs(_lda_accuracy(train, test) - 0.1) < 0.03


def _idx_files(tmp_path, n=4, side=28, label_count=None, magic=0x803, gz=True):
    gen = np.random.default_rng(0)
    pix = gen.integers(0, 256, (n, side, side), dtype=np.uint8)
    labels = np.arange(n, dtype=np.uint8) % 10
    img = struct.pack(">IIII", magic, n, side, side) + pix.tobytes()
    lab = struct.pack(">II", 0x801, label_count or n) + labels[: (label_count or n)].tobytes()
    ip, lp = tmp_path / "img.gz", tmp_path / "lab.gz"
    ip.write_bytes(gzip.compress(img) if gz else img)
    lp.write_bytes(gzip.compress(lab) if gz else lab)
    return ip, lp, pix, labels


def test_idx_fixture_loads(tmp_path):
    ip, lp, pix, labels = _idx_files(tmp_path)
    ds = load_idx_gzip(ip, lp)
    assert len(ds) == 4 and ds.dim == 784 and ds.inputs.max() <= 1.0
    assert np.array_equal(ds.inputs[2], pix[2].ravel() / 255.0)
    assert np.array_equal(ds.labels, labels) and ds.provenance == "idx-file"


def test_idx_raw_files_also_load(tmp_path):
    ip, lp, _, _ = _idx_files(tmp_path, gz=False)
    assert len(load_idx_gzip(ip, lp)) == 4


def test_idx_bad_magic(tmp_path):
    ip, lp, _, _ = _idx_files(tmp_path, magic=0x804)
    with pytest.raises(DatasetFormatError) as e:
        load_idx_gzip(ip, lp)
    assert e.value.offset == 0


def test_idx_count_mismatch(tmp_path):
    ip, lp, _, _ = _idx_files(tmp_path, label_count=3)
    with pytest.raises(DatasetFormatError, match="count mismatch"):
        load_idx_gzip(ip, lp)


def test_idx_truncated_payload(tmp_path):
    ip, lp, _, _ = _idx_files(tmp_path)
    raw = gzip.decompress(ip.read_bytes())
    ip.write_bytes(gzip.compress(raw[:-10]))
    with pytest.raises(DatasetFormatError, match="payload"):
        load_idx_gzip(ip, lp)


def test_idx_round_trip_bytes(tmp_path):
    ip, lp, _, _ = _idx_files(tmp_path)
    ds = load_idx_gzip(ip, lp)
    write_idx_gzip(ds, tmp_path / "a.gz", tmp_path / "b.gz")
    assert gzip.decompress((tmp_path / "a.gz").read_bytes()) == gzip.decompress(ip.read_bytes())
    assert gzip.decompress((tmp_path / "b.gz").read_bytes()) == gzip.decompress(lp.read_bytes())


def test_cifar_two_record_fixture(tmp_path):
    rec0 = bytes([3]) + bytes([255] * 3072)
    rec1 = bytes([7]) + bytes(range(256)) * 12
    (tmp_path / "c.bin").write_bytes(rec0 + rec1)
    ds = load_cifar_binary(tmp_path / "c.bin")
    assert ds.inputs.shape == (2, 3072) and np.array_equal(ds.labels, [3, 7])
    assert np.all(ds.inputs[0] == 1.0)
    write_cifar_binary(ds, tmp_path / "d.bin")
    assert (tmp_path / "d.bin").read_bytes() == rec0 + rec1


def test_cifar100_label_bytes(tmp_path):
    recs = bytes([4, 42]) + bytes(3072) + bytes([19, 99]) + bytes(3072)
    (tmp_path / "c.bin").write_bytes(recs)
    fine = load_cifar_binary(tmp_path / "c.bin", "fine")
    coarse = load_cifar_binary(tmp_path / "c.bin", "coarse")
    assert fine.labels.tolist() == [42, 99] and coarse.labels.tolist() == [4, 19]
    write_cifar_binary(fine, tmp_path / "d.bin", coarse_labels=coarse.labels)
    assert (tmp_path / "d.bin").read_bytes() == recs


def test_cifar_bad_size(tmp_path):
    (tmp_path / "c.bin").write_bytes(bytes(3073 + 5))
    with pytest.raises(DatasetFormatError):
        load_cifar_binary(tmp_path / "c.bin")
    with pytest.raises(ValueError):
        load_cifar_binary(tmp_path / "c.bin", "cifar200")


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), np.array([0, 3]), 3)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan]]), np.array([0]), 1)
