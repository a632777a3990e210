from collections import Counter

import numpy as np
import pytest

from tacit.dataset import (
    HEADER,
    BadMagicError,
    CorruptShardError,
    EpochPlan,
    MixedResolutionError,
    TruncatedFileError,
    VersionMismatchError,
    generate_dataset,
    heldout_pairs,
    iter_epoch,
    list_shards,
    read_batch,
    record_bytes,
    sample_seed,
    write_batch,
)
from tacit.maze import generate_pair


def _same(a, b):
    return (
        a.size == b.size
        and a.seed == b.seed
        and np.array_equal(a.input, b.input)
        and np.array_equal(a.target, b.target)
    )


def test_round_trip(tmp_path):
    samples = [generate_pair(11, s, 32) for s in range(10)]
    path = tmp_path / "batch_00000.tacd"
    write_batch(samples, path)
    back = read_batch(path)
    assert len(back) == 10
    assert all(_same(a, b) for a, b in zip(samples, back))


def test_empty_batch(tmp_path):
    path = tmp_path / "e.tacd"
    write_batch([], path, resolution=64)
    assert read_batch(path) == []
    assert path.stat().st_size == HEADER.size


def test_file_size_formula():
    # header 12 bytes, record 2 + 8 + 2 * 64 * 64 * 3
    assert HEADER.size == 12
    assert record_bytes(64) == 24_586
    assert HEADER.size + 10_000 * record_bytes(64) == 245_860_012


def test_file_size_on_disk(tmp_path):
    samples = [generate_pair(11, s, 64) for s in range(3)]
    write_batch(samples, tmp_path / "b.tacd")
    assert (tmp_path / "b.tacd").stat().st_size == 12 + 3 * 24_586


def test_seed_u64_round_trip(tmp_path):
    s = generate_pair(5, 2**64 - 1, 16)
    write_batch([s], tmp_path / "b.tacd")
    assert read_batch(tmp_path / "b.tacd")[0].seed == 2**64 - 1


def test_mixed_resolution_rejected(tmp_path):
    with pytest.raises(MixedResolutionError):
        write_batch([generate_pair(11, 0, 32), generate_pair(11, 1, 64)], tmp_path / "m.tacd")


def test_format_errors_are_distinct(tmp_path):
    good = tmp_path / "g.tacd"
    write_batch([generate_pair(5, 0, 16)], good)
    raw = good.read_bytes()

    (tmp_path / "magic.tacd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_batch(tmp_path / "magic.tacd")

    (tmp_path / "ver.tacd").write_bytes(raw[:4] + (7).to_bytes(2, "little") + raw[6:])
    with pytest.raises(VersionMismatchError):
        read_batch(tmp_path / "ver.tacd")

    (tmp_path / "trunc.tacd").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        read_batch(tmp_path / "trunc.tacd")

    (tmp_path / "short.tacd").write_bytes(raw[:6])
    with pytest.raises(TruncatedFileError):
        read_batch(tmp_path / "short.tacd")


def _shards(tmp_path, n_shards, per_shard, res=16):
    seed = 0
    for k in range(n_shards):
        samples = [generate_pair(5, seed + i, res) for i in range(per_shard)]
        seed += per_shard
        write_batch(samples, tmp_path / f"batch_{k:05d}.tacd")
    return Counter(range(seed))


def test_iter_epoch_batches_and_exactly_once(tmp_path):
    expected = _shards(tmp_path, 3, 4)
    batches = list(iter_epoch(tmp_path, 5, 0, 11))
    assert [len(b) for b in batches] == [5, 5, 2]
    assert Counter(s.seed for b in batches for s in b) == expected


def test_epochs_reorder_but_keep_multiset(tmp_path):
    expected = _shards(tmp_path, 3, 4)
    e0 = [s.seed for b in iter_epoch(tmp_path, 5, 0, 11) for s in b]
    e1 = [s.seed for b in iter_epoch(tmp_path, 5, 1, 11) for s in b]
    again = [s.seed for b in iter_epoch(tmp_path, 5, 0, 11) for s in b]
    assert e0 != e1
    assert e0 == again
    assert Counter(e0) == Counter(e1) == expected


def test_single_sample_dataset(tmp_path):
    write_batch([generate_pair(5, 3, 16)], tmp_path / "batch_00000.tacd")
    batches = list(iter_epoch(tmp_path, 8, 0, 0))
    assert len(batches) == 1 and len(batches[0]) == 1


def test_at_most_two_shards_resident(tmp_path):
    _shards(tmp_path, 6, 10)
    stream = iter_epoch(tmp_path, 4, 2, 5)
    n = sum(len(b) for b in stream)
    assert n == 60
    assert stream.peak_resident <= 2
    assert stream.peak_resident_samples <= 2 * 10


def test_epoch_plan_is_a_permutation(tmp_path):
    _shards(tmp_path, 5, 1)
    shards = list_shards(tmp_path)
    plan = EpochPlan.make(shards, 3, 9)
    assert sorted(plan.shard_order) == shards
    assert EpochPlan.make(shards, 3, 9) == plan


def test_corrupt_shard_mid_epoch_names_file(tmp_path):
    _shards(tmp_path, 3, 4)
    bad = tmp_path / "batch_00001.tacd"
    bad.write_bytes(bad.read_bytes()[:40])
    with pytest.raises(CorruptShardError) as info:
        for _ in iter_epoch(tmp_path, 2, 0, 0):
            pass
    assert info.value.path == bad
    assert "batch_00001.tacd" in str(info.value)


def test_generate_dataset_and_heldout_are_disjoint(tmp_path):
    paths = generate_dataset(tmp_path, 25, [11, 15], seed=3, resolution=32, shard_size=10)
    assert [p.name for p in paths] == ["batch_00000.tacd", "batch_00001.tacd", "batch_00002.tacd"]
    train_seeds = {s.seed for p in paths for s in read_batch(p)}
    assert len(train_seeds) == 25
    assert all(s < 2**63 for s in train_seeds)
    held = heldout_pairs(8, [11], 32)
    assert not train_seeds & {s.seed for s in held}
    assert sample_seed(3, 0) == sample_seed(3, 0) != sample_seed(4, 0)
