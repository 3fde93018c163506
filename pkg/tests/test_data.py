import numpy as np
import pytest

from ticl.data import (CIFAR_MEAN, DataError, LabeledImageSet, ScenarioSpec, StepData, batch_iterator,
                       denormalize, make_synthetic, normalize, read_records, record_size, split_scenario,
                       write_records)


def test_two_record_byte_round_trip(tmp_path):
    side, ch = 2, 3
    raw = bytes([4, 17] + list(range(12)) + [9, 99] + list(range(200, 212)))
    assert len(raw) == 2 * record_size(side, ch)
    src = tmp_path / "two.bin"
    src.write_bytes(raw)
    ds = read_records(src, image_side=side, channels=ch, expected=2)
    np.testing.assert_array_equal(ds.labels, [17, 99])
    np.testing.assert_array_equal(ds.images[0, 1], [[4, 5], [6, 7]])
    dst = tmp_path / "copy.bin"
    write_records(dst, ds)
    assert dst.read_bytes() == raw


def test_read_errors(tmp_path):
    with pytest.raises(DataError):
        read_records(tmp_path / "absent.bin")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 7)
    with pytest.raises(DataError):
        read_records(bad, image_side=2, channels=1)
    ok = tmp_path / "ok.bin"
    ok.write_bytes(bytes([0, 1, 0, 0, 0, 0]))
    with pytest.raises(DataError):
        read_records(ok, image_side=2, channels=1, expected=2)
    with pytest.raises(DataError):
        read_records(ok, image_side=2, channels=1, class_count=1)


def test_synthetic_determinism_and_counts():
    a = make_synthetic(4, 5, image_side=8, seed=3)
    b = make_synthetic(4, 5, image_side=8, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert len(a) == 20 and (a.class_counts() == 5).all()
    test = make_synthetic(4, 5, image_side=8, seed=3, split="test")
    assert test.images.tobytes() != a.images.tobytes()


def test_linear_probe_separates_two_classes():
    train = make_synthetic(2, 100, image_side=16, seed=0)
    test = make_synthetic(2, 100, image_side=16, seed=0, split="test")

    def design(ds):
        x = ds.images.reshape(len(ds), -1).astype(np.float64) / 255.0
        return np.hstack([x, np.ones((len(ds), 1))])

    target = np.where(train.labels == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(design(train), target, rcond=1e-6)
    acc = np.mean((design(test) @ w > 0) == (test.labels == 1))
    assert acc >= 0.95


def test_normalize_oracle_and_identity():
    px = np.zeros((1, 1, 1), dtype=np.uint8)
    assert normalize(px, mean=[0.5], std=[0.25])[0, 0, 0] == pytest.approx(-2.0)
    img = np.arange(12, dtype=np.uint8).reshape(3, 2, 2) * 20
    np.testing.assert_allclose(normalize(img, (0, 0, 0), (1, 1, 1), np.float64), img / 255.0)
    full = np.random.default_rng(0).integers(0, 256, size=(2, 3, 4, 4), dtype=np.uint8)
    assert np.isfinite(normalize(full)).all()
    np.testing.assert_array_equal(denormalize(normalize(full, dtype=np.float64)), full)


@pytest.mark.parametrize("name,steps,sizes", [
    ("b0-5", 5, [20] * 5), ("b0-10", 10, [10] * 10),
    ("b50-5", 6, [50] + [10] * 5), ("b50-10", 11, [50] + [5] * 10),
])
def test_protocol_partitions(name, steps, sizes):
    spec = ScenarioSpec.protocol(name)
    groups = spec.step_classes()
    assert len(groups) == steps and [len(g) for g in groups] == sizes
    flat = [c for g in groups for c in g]
    assert sorted(flat) == list(range(100))


def test_protocol_on_fake_cifar_counts():
    labels = np.repeat(np.arange(100), 500)
    ds = LabeledImageSet(np.zeros((len(labels), 3, 1, 1), np.uint8), labels)
    views = split_scenario(ds, ScenarioSpec.protocol("b0-10"))
    assert all(len(v.train_indices) == 5000 for v in views)
    assert len(split_scenario(ds, ScenarioSpec.protocol("b50-5"))[0].train_indices) == 25_000


def test_scenario_validation_and_shuffle():
    with pytest.raises(ValueError):
        ScenarioSpec.custom([5, 5], class_count=12)
    with pytest.raises(ValueError):
        ScenarioSpec.protocol("b7-3")
    shuffled = ScenarioSpec.custom([3, 3], seed=4)
    assert sorted(shuffled.class_order) == list(range(6))
    assert ScenarioSpec.from_dict(shuffled.to_dict()) == shuffled


def test_batch_iterator_contract():
    idx = np.arange(10, 23)
    batches = list(batch_iterator(idx, 4, seed=1))
    assert [len(b) for b in batches] == [4, 4, 4, 1]
    assert sorted(np.concatenate(batches)) == list(idx)
    again = list(batch_iterator(idx, 4, seed=1))
    assert all((a == b).all() for a, b in zip(batches, again))
    ordered = np.concatenate(list(batch_iterator(idx, 5, shuffle=False)))
    np.testing.assert_array_equal(ordered, idx)
    with pytest.raises(DataError):
        next(batch_iterator(np.array([], dtype=int), 4))


def test_step_data_only_holds_its_classes(tiny_scenario):
    train, _, views = tiny_scenario
    data = StepData(train, views[1])
    assert set(data.labels) == set(views[1].classes)
    seen = sum(len(y) for _, y in data.batches(5, seed=0))
    assert seen == len(data) == data.reads
    assert data.accessed == set(views[1].train_indices.tolist())
