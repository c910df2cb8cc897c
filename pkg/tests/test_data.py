import numpy as np
import pytest

from cconv.data import SynthSpec, class_color, class_statistics, generate_dataset, iterate, mean_colors
from cconv.metrics import train_feature_net


def test_balance_and_count():
    imgs, labels = generate_dataset(SynthSpec(n_classes=3, samples_per_class=300))
    assert imgs.shape == (900, 3, 16, 16)
    np.testing.assert_array_equal(np.bincount(labels), [300, 300, 300])


@pytest.mark.parametrize("kind", ["colored-shapes", "ring-gaussians-as-images"])
def test_same_seed_same_bytes_and_range(kind):
    spec = SynthSpec(kind=kind, n_classes=4, samples_per_class=20, seed=9)
    a, la = generate_dataset(spec)
    b, lb = generate_dataset(spec)
    assert a.tobytes() == b.tobytes() and la.tobytes() == lb.tobytes()
    assert a.min() >= -1.0 and a.max() <= 1.0
    c, _ = generate_dataset(SynthSpec(kind=kind, n_classes=4, samples_per_class=20, seed=10))
    assert a.tobytes() != c.tobytes()


def test_iterate_streams_pairs():
    spec = SynthSpec(samples_per_class=4)
    items = list(iterate(spec))
    imgs, labels = generate_dataset(spec)
    assert len(items) == 12
    np.testing.assert_array_equal(items[5][0], imgs[5])
    assert items[5][1] == labels[5]


@pytest.mark.parametrize("kw", [{"n_classes": 1}, {"image_size": 7}, {"kind": "cifar"}, {"samples_per_class": 0}])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SynthSpec(**kw)


def test_class_mean_colors_separated_beyond_spread():
    imgs, labels = generate_dataset(SynthSpec(samples_per_class=300))
    rows = class_statistics(imgs, labels)
    spread = max(r["color_std"] for r in rows)
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(rows[i]["mean_color"] - rows[j]["mean_color"]) > spread


def test_class_hues_are_distinct():
    cols = np.array([class_color(c, 3) for c in range(3)])
    assert np.argmax(cols[0]) == 0 and np.argmax(cols[1]) == 1 and np.argmax(cols[2]) == 2


def test_color_std_is_rms_distance_to_class_mean():
    imgs, labels = generate_dataset(SynthSpec(samples_per_class=10))
    rows = class_statistics(imgs, labels)
    cols = mean_colors(imgs)
    sel = cols[labels == 1]
    expect = np.sqrt(np.mean([np.sum((c - sel.mean(axis=0)) ** 2) for c in sel]))
    assert rows[1]["color_std"] == pytest.approx(expect)


def test_single_class_input_gives_one_row():
    imgs, labels = generate_dataset(SynthSpec(samples_per_class=5))
    rows = class_statistics(imgs[labels == 2], labels[labels == 2])
    assert len(rows) == 1 and rows[0]["label"] == 2 and rows[0]["count"] == 5


@pytest.fixture(scope="module")
def trained_net():
    return train_feature_net(*generate_dataset(SynthSpec(samples_per_class=300, seed=31)), 3)


def test_classifier_accuracy_on_own_data(trained_net):
    imgs, labels = generate_dataset(SynthSpec(samples_per_class=200, seed=32))
    assert all(r["accuracy"] >= 0.95 for r in class_statistics(imgs, labels, trained_net))


def test_permuted_labels_give_chance_accuracy(trained_net):
    imgs, labels = generate_dataset(SynthSpec(samples_per_class=200, seed=33))
    perm = np.random.default_rng(0).permutation(labels)
    acc = np.mean([r["accuracy"] for r in class_statistics(imgs, perm, trained_net)])
    assert abs(acc - 1 / 3) < 0.07
