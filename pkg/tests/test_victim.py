import numpy as np

from lisfguard.scenario import make_dataset
from lisfguard.tensor_net import forward
from lisfguard.victim import edge_filter_bank, victim_architecture


def test_shipped_victim_accuracy(victim):
    data = make_dataset(np.random.default_rng(999), 80)
    acc = np.mean([forward(victim, x).label == y for x, y in zip(data.images, data.labels)])
    assert acc >= 0.95


def test_victim_stem_is_fixed_edge_bank(victim):
    assert np.array_equal(victim.layers[0].weight, edge_filter_bank())
    assert victim.input_shape == (3, 48, 48) and victim.class_count == 4


def test_edge_bank_ignores_flat_regions():
    bank = edge_filter_bank()
    assert bank.shape == (12, 3, 3, 3)
    assert np.allclose(bank.sum(axis=(2, 3)), 0, atol=1e-6)


def test_architecture_builds_for_other_sizes():
    net = victim_architecture(np.random.default_rng(0), size=32, classes=3)
    assert forward(net, np.zeros((3, 32, 32), np.float32)).logits.shape == (3,)
