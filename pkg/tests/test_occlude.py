import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import all_label_sets, random_case, vote_oracle

from lisfguard.lisf import CandidateBox
from lisfguard.occlude import LabelSet, Verdict, defend_image, find_orphan, mask_region, occluding_test, vote
from lisfguard.tensor_net import Conv, FullyConnected, GlobalAvgPool, Network, ReLU


def test_mask_basics(rng):
    x = rng.random((3, 8, 8)).astype(np.float32)
    one = mask_region(x, CandidateBox(2, 3, 1, 1))
    assert np.count_nonzero(one != x) == 3
    twice = mask_region(mask_region(x, CandidateBox(1, 1, 4, 4)), CandidateBox(1, 1, 4, 4))
    assert np.array_equal(twice, mask_region(x, CandidateBox(1, 1, 4, 4)))
    assert not mask_region(x, CandidateBox(0, 0, 8, 8)).any()
    with pytest.raises(ValueError):
        mask_region(x, CandidateBox(6, 6, 4, 4))


def _flip_net():
    # class 1 scores the mean of a bright-square detector, class 0 a constant
    w = np.ones((1, 3, 1, 1), np.float32)
    return Network([Conv(3, 1, 1, 1, 0, w, np.zeros(1, np.float32)), ReLU(), GlobalAvgPool(),
                    FullyConnected(1, 2, np.array([[0.0], [1.0]], np.float32), np.array([0.5, 0.0], np.float32))],
                   (3, 10, 10), 2)


def test_occluding_test_cases():
    net = _flip_net()
    zero = np.zeros((3, 10, 10), np.float32)
    assert occluding_test(net, zero, []) == LabelSet(0, ())
    assert occluding_test(net, zero, [CandidateBox(0, 0, 3, 3)]).masked == (0,)
    x = zero.copy()
    x[:, 4:8, 4:8] = 1.0  # mean 3 * 16 / 100 = 0.48 < 0.5 -> still class 0; brighten
    x[:, 4:8, 4:8] = 2.0
    ls = occluding_test(net, x, [CandidateBox(0, 0, 3, 3), CandidateBox(4, 4, 4, 4)])
    assert ls.original == 1 and ls.masked == (1, 0)
    v = defend_image(net, x, [CandidateBox(0, 0, 3, 3), CandidateBox(4, 4, 4, 4)])
    assert v.adversarial and v.candidate == 2 and v.label == 0


def test_fast_and_full_occlusion_agree(rng):
    for _ in range(10):
        net, x, box = random_case(rng)
        cands = [CandidateBox(box.top, box.left, box.height, box.width)]
        assert occluding_test(net, x, cands, True) == occluding_test(net, x, cands, False)


def test_vote_examples():
    A, B, C, D = 0, 1, 2, 3
    assert vote(LabelSet(A, (A, A, B))) == Verdict(True, B, 3, LabelSet(A, (A, A, B)))
    v = vote(LabelSet(A, (A, A, A)))
    assert not v.adversarial and v.label == A
    v = vote(LabelSet(A, (B, C, C)))
    assert v.adversarial and v.candidate == 1 and v.label == B
    v = vote(LabelSet(A, (B, C, D)))
    assert not v.adversarial and v.label == A
    assert vote(LabelSet(A, ())).label == A
    assert vote(LabelSet(A, (B,))).adversarial
    assert not vote(LabelSet(A, (A,))).adversarial


def test_two_candidate_tie_rule():
    # masked (L0, B): the second candidate is the monopolist
    v = vote(LabelSet(0, (0, 1)))
    assert v.adversarial and v.candidate == 2 and v.label == 1
    # neither matches L0: no monopolist, majority over {0, 1, 2} ties to L0
    v = vote(LabelSet(0, (1, 2)))
    assert not v.adversarial and v.label == 0
    assert find_orphan((1, 2)) is None


def test_vote_properties_exhaustive():
    for l0, masked in all_label_sets(4, 4):
        v = vote(LabelSet(l0, tuple(masked)))
        assert (v.adversarial, v.label, v.candidate) == vote_oracle(l0, masked)
        if all(m == l0 for m in masked):
            assert not v.adversarial and v.label == l0
        if v.adversarial and len(masked) >= 3:
            i = v.candidate - 1
            rest = masked[:i] + masked[i + 1:]
            assert len(set(rest)) == 1 and masked[i] not in rest


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 3), st.lists(st.integers(0, 3), max_size=4), st.randoms())
def test_vote_permutation_covariant(l0, masked, rnd):
    perm = list(range(len(masked)))
    rnd.shuffle(perm)
    a = vote(LabelSet(l0, tuple(masked)))
    b = vote(LabelSet(l0, tuple(masked[p] for p in perm)))
    assert a.adversarial == b.adversarial and a.label == b.label
    if a.adversarial:
        assert perm[b.candidate - 1] == a.candidate - 1


def test_verdict_json_round_trip():
    v = vote(LabelSet(2, (2, 2, 1)))
    d = v.to_dict()
    assert set(d) >= {"kind", "candidate", "recovered_label", "labels"}
    assert d["kind"] == "adversarial" and d["recovered_label"] == 1 and d["labels"] == [2, 2, 2, 1]
    assert Verdict.from_dict(d) == v


def test_label_validation():
    with pytest.raises(ValueError):
        LabelSet(0, (5,)).validate(4)
