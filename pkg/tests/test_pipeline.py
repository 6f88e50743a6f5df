import numpy as np
import pytest

from lisfguard.experiments import desk_pipeline, run_scenario
from lisfguard.pipeline import Counters, PipelineConfig, box_overlap, run, run_ao, run_po, select_key_frames, \
    split_network
from lisfguard.lisf import CandidateBox
from lisfguard.scenario import ScenarioConfig, build_scenario
from lisfguard.tensor_net import forward, forward_range, random_network


def test_key_frame_schedule():
    assert select_key_frames(20, 0.10) == [0, 10]
    assert select_key_frames(5, 1.0) == [0, 1, 2, 3, 4]
    assert select_key_frames(7, 0.5) == [0, 2, 4, 6]
    with pytest.raises(ValueError):
        select_key_frames(5, 0)


def test_split_rule(rng):
    net = random_network(rng, (3, 32, 32), [("conv", 4, 3, 1, 1), ("pool", 2, 2), ("conv", 4, 3, 1, 1),
                                            ("pool", 2, 2), ("conv", 4, 3, 1, 1)], 2)
    # sides 32, 16, 16, 8, 8: the pool at index 3 is the first below 32 / 4 = 8? no, 8 is not < 8
    prefix, suffix = split_network(net, 0.3)
    assert list(prefix) == [0, 1, 2, 3] and suffix.start == 4
    assert list(split_network(net, 2.0)[0]) == [0]
    prefix, suffix = split_network(net, 0.25)
    x = rng.random((3, 32, 32)).astype(np.float32)
    mid = forward_range(net, x, 0, prefix.stop)
    assert np.array_equal(forward_range(net, mid, prefix.stop, len(net.layers)), forward(net, x).logits)


def test_victim_split(victim):
    prefix, _ = split_network(victim, 0.25)
    assert victim.out_shape(prefix.stop - 1)[1] < 12
    assert all(victim.out_shape(i)[1] >= 12 for i in range(prefix.stop - 1))


@pytest.fixture(scope="module")
def moving(trained_patch):
    return build_scenario(ScenarioConfig(clips=3, frames=20, speed=0.5), seed=3, patch=trained_patch.patch)


@pytest.fixture(scope="module")
def benign_moving():
    return build_scenario(ScenarioConfig(clips=3, frames=20, speed=0.5), seed=4)


def test_defense_off_is_plain_inference(victim, moving):
    clip = moving.clips[0]
    ao = run(clip.frames, victim, PipelineConfig("ao", "off"))
    assert [r.label for r in ao] == [forward(victim, x).label for x in clip.frames]


def test_static_patched_video(victim, trained_patch):
    clip = build_scenario(ScenarioConfig(clips=1, frames=10, speed=0.0), 11, trained_patch.patch).clips[0]
    res = run_ao(clip.frames, victim, desk_pipeline("ao"))
    key = res[0]
    assert key.is_key and key.verdict.adversarial
    for r in res[1:]:
        assert (r.masked_box.top, r.masked_box.left) == (key.masked_box.top, key.masked_box.left)
        assert r.label == key.label
    po = run_po(clip.frames, victim, desk_pipeline("po"))
    assert all(r.label == po[0].label for r in po)


def test_static_defense_off_po_equals_ao(victim, benign_moving):
    frames = np.repeat(benign_moving.clips[0].frames[:1], 6, axis=0)
    ao = run(frames, victim, PipelineConfig("ao", "off"))
    po = run(frames, victim, PipelineConfig("po", "off"))
    assert [r.label for r in ao] == [r.label for r in po]


def test_moving_patch_is_tracked(victim, moving):
    _, summary, _ = run_scenario(victim, moving, desk_pipeline("ao"))
    assert summary.box_overlap >= 0.7
    assert summary.recovered_accuracy >= summary.attacked_accuracy + 0.5


def test_po_benign_moving_agrees_with_plain(victim, benign_moving):
    agree = total = 0
    for clip in benign_moving.clips:
        po = run(clip.frames, victim, PipelineConfig("po", "off"))
        plain = [forward(victim, x).label for x in clip.frames]
        agree += sum(r.label == p for r, p in zip(po, plain))
        total += len(plain)
    assert agree / total >= 0.9


@pytest.mark.parametrize("mode", ["ao", "po"])
def test_non_key_frames_never_search(victim, moving, mode):
    counters = Counters()
    res = run(moving.clips[1].frames, victim, desk_pipeline(mode), counters)
    keys = select_key_frames(20, 0.1)
    assert counters.searches == len(keys) == counters.votes
    assert [r.index for r in res if r.is_key] == keys
    assert all(not r.warped for r in res if r.is_key)
    assert all(not r.work.get("search") for r in res if not r.is_key)


def test_po_key_results_invariant_to_split(victim, moving):
    clip = moving.clips[2]
    a = run(clip.frames, victim, desk_pipeline("po", split_fraction=0.25))
    b = run(clip.frames, victim, desk_pipeline("po", split_fraction=0.6))
    assert [r.label for r in a if r.is_key] == [r.label for r in b if r.is_key]


def test_full_defense_defends_every_frame(victim, moving):
    counters = Counters()
    run(moving.clips[0].frames[:5], victim, desk_pipeline("ao", "full"), counters)
    assert counters.searches == 5


def test_box_overlap_exact():
    b = CandidateBox(3, 4, 5, 6)
    assert box_overlap(b, b) == 1.0
    assert box_overlap(CandidateBox(0, 0, 2, 2), CandidateBox(10, 10, 2, 2)) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig("xx")
    with pytest.raises(ValueError):
        PipelineConfig("ao", "sometimes")
    with pytest.raises(ValueError):
        PipelineConfig("ao", key_rate=0)


def test_frame_result_json(victim, moving):
    import json

    res = run(moving.clips[0].frames[:3], victim, desk_pipeline("ao"))
    for r in res:
        d = json.loads(json.dumps(r.to_dict()))
        assert d["timing"] == "modeled" and d["frame"] == r.index
