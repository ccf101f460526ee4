"""Gripper-event segmentation tests, including the brute-force fuzz oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dscascade.data import Demonstration
from dscascade.segmentation import (as_single_segment, gripper_transitions,
                                    reassemble, segment_by_gripper,
                                    segmented_from_obj, segmented_to_obj,
                                    validate_segments)
from dscascade.sim import synthetic_task_details

from helpers import demo_from_positions


def demo_with_gripper(gripper):
    gripper = np.asarray(gripper, dtype=int)
    n = len(gripper)
    x = np.stack([np.linspace(0, 1, n), np.linspace(0, 2, n),
                  np.sin(np.linspace(0, 1, n))], axis=1)
    return demo_from_positions(x, gripper=gripper)


def test_hand_enumerated_transitions():
    demo = demo_with_gripper([0, 0, 1, 1, 0, 0])
    seg = segment_by_gripper(demo)
    assert seg.k == 3
    assert seg.event_indices == (2, 4, 5)
    np.testing.assert_array_equal(seg.subgoals, demo.x[[2, 4, 5]])
    assert seg.final_gripper_actions == (1, 0, 0)


def test_constant_gripper_yields_single_segment():
    demo = demo_with_gripper([0] * 8)
    seg = segment_by_gripper(demo)
    assert seg.k == 1
    np.testing.assert_array_equal(seg.subgoals[0], demo.x[-1])
    assert seg.event_indices == (7,)


def test_pick_place_demo_gives_three_subgoals():
    demo, info = synthetic_task_details("pick-place-3seg", seed=0)
    seg = segment_by_gripper(demo)
    assert seg.k == 3
    assert list(seg.event_indices[:2]) == info["toggle_indices"]
    np.testing.assert_allclose(seg.subgoals, info["subgoals"], atol=1e-12)


def test_boundary_sample_is_shared():
    demo = demo_with_gripper([0, 0, 1, 1, 1, 0, 0, 0])
    seg = segment_by_gripper(demo)
    for k in range(1, seg.k):
        np.testing.assert_array_equal(seg.segments[k].x[0],
                                      seg.segments[k - 1].x[-1])


def test_reassembly_reproduces_parent_exactly():
    demo, _ = synthetic_task_details("pick-place-3seg", seed=1)
    seg = segment_by_gripper(demo)
    assert reassemble(seg).equals(demo)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=1), min_size=2, max_size=40))
def test_fuzz_events_match_brute_force_scan(bits):
    demo = demo_with_gripper(bits)
    seg = segment_by_gripper(demo)
    brute = [i for i in range(1, len(bits)) if bits[i] != bits[i - 1]]
    n = len(bits)
    # every event but the terminal one is a flip; terminal index is n-1
    expected = brute + [n - 1] if (not brute or brute[-1] != n - 1) else brute
    assert list(seg.event_indices) == expected
    if not brute or brute[-1] != n - 1:
        assert seg.k == 1 + len(brute)
    for k in range(seg.k - (0 if expected[-1] in brute else 1)):
        i = seg.event_indices[k]
        assert bits[i] != bits[i - 1]
    assert reassemble(seg).equals(demo)


def test_validate_segments_quiet_for_long_segments():
    demo = demo_with_gripper([0] * 12 + [1] * 12)
    seg = segment_by_gripper(demo)
    assert validate_segments(seg, min_len=5) == []


def test_validate_segments_warns_short_segment():
    demo = demo_with_gripper([0, 1, 1, 1, 1, 1, 1])
    seg = segment_by_gripper(demo)
    warnings = validate_segments(seg, min_len=5)
    assert any("segment 0" in w for w in warnings)


def test_validate_segments_warns_degenerate_extent():
    x = np.concatenate([np.zeros((6, 3)), np.linspace(0, 1, 6)[:, None] * np.ones(3)])
    demo = demo_from_positions(x, gripper=[0] * 6 + [1] * 6)
    seg = segment_by_gripper(demo)
    warnings = validate_segments(seg, min_len=2)
    assert any("zero spatial extent" in w for w in warnings)


def test_debounce_merges_chatter_keeping_last():
    demo = demo_with_gripper([0, 1, 0, 0, 0, 0, 1, 1, 1, 1])
    seg = segment_by_gripper(demo, debounce_gap=3)
    # chatter at 1,2 collapses to 2; the 0->1 flip at 6 is kept
    assert seg.event_indices == (2, 6, 9)


def test_single_segment_wrapper():
    demo = demo_with_gripper([0, 1, 0, 1])
    seg = as_single_segment(demo)
    assert seg.k == 1
    assert seg.event_indices == (3,)
    np.testing.assert_array_equal(seg.subgoals[0], demo.x[-1])


def test_segmented_json_roundtrip():
    demo, _ = synthetic_task_details("s-curve", seed=2)
    seg = segment_by_gripper(demo)
    back = segmented_from_obj(segmented_to_obj(seg))
    assert back.k == seg.k
    assert back.event_indices == seg.event_indices
    np.testing.assert_array_equal(back.subgoals, seg.subgoals)
    for a, b in zip(back.segments, seg.segments):
        assert a.equals(b)


def test_gripper_transitions_helper():
    assert gripper_transitions(np.array([0, 0, 1, 0, 1, 1])) == [2, 3, 4]
