import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import open_scene
from deskvln.world import (
    OBS_DIM, InvalidEpisodeError, InvalidPoseError, MergedAction, Observation, Pose, PrimitiveAction as A,
    Scene, SceneFormatError, apply_merged, apply_primitive, distance_field, euclidean_distance,
    expand_actions, geodesic_distance, is_success, observation_vector, observe, start_episode, terminate,
)

F, L, R, S = A.FORWARD, A.LEFT, A.RIGHT, A.STOP


def state_at(scene, x, y, h, goal=(3.0, 2.0)):
    return start_episode(scene, "e", Pose(x, y, h), Pose(*goal, 0))


def test_forward_moves_a_quarter_metre():
    sc = open_scene()
    s = apply_primitive(state_at(sc, 2.0, 2.0, 0), sc, F)
    assert (s.pose.x, s.pose.y, s.pose.heading) == (2.25, 2.0, 0.0)
    assert s.steps_taken == 1 and not s.last_collision


def test_left_and_right_rotate_fifteen_degrees():
    sc = open_scene()
    s = apply_primitive(state_at(sc, 2.0, 2.0, 0), sc, L)
    assert s.pose.heading == 15.0 and (s.pose.x, s.pose.y) == (2.0, 2.0)
    s = apply_primitive(apply_primitive(s, sc, R), sc, R)
    assert s.pose.heading == 345.0


def test_blocked_forward_leaves_pose_and_flags_collision():
    sc = open_scene(walls=[(9, 8)])
    s0 = state_at(sc, 2.125, 2.125, 0)
    s0 = start_episode(sc, "e", Pose(2.125, 2.125, 0), Pose(1.0, 1.0, 0))
    s1 = apply_primitive(s0, sc, F)
    assert s1.pose == s0.pose and s1.last_collision and s1.steps_taken == 1


def test_merged_forward_and_turns():
    sc = open_scene()
    s = apply_merged(state_at(sc, 1.0, 1.0, 0), sc, MergedAction(F, 3))
    assert math.isclose(s.pose.x - 1.0, 0.75) and s.steps_taken == 3
    s = apply_merged(s, sc, MergedAction(L, 2))
    assert s.pose.heading == 30.0


def test_merged_forward_truncated_by_wall():
    sc = open_scene(walls=[(7, 4)])
    s0 = start_episode(sc, "e", Pose(1.125, 1.125, 0), Pose(0.3, 0.3, 0))
    s1 = apply_merged(s0, sc, MergedAction(F, 3))
    assert math.isclose(s1.pose.x - s0.pose.x, 0.5)
    assert s1.last_collision and s1.steps_taken == 3


def test_acting_after_done_raises():
    sc = open_scene()
    s = apply_primitive(state_at(sc, 2.0, 2.0, 0), sc, S)
    assert s.done and s.stopped
    with pytest.raises(InvalidEpisodeError):
        apply_primitive(s, sc, F)
    with pytest.raises(InvalidEpisodeError):
        apply_merged(s, sc, MergedAction(F, 1))


def test_stop_within_radius_is_success_and_step_limit_is_not():
    sc = open_scene(w=40, h=8)
    near = start_episode(sc, "e", Pose(1.1, 1.1, 0), Pose(3.6, 1.1, 0))
    assert is_success(apply_primitive(near, sc, S), sc)
    assert not is_success(terminate(near), sc)
    far = start_episode(sc, "e", Pose(1.1, 1.1, 0), Pose(9.0, 1.1, 0))
    assert not is_success(apply_primitive(far, sc, S), sc)


def test_merged_action_validation_and_tokens():
    assert MergedAction(F, 2).token == "F2"
    assert MergedAction.from_token("R3") == MergedAction(R, 3)
    assert MergedAction.from_token("STOP") == MergedAction(S, 1)
    for bad in ("F4", "X1", "", "STOP2"):
        with pytest.raises(ValueError):
            MergedAction.from_token(bad)
    with pytest.raises(ValueError):
        MergedAction(F, 4)
    with pytest.raises(ValueError):
        MergedAction(S, 2)
    assert expand_actions([MergedAction(F, 2), MergedAction(S, 1)]) == [F, F, S]


def test_pose_normalises_heading():
    assert Pose(0, 0, 360).heading == 0.0
    assert Pose(0, 0, -15).heading == 345.0


def test_rotation_closure_is_exact():
    sc = open_scene()
    s = state_at(sc, 2.0, 2.0, 45)
    for _ in range(24):
        s = apply_primitive(s, sc, L)
    assert s.pose.heading == 45.0


def test_geodesic_axis_and_oracle_cases():
    sc = open_scene(w=12, h=12)
    assert geodesic_distance(sc, Pose(0.1, 0.1, 0), Pose(1.1, 0.1, 0)) == pytest.approx(1.0, abs=0)
    # (0,0) -> (0.75, 1.00): 3 diagonals then 1 straight in cells
    got = geodesic_distance(sc, Pose(0.1, 0.1, 0), Pose(0.85, 1.1, 0))
    assert got == pytest.approx(0.25 * (1 + 3 * math.sqrt(2)), rel=1e-15)


def test_sealed_room_is_unreachable_and_blocked_endpoint_errors():
    grid = np.zeros((10, 10), dtype=bool)
    grid[3:8, 3] = grid[3:8, 7] = grid[3, 3:8] = grid[7, 3:8] = True
    sc = Scene("sealed", grid, [(0, (1, 1)), (1, (5, 5))])
    assert geodesic_distance(sc, Pose(0.3, 0.3, 0), Pose(1.3, 1.3, 0)) == math.inf
    with pytest.raises(InvalidPoseError):
        geodesic_distance(sc, Pose(0.3, 0.3, 0), Pose(0.8, 0.8, 0))
    with pytest.raises(InvalidPoseError):
        distance_field(grid, (3, 3), 0.25)


def test_observation_patch_and_goal_vector():
    sc = open_scene(w=20, h=20, walls=[(9, 8)])
    obs = observe(start_episode(sc, "e", Pose(2.125, 2.125, 0), Pose(4.125, 2.125, 0)), sc)
    assert obs.local_patch[6, 5] == 1 and obs.local_patch[5, 5] == 0
    clear = observe(start_episode(open_scene(w=20, h=20), "e", Pose(2.125, 2.125, 0), Pose(4.125, 2.125, 0)),
                    open_scene(w=20, h=20))
    assert clear.goal_vec == (2.0, 0.0)
    assert observation_vector(obs).shape == (OBS_DIM,)


def test_patch_outside_bounds_reads_blocked_and_is_deterministic():
    sc = open_scene()
    st_ = state_at(sc, 0.125, 0.125, 180)
    a, b = observe(st_, sc), observe(st_, sc)
    assert a == b
    assert a.local_patch[6:, :].all()  # everything ahead lies off the grid


def test_patch_is_heading_aligned():
    sc = open_scene(w=20, h=20, walls=[(8, 9)])  # one cell north of the agent
    obs = observe(start_episode(sc, "e", Pose(2.125, 2.125, 90), Pose(1.0, 1.0, 0)), sc)
    assert obs.local_patch[6, 5] == 1
    obs = observe(start_episode(sc, "e", Pose(2.125, 2.125, 0), Pose(1.0, 1.0, 0)), sc)
    assert obs.local_patch[5, 6] == 1  # same wall is now to the left


def test_observation_wire_round_trip():
    sc = open_scene()
    obs = observe(state_at(sc, 1.3, 1.7, 30), sc)
    back = Observation.from_dict(obs.to_dict())
    assert np.array_equal(back.local_patch, obs.local_patch)
    assert back.goal_vec == pytest.approx(obs.goal_vec, abs=1e-6)


def test_scene_text_round_trip_and_read_only_grid(small_scenes):
    sc = small_scenes[0]
    text = sc.to_text()
    again = Scene.from_text(text)
    assert again == sc and again.to_text() == text
    with pytest.raises(ValueError):
        sc.grid[0, 0] = True


def test_scene_invariants_enforced():
    with pytest.raises(SceneFormatError):
        Scene.from_text("{not json")
    grid = np.zeros((4, 4), dtype=bool)
    grid[1, 1] = True
    with pytest.raises(Exception):
        Scene("bad", grid, [(0, (1, 1))])
    with pytest.raises(Exception):
        Scene("bad", np.ones((3, 3), dtype=bool), [])
    with pytest.raises(Exception):
        Scene("bad", grid, [(0, (0, 0))], resolution=0)


actions = st.lists(st.sampled_from([F, F, F, L, R]), max_size=80)


@given(actions, st.integers(0, 2))
def test_agent_never_enters_blocked_cell(small_scenes, seq, idx):
    sc = small_scenes[idx]
    cell = tuple(sc.free_cells()[len(seq) * 7 % len(sc.free_cells())])
    s = start_episode(sc, "p", Pose(*sc.center_of(cell), 0), Pose(*sc.center_of(cell), 0))
    prev_min = s.min_goal_distance_seen
    for a in seq:
        s = apply_primitive(s, sc, a)
        assert sc.is_free_point(s.pose.x, s.pose.y)
        assert s.pose.heading % 15 == 0 and 0 <= s.pose.heading < 360
        assert s.min_goal_distance_seen <= prev_min
        prev_min = s.min_goal_distance_seen


@given(st.lists(st.tuples(st.sampled_from([F, L, R]), st.integers(1, 3)), max_size=20))
def test_merged_equals_fold_of_primitives(small_scenes, merged):
    sc = small_scenes[1]
    cell = tuple(sc.free_cells()[len(merged) * 13 % len(sc.free_cells())])
    s0 = start_episode(sc, "p", Pose(*sc.center_of(cell), 90), Pose(*sc.center_of(cell), 0))
    a = b = s0
    for kind, mag in merged:
        m = MergedAction(kind, mag)
        a = apply_merged(a, sc, m)
        for p in m.expand():
            b = apply_primitive(b, sc, p)
    assert a == b


@given(st.integers(0, 2), st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6))
def test_geodesic_metric_properties(small_scenes, idx, i, j, k):
    sc = small_scenes[idx]
    free = sc.free_cells()
    pa, pb, pc = (Pose(*sc.center_of(tuple(free[n % len(free)])), 0) for n in (i, j, k))
    dab, dba = geodesic_distance(sc, pa, pb), geodesic_distance(sc, pb, pa)
    assert geodesic_distance(sc, pa, pa) == 0
    assert dab == pytest.approx(dba, rel=1e-12)
    assert geodesic_distance(sc, pa, pc) <= dab + geodesic_distance(sc, pb, pc) + 1e-9
    assert dab >= euclidean_distance(pa, pb) - sc.resolution * math.sqrt(2) - 1e-9
