import itertools

import numpy as np
import pytest

from celltrack_sr.degradation import DegradationSpec, degrade
from celltrack_sr.errors import ParameterError
from celltrack_sr.metrics import tracking_fidelity
from celltrack_sr.simulation import SimParams, Trajectory, render_frames, simulate_trajectories, split_tumor
from celltrack_sr.tracking import (
    GATED_COST,
    CostMatrix,
    Detection,
    TrackingParams,
    cht_localize,
    label_tumor,
    link_tracks,
    lr_to_hr,
    solve_assignment,
    track_video,
)

SINGLE_FRAME = SimParams(height=64, width=64, n_immune=0, n_frames=1, t_eff=0)


def _render(cells, params=SINGLE_FRAME):
    tracks = [Trajectory(i + 1, [0], [xy], r) for i, (xy, r) in enumerate(cells)]
    return render_frames(tracks, params).frames[0]


# Localisation

def test_blank_frame_has_no_detections():
    assert cht_localize(np.full((64, 64), 0.5), (2.5, 13.0)) == []


def test_single_disk():
    frame = _render([((20.0, 30.0), 5.0)])
    (det,) = cht_localize(frame, (2.5, 13.0))
    assert abs(det.x - 20.0) <= 1.0 and abs(det.y - 30.0) <= 1.0
    assert abs(det.radius - 5.0) <= 1.0


def test_overlapping_disks_are_separated():
    # centres 1.7 radii apart: overlap of 30% of the radius
    frame = _render([((24.0, 32.0), 5.0), ((32.5, 32.0), 5.0)])
    dets = sorted(cht_localize(frame, (2.5, 13.0)), key=lambda d: d.x)
    assert len(dets) == 2
    assert abs(dets[0].x - 24.0) <= 1.5 and abs(dets[1].x - 32.5) <= 1.5


def test_radius_band_is_validated():
    with pytest.raises(ParameterError):
        cht_localize(np.zeros((8, 8)), (0.5, 3.0))


def test_for_scale_shrinks_band_and_thresholds():
    base = TrackingParams()
    settings = base.for_scale(4)
    assert settings.radius_band == (1.0, 13.0 / 4)
    assert settings.prefilter_sigma == 0.5
    assert settings.radius_step == base.radius_step / 4
    assert settings.threshold == pytest.approx(0.0375)
    assert settings.edge_threshold == pytest.approx(0.005)
    unscaled = base.for_scale(1)
    assert (unscaled.threshold, unscaled.edge_threshold) == (base.threshold, base.edge_threshold)


# Assignment

def test_small_assignment():
    result = solve_assignment(CostMatrix(np.array([[1.0, 2.0], [3.0, 1.0]])))
    assert sorted(result.pairs) == [(0, 0), (1, 1)]
    assert result.total_cost == 2.0


def test_diagonal_assignment():
    cost = np.full((5, 5), 10.0)
    np.fill_diagonal(cost, 0.0)
    assert sorted(solve_assignment(CostMatrix(cost)).pairs) == [(i, i) for i in range(5)]


def test_assignment_matches_brute_force():
    rng = np.random.default_rng(5)
    for trial in range(200):
        n = 1 + trial % 7
        cost = rng.random((n, n)) * 10
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert solve_assignment(CostMatrix(cost)).total_cost == pytest.approx(best)


def test_gated_pairs_are_dropped():
    cost = CostMatrix.from_positions(np.array([[0.0, 0.0], [50.0, 50.0]]), np.array([[1.0, 0.0]]), gate=5.0)
    assert cost.is_gated(1, 0)
    result = solve_assignment(cost)
    assert result.pairs == [(0, 0)]
    assert result.unmatched_rows == [1]
    assert cost.values[1, 0] == GATED_COST


def test_empty_assignment():
    result = solve_assignment(CostMatrix.from_positions(np.zeros((0, 2)), np.array([[1.0, 1.0]]), gate=5.0))
    assert result.pairs == [] and result.unmatched_cols == [0]


# Linking

def _det(f, x, y, r=4.0):
    return Detection(f, x, y, r, 1.0)


def test_single_mover_is_one_track():
    frames = [[_det(f, 10.0 + f, 20.0)] for f in range(10)]
    (track,) = link_tracks(frames, gate=5.0)
    assert len(track) == 10
    np.testing.assert_allclose(track.positions[:, 0], 10.0 + np.arange(10))


def test_parallel_movers_do_not_swap():
    frames = [[_det(f, 10.0 + f, 20.0), _det(f, 10.0 + f, 40.0)] for f in range(8)]
    tracks = link_tracks(frames, gate=5.0)
    assert len(tracks) == 2
    assert {float(t.positions[0, 1]) for t in tracks} == {20.0, 40.0}
    for t in tracks:
        assert np.all(t.positions[:, 1] == t.positions[0, 1])


def test_gap_is_bridged():
    frames = [[_det(f, 10.0 + f, 20.0)] if f != 4 else [] for f in range(9)]
    (track,) = link_tracks(frames, gate=5.0, max_missed=2)
    assert len(track) == 8
    assert 4 not in track.frames


def test_long_gap_starts_new_track():
    frames = [[_det(f, 10.0, 20.0)] if f not in (3, 4, 5) else [] for f in range(9)]
    assert len(link_tracks(frames, gate=5.0, max_missed=2)) == 2


# Helpers

def test_lr_to_hr_maps_pixel_centres():
    np.testing.assert_allclose(lr_to_hr(np.array([0.0, 1.0]), 4), [1.5, 5.5])


def test_label_tumor_picks_large_track():
    small = Trajectory(1, [0, 1], [[0, 0], [1, 1]], 4.0)
    big = Trajectory(2, [0, 1], [[5, 5], [5, 5]], 10.0)
    label_tumor([small, big], 7.0)
    assert big.kind == "tumor" and small.kind == "immune"


def test_tracking_recovers_simulated_cells():
    params = SimParams(height=96, width=96, n_immune=4, n_frames=8, t_eff=8, seed=4)
    gt = simulate_trajectories(params)
    tracks = track_video(render_frames(gt, params).frames, TrackingParams())
    tumor, immune = split_tumor(tracks)
    assert tumor is not None
    assert np.hypot(*(tumor.positions.mean(axis=0) - np.array(params.center))) < 2.0
    fidelity = tracking_fidelity(immune, split_tumor(gt)[1], params.immune_radius)
    assert fidelity.detection_percentage >= 75.0


def test_downsampled_frames_still_yield_immune_tracks():
    params = SimParams(height=128, width=128, n_immune=6, n_frames=8, t_eff=8, seed=11)
    gt = simulate_trajectories(params)
    hr = render_frames(gt, params).frames
    spec = DegradationSpec(magnification=4)
    lr = np.stack([degrade(frame, spec, f) for f, frame in enumerate(hr)])
    gt_immune = split_tumor(gt)[1]

    def detection(frames, scale):
        _, immune = split_tumor(track_video(frames, TrackingParams(), scale=scale))
        return tracking_fidelity(immune, gt_immune, params.immune_radius).detection_percentage

    hr_pct, lr_pct = detection(hr, 1), detection(lr, 4)
    assert 0.0 < lr_pct < hr_pct


def test_linked_steps_never_exceed_gate(rng):
    gate = 5.0
    frames = [[_det(f, *rng.uniform(0, 40, size=2)) for _ in range(rng.integers(0, 8))] for f in range(12)]
    for track in link_tracks(frames, gate=gate, max_missed=2):
        steps = np.hypot(*np.diff(track.positions, axis=0).T)
        assert np.all(steps <= gate)
