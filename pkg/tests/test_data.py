import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scout.data import (
    AgentTrack,
    AgentType,
    DatasetSplit,
    denormalize_sample,
    load_split,
    load_trajectories,
    normalize_sample,
    parse_agent_type,
    resample,
    save_split,
    split_by_recording,
    window_sequences,
    write_trajectories,
)
from scout.errors import MissingColumn, NonDivisibleRates, NonMonotoneFrames, UnknownAgentType
from scout.synthetic import make_samples, make_tracks

HEADER = "recording_id,frame,track_id,x,y,heading,agent_type\n"


def write_csv(tmp_path, body, name="t.csv"):
    path = tmp_path / name
    path.write_text(HEADER + body)
    return path


def track(agent_id, frames, xy=None, rec="r0", atype=AgentType.VEHICLE):
    frames = np.asarray(frames, dtype=np.int64)
    xy = np.stack([frames * 1.0, np.zeros(len(frames))], 1) if xy is None else np.asarray(xy, float)
    return AgentTrack(rec, agent_id, atype, frames, xy, np.zeros(len(frames)))


class TestLoad:
    def test_three_rows_one_track(self, tmp_path):
        path = write_csv(tmp_path, "a,0,1,0,0,0,car\na,1,1,1,0,0,car\na,2,1,2,0,0,car\n")
        tracks = load_trajectories(path)
        assert len(tracks) == 1
        np.testing.assert_array_equal(tracks[0].frames, [0, 1, 2])
        assert tracks[0].agent_type is AgentType.VEHICLE

    def test_duplicate_frame(self, tmp_path):
        path = write_csv(tmp_path, "a,0,1,0,0,0,car\na,0,1,1,0,0,car\n")
        with pytest.raises(NonMonotoneFrames, match="t.csv:3"):
            load_trajectories(path)

    def test_interleaved_tracks_are_sorted(self, tmp_path):
        body = "a,2,1,2,0,0,car\na,0,2,0,5,0,pedestrian\na,0,1,0,0,0,car\na,1,2,0,6,0,pedestrian\na,1,1,1,0,0,car\n"
        tracks = load_trajectories(write_csv(tmp_path, body))
        assert [t.agent_id for t in tracks] == [1, 2]
        np.testing.assert_array_equal(tracks[0].frames, [0, 1, 2])
        np.testing.assert_array_equal(tracks[0].xy[:, 0], [0, 1, 2])
        np.testing.assert_array_equal(tracks[1].frames, [0, 1])

    def test_missing_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("recording_id,frame,track_id,x,y,agent_type\n")
        with pytest.raises(MissingColumn, match="heading"):
            load_trajectories(path)

    def test_unknown_type_names_line(self, tmp_path):
        path = write_csv(tmp_path, "a,0,1,0,0,0,car\na,1,1,1,0,0,tram\n")
        with pytest.raises(UnknownAgentType, match="t.csv:3"):
            load_trajectories(path)

    def test_format_spec_renames_columns(self, tmp_path):
        path = tmp_path / "alt.csv"
        path.write_text("rec,frame,id,x,y,heading,class\nq,0,4,1,2,0.5,bicycle\n")
        tracks = load_trajectories(path, {"recording_id": "rec", "track_id": "id", "agent_type": "class"})
        assert tracks[0].recording_id == "q" and tracks[0].agent_id == 4

    def test_aliases(self):
        assert parse_agent_type("Truck") is AgentType.VEHICLE
        assert parse_agent_type("scooter") is AgentType.PEDESTRIAN
        assert parse_agent_type("motorcycle") is AgentType.BICYCLE

    def test_write_read_round_trip(self, tmp_path):
        tracks = make_tracks(3, seed=2)
        write_trajectories(tracks, tmp_path / "rt.csv")
        back = load_trajectories(tmp_path / "rt.csv")
        assert len(back) == len(tracks)
        key = {(t.recording_id, t.agent_id): t for t in tracks}
        for t in back:
            orig = key[(t.recording_id, t.agent_id)]
            np.testing.assert_array_equal(t.xy, orig.xy)
            np.testing.assert_array_equal(t.frames, orig.frames)


class TestResample:
    def test_every_tenth_frame(self):
        out = resample([track(0, np.arange(25))], 25.0, 2.5)[0]
        np.testing.assert_array_equal(out.xy[:, 0], [0, 10, 20])
        assert len(out) == 3

    def test_identity(self):
        tr = [track(0, np.arange(5))]
        assert resample(tr, 2.5, 2.5)[0] is tr[0]

    def test_non_divisible(self):
        with pytest.raises(NonDivisibleRates):
            resample([track(0, np.arange(5))], 25.0, 3.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 40), st.integers(1, 60), st.sampled_from([2, 5, 10]))
    def test_first_frame_preserved(self, start, length, factor):
        out = resample([track(0, np.arange(start, start + length))], 2.5 * factor, 2.5)[0]
        assert out.xy[0, 0] == start
        assert len(out) == -(-length // factor)


class TestWindow:
    def test_single_agent_single_window(self):
        samples = window_sequences([track(0, np.arange(20))], 8, 12, stride=20)
        assert len(samples) == 1
        s = samples[0]
        assert s.presence_mask.all() and s.loss_mask.all()
        assert s.anchor_frame == 7
        np.testing.assert_array_equal(s.fut[0, :, 0], np.arange(8, 20))

    def test_late_entering_agent_is_padded(self):
        tracks = [track(0, np.arange(20)), track(1, np.arange(5, 20))]
        s = window_sequences(tracks, 8, 12, stride=20)[0]
        np.testing.assert_array_equal(s.presence_mask[1], [False] * 5 + [True] * 3)
        assert (s.obs[1, :5] == 0).all()
        assert s.loss_mask.all()

    def test_short_range_gives_nothing(self):
        assert window_sequences([track(0, np.arange(19))], 8, 12, stride=1) == []

    def test_agent_leaving_early_is_masked(self):
        tracks = [track(0, np.arange(20)), track(1, np.arange(0, 12))]
        s = window_sequences(tracks, 8, 12, stride=20)[0]
        np.testing.assert_array_equal(s.loss_mask, [True, False])

    def test_no_empty_windows(self):
        # a gap in the only track leaves anchors without agents
        tracks = [track(0, list(range(10)) + list(range(15, 40)))]
        samples = window_sequences(tracks, 4, 4, stride=1)
        assert samples and all(s.num_agents > 0 for s in samples)
        assert all(s.anchor_frame not in range(10, 15) for s in samples)

    def test_one_hot_type(self):
        s = window_sequences([track(0, np.arange(20), atype=AgentType.BICYCLE)], 8, 12, 20)[0]
        np.testing.assert_array_equal(s.obs[0, :, 3:], np.tile([0, 0, 1], (8, 1)))


class TestNormalize:
    def test_hand_centroid(self):
        tracks = [
            track(0, np.arange(3), [[10, 10]] * 3),
            track(1, np.arange(3), [[14, 10]] * 3),
        ]
        s = normalize_sample(window_sequences(tracks, 2, 1, 1)[0])
        np.testing.assert_allclose(s.anchor_positions, [[-2, 0], [2, 0]], atol=1e-15)
        assert s.origin == (12.0, 10.0)

    def test_centered_is_unchanged(self):
        tracks = [track(0, np.arange(3), [[-1, 0]] * 3), track(1, np.arange(3), [[1, 0]] * 3)]
        raw = window_sequences(tracks, 2, 1, 1)[0]
        s = normalize_sample(raw)
        np.testing.assert_array_equal(s.obs, raw.obs)
        np.testing.assert_array_equal(s.fut, raw.fut)

    def test_round_trip(self):
        for raw in window_sequences(make_tracks(5, seed=4), 8, 12, 3):
            back = denormalize_sample(normalize_sample(raw))
            np.testing.assert_allclose(back.obs, raw.obs, atol=1e-12, rtol=0)
            np.testing.assert_allclose(back.fut, raw.fut, atol=1e-12, rtol=0)

    def test_padding_stays_zero(self):
        tracks = [track(0, np.arange(20), np.full((20, 2), 7.0)), track(1, np.arange(5, 20))]
        s = normalize_sample(window_sequences(tracks, 8, 12, stride=20)[0])
        assert (s.obs[1, :5] == 0).all()


class TestSplit:
    def test_disjoint_fractions(self):
        samples = make_samples(30, seed=1)
        split = split_by_recording(samples, 0.2, 1 / 3, seed=0)
        split.check_disjoint()
        assert len(split.train) + len(split.val) + len(split.test) == 30
        assert len(split.test) == 10

    def test_held_out_recordings(self):
        samples = make_samples(6, seed=1)
        split = split_by_recording(samples, test_recordings=["syn0005"], val_recordings=["syn0004"])
        assert {s.recording_id for s in split.test} == {"syn0005"}
        assert {s.recording_id for s in split.val} == {"syn0004"}

    def test_overlap_detected(self):
        s = make_samples(1)
        with pytest.raises(ValueError):
            DatasetSplit(train=s, test=s).check_disjoint()

    def test_cache_round_trip(self, tmp_path):
        split = split_by_recording(make_samples(9, seed=3), seed=1)
        save_split(split, tmp_path / "c.json")
        back = load_split(tmp_path / "c.json")
        for name in ("train", "val", "test"):
            for a, b in zip(getattr(split, name), getattr(back, name)):
                np.testing.assert_array_equal(a.obs, b.obs)
                np.testing.assert_array_equal(a.fut, b.fut)
                assert a.agent_types == b.agent_types and a.origin == b.origin
