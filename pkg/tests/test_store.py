"""Trajectory records, dataset files, dedup, filtering, batch sampling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softpo import OfflineDataset, Trajectory


def _traj(tokens=(1, 1), reward=0.0, **kw):
    return Trajectory(prompt=0, tokens=tokens, reward=reward, **kw)


class TestTrajectory:
    def test_validation(self):
        with pytest.raises(ValueError):
            _traj(reward=0.5)
        with pytest.raises(ValueError):
            _traj(source="mystery")
        with pytest.raises(ValueError):
            _traj(behavior_logprobs=(-0.1,))  # wrong length
        with pytest.raises(ValueError):
            _traj(annotations=((0, 0.5),))    # step below 1
        with pytest.raises(ValueError):
            _traj(annotations=((1, 1.5),))    # estimate above 1

    def test_json_round_trip_all_fields(self):
        traj = Trajectory(
            prompt="p7", tokens=(1, 0), reward=-1.0, source="offline-human",
            behavior_logprobs=(-0.6931471805599453, -0.1053605156578263),
            policy_logprobs_unmodified=(-0.6931471805599453,
                                         -0.2231435513142097),
            policy_version=42, annotations=((1, 0.25), (2, 1.0)),
        )
        assert Trajectory.from_json(traj.to_json()) == traj

    def test_json_round_trip_is_bit_exact_on_floats(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            traj = _traj(reward=float(-rng.random()),
                         behavior_logprobs=tuple(-rng.random(2) * 30))
            back = Trajectory.from_json(traj.to_json())
            assert back.reward == traj.reward
            assert back.behavior_logprobs == traj.behavior_logprobs

    def test_unknown_fields_rejected(self):
        with pytest.raises(ValueError):
            Trajectory.from_json('{"prompt": 0, "tokens": [1, 1], "reward": 0, "zap": 1}')


class TestAppend:
    def test_append_then_read_back_identical(self, tmp_path):
        path = tmp_path / "ds.jsonl"
        ds = OfflineDataset(2, 2, path=path)
        traj = _traj(behavior_logprobs=(-0.3, -1.7), policy_version=3)
        assert ds.append(traj)
        loaded = OfflineDataset.load(path, 2, 2)
        assert list(loaded) == [traj]

    def test_duplicate_is_reported_noop(self):
        ds = OfflineDataset(2, 2)
        assert ds.append(_traj())
        assert not ds.append(_traj())
        assert len(ds) == 1

    def test_out_of_vocab_rejected(self):
        ds = OfflineDataset(2, 2)
        with pytest.raises(ValueError):
            ds.append(_traj(tokens=(1, 2)))

    def test_wrong_length_rejected(self):
        ds = OfflineDataset(2, 2)
        with pytest.raises(ValueError):
            ds.append(_traj(tokens=(1, 1, 0)))

    def test_dedup_idempotent(self):
        records = [_traj(tokens=(a, b), reward=0.0 if (a, b) == (1, 1) else -1.0)
                   for a in range(2) for b in range(2)] * 3
        once = OfflineDataset(2, 2)
        once.extend(records)
        twice = OfflineDataset(2, 2)
        twice.extend(list(once))
        assert list(once) == list(twice)


class TestFilterCorrect:
    def test_keeps_only_successes(self):
        ds = OfflineDataset(2, 2)
        ds.append(_traj(tokens=(1, 1), reward=0.0))
        ds.append(_traj(tokens=(0, 1), reward=-1.0))
        ds.append(_traj(tokens=(1, 0), reward=-1.0))
        view = ds.filter_correct()
        assert len(view) == 1
        assert view[0].tokens == (1, 1)

    def test_empty_dataset_gives_empty_view(self):
        assert len(OfflineDataset(2, 2).filter_correct()) == 0

    def test_source_tags_preserved(self):
        ds = OfflineDataset(2, 2)
        ds.append(_traj(tokens=(1, 1), reward=0.0, source="offline-human"))
        ds.append(_traj(tokens=(0, 0), reward=0.0, source="offline-expert"))
        assert [t.source for t in ds.filter_correct()] == \
            ["offline-human", "offline-expert"]


class TestSampleBatch:
    def test_zero_draws_give_empty_list(self):
        ds = OfflineDataset(2, 2)
        ds.append(_traj())
        assert ds.sample_batch(0, np.random.default_rng(0)) == []

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            OfflineDataset(2, 2).sample_batch(1, np.random.default_rng(0))

    def test_fixed_seed_reproduces_batch(self):
        ds = OfflineDataset(2, 2)
        ds.extend(_traj(tokens=(a, b), reward=-1.0 if (a, b) != (1, 1) else 0.0)
                  for a in range(2) for b in range(2))
        a = ds.sample_batch(16, np.random.default_rng(5))
        b = ds.sample_batch(16, np.random.default_rng(5))
        assert a == b

    def test_sampling_is_uniform(self):
        ds = OfflineDataset(2, 2)
        ds.extend(_traj(tokens=(a, b), reward=-1.0 if (a, b) != (1, 1) else 0.0)
                  for a in range(2) for b in range(2))
        n = 100_000
        batch = ds.sample_batch(n, np.random.default_rng(3))
        sigma = np.sqrt(0.25 * 0.75 / n)
        for record in ds:
            freq = sum(1 for t in batch if t is record) / n
            assert abs(freq - 0.25) <= 3 * sigma


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)),
                min_size=0, max_size=30))
@settings(max_examples=100, deadline=None)
def test_dedup_never_exceeds_unique_count(pairs):
    ds = OfflineDataset(2, 2)
    for a, b in pairs:
        ds.append(Trajectory(0, (a, b), reward=0.0))
    assert len(ds) == len(set(pairs))
