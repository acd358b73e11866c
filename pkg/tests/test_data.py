import numpy as np
import pytest

from cyclealign import data, envs


@pytest.fixture(scope="module")
def pm():
    return envs.point_mass(2)


def test_collect_counts_and_determinism(pm):
    ds = data.collect(pm, "random", 2, 3, seed=5)
    assert len(ds) == 6 and len(ds.triples) == 6
    assert data.collect(pm, "random", 2, 3, seed=5).equals(ds)
    assert not data.collect(pm, "random", 2, 3, seed=6).equals(ds)


@pytest.mark.parametrize("mode", sorted(data.MODES))
def test_triples_resimulate(pm, mode):
    ds = data.collect(pm, mode, 4, 25, seed=1)
    assert np.abs(ds.actions).max() <= pm.action_bound
    redo = envs.step(pm, ds.obs, ds.actions)
    assert np.array_equal(redo, ds.next_obs)


def test_episodes_chain(pm):
    ds = data.collect(pm, "random", 3, 10, seed=2)
    for e in range(3):
        rows = slice(10 * e, 10 * e + 10)
        assert np.array_equal(ds.obs[rows][1:], ds.next_obs[rows][:-1])


def test_reference_mode_has_no_noise(pm):
    ds = data.collect(pm, "reference", 2, 10, seed=0)
    assert np.array_equal(ds.actions, envs.reference_policy(pm, ds.obs))


def test_scrambled_dataset_observes_states():
    spec = envs.damped_integrators(2, modality="scrambled", modality_seed=4)
    ds, states = data.collect(spec, "random", 3, 10, seed=0, return_states=True)
    assert ds.obs_dim == 8
    assert np.array_equal(ds.obs, envs.observe(spec, states))


def test_invalid_collect_arguments(pm):
    with pytest.raises(ValueError):
        data.collect(pm, "random", 0, 5, seed=0)
    with pytest.raises(ValueError):
        data.collect(pm, "greedy", 1, 5, seed=0)


def test_dataset_arrays_read_only(pm):
    ds = data.collect(pm, "random", 1, 4, seed=0)
    with pytest.raises(ValueError):
        ds.obs[0, 0] = 1.0


def test_file_round_trip(tmp_path, pm):
    ds = data.collect(pm, "noisy_reference", 3, 7, seed=9)
    path = tmp_path / "d.cyds"
    data.save(ds, path)
    back = data.load(path)
    assert back.equals(ds)
    assert back.env_spec_digest == pm.digest()
    assert data.dataset_to_bytes(back) == path.read_bytes()


def test_file_errors(pm):
    raw = data.dataset_to_bytes(data.collect(pm, "random", 1, 4, seed=0))
    with pytest.raises(data.DatasetFormatError, match="bad magic"):
        data.dataset_from_bytes(b"NOPE" + raw[4:])
    with pytest.raises(data.DatasetFormatError, match="version"):
        data.dataset_from_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(data.DatasetFormatError, match="truncated"):
        data.dataset_from_bytes(raw[:-20])
    with pytest.raises(data.DatasetFormatError, match="truncated"):
        data.dataset_from_bytes(raw[:30])
    with pytest.raises(data.DatasetFormatError, match="trailing"):
        data.dataset_from_bytes(raw + b"\0")


def test_full_batch_is_permutation(pm):
    ds = data.collect(pm, "random", 2, 5, seed=0)
    sampler = data.BatchSampler(len(ds), len(ds), seed=3)
    obs, _, _ = data.sample_batch(ds, len(ds), sampler)
    assert sorted(map(bytes, obs)) == sorted(map(bytes, ds.obs))


def test_epoch_covers_every_index_once():
    sampler = data.BatchSampler(103, 10, seed=0)
    seen = np.concatenate([sampler.next_indices() for _ in range(sampler.batches_per_epoch())])
    assert np.array_equal(np.bincount(seen, minlength=103), np.ones(103, dtype=int))
    assert sampler.epoch == 1


def test_sampler_seed_reproducible():
    a = data.BatchSampler(50, 8, seed=11)
    b = data.BatchSampler(50, 8, seed=11)
    for _ in range(15):
        assert np.array_equal(a.next_indices(), b.next_indices())
    assert a.epoch == 3


def test_oversized_batch_rejected(pm):
    ds = data.collect(pm, "random", 1, 4, seed=0)
    with pytest.raises(ValueError):
        data.BatchSampler(len(ds), 5, seed=0)


def test_paired_eval_identity_and_scrambled():
    y = envs.damped_integrators(2)
    pairs = data.build_paired_eval(y, y, 1000, seed=0)
    assert len(pairs) == 1000
    assert np.array_equal(pairs.states_y, pairs.obs_x)
    x = y.with_(modality="scrambled", modality_seed=2)
    pairs = data.build_paired_eval(x, y, 250, seed=0)
    assert np.array_equal(pairs.obs_x, envs.observe(x, pairs.states_y))


def test_paired_eval_rejects_incompatible():
    with pytest.raises(ValueError):
        data.build_paired_eval(envs.chain_mass(4), envs.chain_mass(3), 10, seed=0)


def test_paired_splits_disjoint():
    y = envs.damped_integrators(2)
    a = data.build_paired_eval(y, y, 200, seed=1)
    data.check_disjoint(a, data.build_paired_eval(y, y, 200, seed=2))
    with pytest.raises(ValueError):
        data.check_disjoint(a, a)


def test_independent_domain_sampling():
    """X and Y samplers use distinct seeds, so batch indices never line up by construction."""
    sx = data.BatchSampler(500, 32, seed=[0, 11])
    sy = data.BatchSampler(500, 32, seed=[0, 12])
    same = sum(np.array_equal(sx.next_indices(), sy.next_indices()) for _ in range(20))
    assert same == 0
