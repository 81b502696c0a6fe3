import numpy as np
import pytest

from uadseg.phantom import (
    PhantomSpec,
    PhantomSpecError,
    brain_mask,
    generate_phantom,
    generate_phantom_detailed,
)
from uadseg.volcore import split_pseudo_volumes

from helpers_oracles import connected_components_bfs


def test_deterministic_generation():
    spec = PhantomSpec(seed=7)
    vol_a, lab_a = generate_phantom(spec)
    vol_b, lab_b = generate_phantom(spec)
    assert vol_a.data.tobytes() == vol_b.data.tobytes()
    assert lab_a.data.tobytes() == lab_b.data.tobytes()


def test_does_not_touch_global_rng():
    np.random.seed(1234)
    before = np.random.random(4)
    np.random.seed(1234)
    generate_phantom(PhantomSpec(seed=3))
    after = np.random.random(4)
    assert np.array_equal(before, after)


def test_healthy_phantom_has_no_labels():
    vol, labels = generate_phantom(PhantomSpec(seed=1, tumor_present=False))
    assert not labels.data.any()
    healthy, anom = split_pseudo_volumes(vol, labels)
    assert len(anom) == 0
    assert len(healthy) == vol.shape[1]


def test_two_tumors_make_two_wt_components():
    _, labels = generate_phantom(PhantomSpec(seed=11, tumor_count=2))
    _, count = connected_components_bfs(labels.data != 0, connectivity=26)
    assert count == 2


def test_anomalous_slice_count_matches_label_scan():
    vol, labels = generate_phantom(PhantomSpec(seed=5))
    with_tumor = sorted({z for z, y, x in zip(*np.nonzero(labels.data))})
    assert with_tumor, "phantom should contain a tumor"
    _, anom = split_pseudo_volumes(vol, labels)
    assert len(anom) == len(with_tumor)
    assert anom.z_indices.tolist() == with_tumor


def test_tumor_fraction_within_contract():
    spec = PhantomSpec(seed=9)
    _, labels, info = generate_phantom_detailed(spec)
    frac = info.tumor_voxels / info.brain_voxels
    assert 0.001 <= frac <= 0.05
    assert info.tumor_voxels == int((labels.data != 0).sum())


@pytest.mark.parametrize("seed", [2, 13, 77])
def test_contrast_invariants(seed):
    spec = PhantomSpec(seed=seed)
    vol, labels, _ = generate_phantom_detailed(spec)
    brain = brain_mask(spec)
    healthy = brain & (labels.data == 0)
    t1c = vol.modality("t1c")
    t2f = vol.modality("t2f")
    healthy_t1c_mean = t1c[healthy].mean()
    healthy_t1c_std = t1c[healthy].std()
    et = labels.data == 3
    assert t1c[et].mean() >= healthy_t1c_mean + 2 * healthy_t1c_std
    flair_region = (labels.data == 2) | et
    healthy_t2f_mean = t2f[healthy].mean()
    healthy_t2f_std = t2f[healthy].std()
    assert t2f[flair_region].mean() >= healthy_t2f_mean + 2 * healthy_t2f_std


def test_subregion_topology():
    _, labels = generate_phantom(PhantomSpec(seed=21))
    lab = labels.data
    et, net, snfh = lab == 3, lab == 1, lab == 2
    assert not (et & net).any() and not (et & snfh).any() and not (net & snfh).any()
    # tumor core must be enclosed by the whole tumor
    tc = et | net
    wt = tc | snfh
    assert (tc & ~wt).sum() == 0
    assert et.any() and net.any() and snfh.any()


def test_tumor_too_large_rejected():
    with pytest.raises(PhantomSpecError):
        generate_phantom(PhantomSpec(shape=(10, 24, 24), seed=0, tumor_count=1))


def test_too_many_tumors_rejected():
    with pytest.raises(PhantomSpecError):
        generate_phantom(PhantomSpec(seed=0, tumor_count=40))


def test_finite_and_shape():
    vol, labels = generate_phantom(PhantomSpec(seed=4, shape=(16, 64, 64)))
    assert vol.shape == (4, 16, 64, 64)
    assert labels.shape == (16, 64, 64)
    assert np.isfinite(vol.data).all()
