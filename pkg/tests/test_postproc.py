import numpy as np
import pytest

from uadseg.postproc import (
    BuiltinRefiner,
    EmptyMaskError,
    PostprocParams,
    PromptSet,
    RefinerTransportError,
    fill_holes_slicewise,
    fuse_masks,
    largest_component_3d,
    make_prompts,
    morph_clean,
    otsu_binarize,
    refine_slice,
    residual,
    segment_modality,
    threshold,
)
from uadseg.volcore import MultimodalVolume, ShapeMismatchError

from helpers_oracles import (
    connected_components_bfs,
    dice_direct,
    fill_holes_slice_bruteforce,
    largest_component_bruteforce,
    morph_clean_bruteforce,
    otsu_exhaustive,
    region_grow_reference,
)


def vol_of(data):
    data = np.asarray(data, dtype=np.float32)
    return MultimodalVolume(modalities=["t1c"], data=data[None])


# ---------------------------------------------------------------- residuals


def test_residual_identity_constant_and_sign():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((3, 4, 4)).astype(np.float32)
    orig = vol_of(base)
    assert not residual(orig, vol_of(base)).data.any()
    assert np.allclose(residual(orig, vol_of(base - 2)).data, 2.0)
    assert not residual(orig, vol_of(base + 5)).data.any()


def test_residual_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        residual(vol_of(np.zeros((2, 3, 3))), vol_of(np.zeros((2, 4, 4))))


# ---------------------------------------------------------------- threshold


def test_threshold_fraction_dominates():
    m = np.zeros((2, 3, 3), np.float32)
    m[0, 0, 0] = 10.0
    m[1, 1, 1] = 1.5
    out, tau = threshold(m)
    assert tau == pytest.approx(2.0)
    assert out[0, 0, 0] == 10.0 and out[1, 1, 1] == 0.0


def test_threshold_floor_dominates():
    m = np.zeros((2, 3, 3), np.float32)
    m[0, 0, 0] = 3.0
    m[1, 0, 0] = 1.3
    out, tau = threshold(m)
    assert tau == pytest.approx(1.2)
    assert out[0, 0, 0] == 3.0 and out[1, 0, 0] == pytest.approx(1.3)


def test_threshold_all_zero():
    out, tau = threshold(np.zeros((2, 2, 2), np.float32))
    assert tau == pytest.approx(1.2)
    assert not out.any()


# --------------------------------------------------------------------- otsu


def test_otsu_two_clusters():
    m = np.zeros((2, 10, 10), np.float32)
    flat = m.reshape(-1)
    flat[:100] = 1.5
    flat[100:200] = 8.0
    mask = otsu_binarize(m)
    assert mask.sum() == 100
    assert np.all(m[mask] == 8.0)


def test_otsu_empty_and_single_value():
    assert not otsu_binarize(np.zeros((2, 2, 2), np.float32)).any()
    m = np.zeros((2, 2, 2), np.float32)
    m[0, 0, 0] = m[1, 1, 1] = 4.2
    mask = otsu_binarize(m)
    assert mask.sum() == 2 and mask[0, 0, 0] and mask[1, 1, 1]


def test_otsu_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for trial in range(100):
        m = np.zeros((4, 8, 8), np.float32)
        n_low = rng.integers(1, 120)
        n_high = rng.integers(1, 120)
        flat = m.reshape(-1)
        pos = rng.choice(flat.size, size=n_low + n_high, replace=False)
        flat[pos[:n_low]] = rng.uniform(1.2, 3.0, n_low)
        flat[pos[n_low:]] = rng.uniform(4.0, 9.0, n_high)
        mask = otsu_binarize(m)
        vals = m[m > 0]
        k = otsu_exhaustive(vals)
        if k is None:
            expected = m > 0
        else:
            lo, hi = float(vals.min()), float(vals.max())
            width = (hi - lo) / 256
            bins = np.minimum(((m - lo) / width).astype(np.int64), 255)
            expected = (m > 0) & (bins > k)
        assert np.array_equal(mask, expected), f"trial {trial}"


# --------------------------------------------------------------- morphology


def test_morph_removes_isolated_voxel():
    m = np.zeros((1, 7, 7), bool)
    m[0, 3, 3] = True
    assert not morph_clean(m).any()


def test_morph_preserves_solid_square_up_to_corners():
    m = np.zeros((1, 9, 9), bool)
    m[0, 2:7, 2:7] = True
    out = morph_clean(m)
    assert np.array_equal(out, morph_clean_bruteforce(m))
    assert out.sum() == 21  # 5x5 square minus the four corners the opening rounds off
    assert out[0, 3:6, 3:6].all()


def test_morph_fills_square_hole():
    m = np.zeros((1, 9, 9), bool)
    m[0, 2:7, 2:7] = True
    m[0, 4, 4] = False
    out = morph_clean(m)
    assert np.array_equal(out, morph_clean_bruteforce(m))
    assert out[0, 4, 4]  # the hole is closed
    assert out[0, 3:6, 2:7].any() and out[0, 2:7, 3:6].any()


def test_morph_empty_is_empty():
    assert not morph_clean(np.zeros((2, 5, 5), bool)).any()


def test_morph_matches_bruteforce_on_random_masks():
    rng = np.random.default_rng(2)
    for trial in range(100):
        shape = (rng.integers(1, 5), rng.integers(5, 17), rng.integers(5, 17))
        m = rng.random(shape) < rng.uniform(0.2, 0.7)
        assert np.array_equal(morph_clean(m), morph_clean_bruteforce(m)), f"trial {trial}"


# ------------------------------------------------------- connected components


def test_largest_component_basic():
    m = np.zeros((3, 10, 10), bool)
    m[0:2, 0:5, 0:5] = True  # 50 voxels
    m[2, 8, 8] = True
    out = largest_component_3d(m)
    assert out.sum() == 50 and not out[2, 8, 8]


def test_largest_component_empty():
    assert not largest_component_3d(np.zeros((2, 4, 4), bool)).any()


def test_largest_component_tie_break_raster_order():
    m = np.zeros((1, 5, 9), bool)
    m[0, 3, 6:8] = True  # later in raster order
    m[0, 1, 1:3] = True  # earlier
    out = largest_component_3d(m)
    assert out[0, 1, 1] and out[0, 1, 2]
    assert not out[0, 3, 6]


def test_largest_component_matches_bruteforce():
    rng = np.random.default_rng(3)
    for trial in range(100):
        shape = (rng.integers(2, 17), rng.integers(2, 17), rng.integers(2, 17))
        m = rng.random(shape) < rng.uniform(0.05, 0.4)
        assert np.array_equal(
            largest_component_3d(m), largest_component_bruteforce(m)
        ), f"trial {trial}"


def test_fill_holes_matches_bruteforce():
    rng = np.random.default_rng(4)
    for _ in range(50):
        m = rng.random((2, 12, 12)) < 0.5
        got = fill_holes_slicewise(m)
        expected = np.stack([fill_holes_slice_bruteforce(sl) for sl in m])
        assert np.array_equal(got, expected)


# ------------------------------------------------------------------ prompts


def test_prompts_singleton_pixel():
    m = np.zeros((12, 12), bool)
    m[7, 9] = True
    p = make_prompts(m, seed=0)
    assert p.bbox == (9, 7, 9, 7)
    assert p.points == [(9, 7)] * 5


def test_prompts_block_containment():
    m = np.zeros((12, 12), bool)
    m[4:7, 5:8] = True
    p = make_prompts(m, seed=1)
    assert p.bbox == (5, 4, 7, 6)
    for x, y in p.points:
        assert 5 <= x <= 7 and 4 <= y <= 6 and m[y, x]


def test_prompts_deterministic():
    rng = np.random.default_rng(5)
    m = rng.random((40, 40)) < 0.6
    a = make_prompts(m, seed=99)
    b = make_prompts(m, seed=99)
    assert a == b
    c = make_prompts(m, seed=100)
    assert a.points != c.points or a.bbox == c.bbox


def test_prompts_empty_mask_rejected():
    with pytest.raises(EmptyMaskError):
        make_prompts(np.zeros((5, 5), bool), seed=0)


# ----------------------------------------------------------------- refiners


class ScriptedRefiner:
    """Returns queued (mask, confidence) pairs; records call count."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = 0

    def refine(self, image, prompts, initial_mask):
        self.calls += 1
        result = self.outcomes.pop(0)
        if isinstance(result, Exception):
            raise result
        return result


def _slice_fixture():
    image = np.zeros((16, 16), np.float32)
    initial = np.zeros((16, 16), bool)
    initial[4:8, 4:8] = True
    better = np.zeros((16, 16), bool)
    better[4:9, 4:9] = True
    return image, initial, better


def test_refine_accepts_first_confident():
    image, initial, better = _slice_fixture()
    refiner = ScriptedRefiner([(better, 0.95)])
    out = refine_slice(image, initial, refiner, seed=0)
    assert out.accepted and out.attempts == 1 and out.confidence == 0.95
    assert np.array_equal(out.mask, better)


def test_refine_exhausts_three_attempts_then_falls_back():
    image, initial, better = _slice_fixture()
    refiner = ScriptedRefiner([(better, 0.5), (better, 0.6), (better, 0.55)])
    out = refine_slice(image, initial, refiner, seed=0)
    assert not out.accepted and out.attempts == 3
    assert out.confidence == pytest.approx(0.6)  # best observed, still below the gate
    assert np.array_equal(out.mask, initial)
    assert refiner.calls == 3


def test_refine_gate_is_inclusive_at_point_nine():
    image, initial, better = _slice_fixture()
    out = refine_slice(image, initial, ScriptedRefiner([(better, 0.9)]), seed=0)
    assert out.accepted and out.attempts == 1


def test_refine_transport_failure_falls_back():
    image, initial, _ = _slice_fixture()
    refiner = ScriptedRefiner([RefinerTransportError("boom")])
    out = refine_slice(image, initial, refiner, seed=0)
    assert not out.accepted and out.attempts == 1
    assert np.array_equal(out.mask, initial)


def test_refine_uses_fresh_seeds_per_attempt():
    image = np.zeros((32, 32), np.float32)
    initial = np.zeros((32, 32), bool)
    initial[4:20, 4:20] = True
    seen = []

    class Spy:
        def refine(self, img, prompts, init):
            seen.append(tuple(prompts.points))
            return init, 0.0

    refine_slice(image, initial, Spy(), seed=7)
    assert len(seen) == 3 and len(set(seen)) == 3


def test_builtin_refiner_homogeneous_block():
    image = np.zeros((20, 20), np.float32)
    image[5:15, 5:15] = 10.0
    block = np.zeros((20, 20), bool)
    block[5:15, 5:15] = True
    prompts = make_prompts(block, seed=3)
    mask, conf = BuiltinRefiner().refine(image, prompts, block)
    assert np.array_equal(mask, block)
    assert conf == pytest.approx(1.0)


def test_builtin_refiner_background_prompts_low_confidence():
    rng = np.random.default_rng(6)
    image = rng.normal(0.0, 0.05, (20, 20)).astype(np.float32)
    image[2:6, 2:6] += 10.0
    initial = np.zeros((20, 20), bool)
    initial[2:6, 2:6] = True  # the bright region the pipeline found
    # hand-built prompts pointing at background-valued pixels
    prompts = PromptSet(bbox=(10, 10, 17, 17), points=[(15, 15)] * 5, seed=0)
    mask, conf = BuiltinRefiner().refine(image, prompts, initial)
    assert mask.sum() <= 64  # stays inside the bbox
    assert conf < 0.1  # no overlap with the bright initial mask


def test_builtin_refiner_beats_or_equals_reference_on_phantom_slice():
    from uadseg.phantom import PhantomSpec, generate_phantom
    from uadseg.volcore import zscore_normalize

    vol, labels = generate_phantom(PhantomSpec(seed=31))
    normed, _ = zscore_normalize(vol)
    z = int(np.argmax((labels.data == 3).sum(axis=(1, 2))))
    et = labels.data[z] == 3
    image = normed.modality("t1c")[z]
    prompts = make_prompts(et, seed=5)
    mask, _ = BuiltinRefiner().refine(image, prompts, et)
    ref = region_grow_reference(image, prompts.points, prompts.bbox, tol=1.0)
    assert dice_direct(mask, et) >= dice_direct(ref, et) - 1e-12


# --------------------------------------------------------- segment_modality


def make_pair(base, bump=None):
    orig = base.copy()
    if bump is not None:
        orig[bump] += 3.0
    recon = base
    return (
        MultimodalVolume(modalities=["t1c", "t2f"], data=np.stack([orig, orig])),
        MultimodalVolume(modalities=["t1c", "t2f"], data=np.stack([recon, recon])),
    )


def test_segment_zero_residual_empty_mask():
    rng = np.random.default_rng(7)
    base = rng.normal(0, 0.1, (4, 24, 24)).astype(np.float32)
    vol, recon = make_pair(base)
    assert not segment_modality(vol, vol, "t1c").any()


def test_segment_finds_bright_blob():
    rng = np.random.default_rng(8)
    base = rng.normal(0, 0.05, (6, 24, 24)).astype(np.float32)
    bump = np.zeros((6, 24, 24), bool)
    bump[2:5, 8:16, 8:16] = True
    vol, recon = make_pair(base, bump)
    mask = segment_modality(vol, recon, "t1c")
    assert dice_direct(mask, bump) > 0.9


def test_segment_echo_refiner_matches_refiner_off():
    class EchoRefiner:
        def refine(self, image, prompts, initial_mask):
            return initial_mask.copy(), 1.0

    rng = np.random.default_rng(9)
    base = rng.normal(0, 0.05, (6, 24, 24)).astype(np.float32)
    bump = np.zeros((6, 24, 24), bool)
    bump[1:4, 4:12, 4:12] = True
    vol, recon = make_pair(base, bump)
    plain = segment_modality(vol, recon, "t1c")
    echoed = segment_modality(vol, recon, "t1c", refiner=EchoRefiner())
    assert np.array_equal(plain, echoed)


def test_segment_stage_monotonicity_and_recompose():
    rng = np.random.default_rng(10)
    base = rng.normal(0, 0.3, (5, 24, 24)).astype(np.float32)
    bump = np.zeros((5, 24, 24), bool)
    bump[1:4, 6:14, 6:14] = True
    vol, recon = make_pair(base, bump)
    mask, stages = segment_modality(vol, recon, "t1c", collect_stages=True)
    supra = stages["residual"] >= stages["tau"]
    assert np.array_equal(stages["thresholded"] > 0, supra)
    assert not (stages["otsu"] & ~supra).any()  # otsu only removes
    assert not (stages["largest"] & ~stages["morph"]).any()  # CC only removes
    # recompose: re-running the tail stages from the otsu stage gives the mask
    assert np.array_equal(
        largest_component_3d(morph_clean(stages["otsu"])), stages["refined"]
    )
    assert np.array_equal(mask, stages["refined"])


# ------------------------------------------------------------------- fusion


def ball(shape, center, r):
    zz, yy, xx = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    return (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2 <= r * r


def test_fuse_empty():
    z = np.zeros((4, 8, 8), bool)
    assert not fuse_masks(z, z).data.any()


def test_fuse_nested_spheres():
    shape = (16, 16, 16)
    inner = ball(shape, (8, 8, 8), 3)
    outer = ball(shape, (8, 8, 8), 6)
    fused = fuse_masks(inner, outer)
    assert np.array_equal(fused.data == 3, inner)
    assert np.array_equal(fused.data == 2, outer & ~inner)
    assert not (fused.data == 1).any()  # no gaps -> no NET


def test_fuse_hollow_shell_yields_net():
    shape = (16, 16, 16)
    shell = ball(shape, (8, 8, 8), 5) & ~ball(shape, (8, 8, 8), 3)
    outer_ring = ball(shape, (8, 8, 8), 7) & ~ball(shape, (8, 8, 8), 5)
    fused = fuse_masks(shell, outer_ring)
    # slice-wise hole fill must recover the cavity inside the shell
    net = fused.data == 1
    union = shell | (outer_ring & ~shell)
    expected = np.zeros(shape, bool)
    for z in range(shape[0]):
        expected[z] = fill_holes_slice_bruteforce(union[z]) & ~union[z]
    assert np.array_equal(net, expected)
    assert net[8, 8, 8]  # the cavity center is non-enhancing tumor


def test_fuse_labels_disjoint_and_nested():
    rng = np.random.default_rng(11)
    t1c = rng.random((6, 12, 12)) < 0.2
    t2f = rng.random((6, 12, 12)) < 0.3
    fused = fuse_masks(t1c, t2f)
    et = fused.data == 3
    snfh = fused.data == 2
    net = fused.data == 1
    assert not (et & snfh).any() and not (et & net).any() and not (snfh & net).any()
    assert np.array_equal(et, t1c)
    tc = et | net
    wt = tc | snfh
    assert not (et & ~tc).any() and not (tc & ~wt).any()
