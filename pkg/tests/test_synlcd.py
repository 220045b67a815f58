import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from siamdefect.synlcd import (
    NoEdgePoints, Perturbation, SynthesisSpec, apply_perturbations, build_dataset, builtin_patterns,
    edge_points, generate_abpt_defects, generate_line_defects, kmeans, plan_dataset, read_manifest,
    render_defects, sample_spec, synthesize_sample,
)
from siamdefect.synlcd.defects import LineDefect, blob_region, line_region, sample_blobs, sample_lines
from siamdefect.synlcd.perturb import NOISE_GAIN, NOISE_READ
from siamdefect.synlcd.synthesis import split_patterns

PATTERNS = builtin_patterns((64, 64))


def quadrant_board(n=64, dark=30, light=220):
    img = np.full((n, n), dark, dtype=np.uint8)
    img[: n // 2, n // 2:] = light
    img[n // 2:, : n // 2] = light
    return np.repeat(img[..., None], 3, axis=2)


def test_builtin_patterns():
    assert len(PATTERNS) == 10
    for img in PATTERNS.values():
        assert img.shape == (64, 64, 3) and img.dtype == np.uint8


def test_three_line_areas_give_three_components():
    layer, mask = generate_line_defects(PATTERNS["text"], 3, np.random.default_rng(4))
    labels, n = ndimage.label(mask > 0)
    assert n == 3
    assert set(np.unique(mask)) == {0, 1}
    for i in range(1, n + 1):
        rows = (labels == i).sum(axis=1)
        assert (rows == rows[0]).all() and 3 <= rows[0] <= 33
        assert (labels == i).any(axis=1).all()  # spans the full height


def test_zero_line_areas():
    layer, mask = generate_line_defects(PATTERNS["text"], 0, np.random.default_rng(0))
    assert not mask.any() and not layer.alpha.any()


def test_line_generation_is_deterministic():
    a = generate_line_defects(PATTERNS["rings"], 2, np.random.default_rng(9))
    b = generate_line_defects(PATTERNS["rings"], 2, np.random.default_rng(9))
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[0].premultiplied, b[0].premultiplied)


def test_line_region_has_exact_width_per_row():
    region = line_region((40, 50), LineDefect(10.3, 30.7, 5, "red", 0.5))
    assert (region.sum(axis=1) == 5).all()


def test_lines_stay_inside_their_strips():
    for seed in range(50):
        for line, (lo, hi) in zip(sample_lines((32, 128), 4, np.random.default_rng(seed)),
                                  [(0, 32), (32, 64), (64, 96), (96, 128)]):
            cols = np.nonzero(line_region((32, 128), line).any(axis=0))[0]
            assert cols.min() >= lo and cols.max() <= hi - 2


def brute_edges(gray, thresholds):
    h, w = gray.shape
    pts = set()
    for t in thresholds:
        b = gray >= t
        for y in range(h):
            for x in range(w):
                for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and b[y, x] != b[yy, xx]:
                        pts.add((y, x))
    return sorted(pts)


def test_edge_points_match_brute_force(rng):
    gray = rng.integers(0, 256, (12, 15))
    thresholds = tuple(range(50, 201, 10))
    assert [tuple(p) for p in edge_points(gray, thresholds)] == brute_edges(gray, thresholds)


def test_uniform_image_has_no_abpt():
    with pytest.warns(NoEdgePoints):
        layer, mask = generate_abpt_defects(np.full((32, 32, 3), 128, np.uint8), 3, np.random.default_rng(0))
    assert not mask.any()


def _arm(y, x, centre=63.5):
    """Index of the cross arm (left, right, top, bottom) a point belongs to, split by the diagonals."""
    dy, dx = np.asarray(y) - centre, np.asarray(x) - centre
    horizontal = np.abs(dx) > np.abs(dy)
    return np.where(horizontal, np.where(dx < 0, 0, 1), np.where(dy < 0, 2, 3))


@pytest.mark.parametrize("seed", range(5))
def test_checkerboard_blobs_sit_on_the_four_transition_arms(seed):
    board = quadrant_board(128)
    pts = np.array(brute_edges(board[..., 0], range(50, 201, 10)), dtype=float)
    arm_of = _arm(pts[:, 0], pts[:, 1])
    arm_inertia = sum(((pts[arm_of == a] - pts[arm_of == a].mean(0)) ** 2).sum() for a in range(4))

    centroids, labels = kmeans(pts, 4, np.random.default_rng(seed))
    assert ((pts - centroids[labels]) ** 2).sum() <= arm_inertia

    blobs = sample_blobs(board, 4, np.random.default_rng(seed))
    cy = np.array([b.cy for b in blobs])
    cx = np.array([b.cx for b in blobs])
    assert sorted(_arm(cy, cx).tolist()) == [0, 1, 2, 3]
    assert (np.minimum(np.abs(cy - 63.5), np.abs(cx - 63.5)) < 1).all()  # on the transition lines
    _, mask = render_defects(board.shape, blobs=blobs)
    assert ndimage.label(mask > 0)[1] == 4 and set(np.unique(mask)) == {0, 2}


def test_abpt_is_deterministic():
    a = generate_abpt_defects(PATTERNS["checker"], 3, np.random.default_rng(5))
    b = generate_abpt_defects(PATTERNS["checker"], 3, np.random.default_rng(5))
    assert np.array_equal(a[1], b[1])


def test_kmeans_recovers_separated_clusters(rng):
    centres = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0]])
    pts = np.concatenate([c + rng.normal(0, 1, (40, 2)) for c in centres])
    got, labels = kmeans(pts, 3, np.random.default_rng(1))
    for j in range(3):
        assert np.allclose(got[j], pts[labels == j].mean(axis=0))
    assert np.sort(np.linalg.norm(got[:, None] - centres[None], axis=-1).min(axis=1)).max() < 1


def test_kmeans_ties_go_to_lowest_index_and_empty_clusters_persist():
    pts = np.array([[0.0, 0.0]] * 5)
    got, labels = kmeans(pts, 3, np.random.default_rng(0))
    assert (labels == 0).all()
    assert np.allclose(got, 0)


def test_perturbation_identity(rng):
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.float64)
    assert np.array_equal(apply_perturbations(img, Perturbation()), img)


def test_perturbation_affine_arithmetic():
    out = apply_perturbations(np.full((8, 8, 3), 128.0), Perturbation(brightness_bias=6, contrast_alpha=0.5))
    assert np.array_equal(out, np.full((8, 8, 3), 70.0))


def test_perturbation_rgb_offset():
    p = Perturbation(rgb_deviation=9, rgb_offset=(9, -3, 0))
    out = apply_perturbations(np.full((4, 4, 3), 100.0), p)
    assert np.array_equal(out[0, 0], [109, 97, 100])


def test_iso_noise_variance_follows_model():
    img = np.full((128, 128, 3), 128.0)
    out = apply_perturbations(img, Perturbation(iso_noise=1.0, noise_seed=3))
    resid = (out - img).ravel()
    var = NOISE_GAIN * 128 + NOISE_READ ** 2
    sigma_of_var = var * np.sqrt(2 / resid.size)
    assert not np.array_equal(out, img)
    assert abs(resid.var() - var) < 3 * sigma_of_var


@pytest.mark.parametrize("kw", [dict(brightness_bias=7), dict(contrast_alpha=1.6), dict(iso_noise=1.5),
                                dict(rgb_deviation=3, rgb_offset=(4, 0, 0))])
def test_out_of_range_perturbation_rejected(kw):
    with pytest.raises(ValueError):
        apply_perturbations(np.zeros((2, 2, 3)), Perturbation(**kw))


def test_line_sample_classes():
    p = PATTERNS["blocks"]
    s = synthesize_sample(p, sample_spec(p, "line", 1, line_areas=2))
    assert set(np.unique(s.mask)) == {0, 1}


@pytest.mark.parametrize("seed", range(5))
def test_mixed_sample_classes(seed):
    p = PATTERNS["window"]
    s = synthesize_sample(p, sample_spec(p, "mixed", seed))
    assert set(np.unique(s.mask)) == {0, 1, 2}


def test_zero_defect_spec_gives_perturbed_ok():
    p = PATTERNS["huesweep"]
    spec = SynthesisSpec(seed=0, defect_type="line", perturbation=Perturbation(3, 0.8, 0.5, 6, (1, -6, 2), 11))
    s = synthesize_sample(p, spec)
    assert not s.mask.any()
    expected = np.clip(np.round(apply_perturbations(s.ok_image, spec.perturbation)), 0, 255)
    assert np.array_equal(s.ng_image, expected.astype(np.uint8))


@pytest.mark.parametrize("kind", ["line", "abpt", "mixed"])
def test_mask_equals_pre_blend_geometry(kind):
    p = PATTERNS["colorbars"]
    spec = sample_spec(p, kind, 21)
    s = synthesize_sample(p, spec)
    layer, _ = render_defects(p.shape, spec.lines, spec.blobs)
    assert np.array_equal(s.mask > 0, layer.alpha > 0)
    for blob in spec.blobs:
        assert (s.mask[blob_region(p.shape, blob)] == 2).all()


def test_defects_change_only_masked_pixels_before_perturbation():
    p = PATTERNS["graysteps"]
    spec = sample_spec(p, "mixed", 8)
    s = synthesize_sample(p, SynthesisSpec(**{**spec.__dict__, "perturbation": Perturbation()}))
    changed = np.any(s.ng_image != s.ok_image, axis=-1)
    assert not changed[s.mask == 0].any()


def test_synthesis_is_byte_identical():
    p = PATTERNS["rings"]
    a = synthesize_sample(p, sample_spec(p, "mixed", 77))
    b = synthesize_sample(p, sample_spec(p, "mixed", 77))
    assert a.ng_image.tobytes() == b.ng_image.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_reference_perturbation_is_independent():
    p = PATTERNS["grayramp"]
    spec = sample_spec(p, "line", 3, perturb_reference=True)
    s = synthesize_sample(p, spec)
    assert spec.reference_perturbation is not None
    assert not np.array_equal(s.ok_image, p)


def test_spec_round_trips_through_json():
    p = PATTERNS["checker"]
    spec = sample_spec(p, "mixed", 5, perturb_reference=True)
    assert SynthesisSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["line", "abpt", "mixed"]), st.sampled_from(sorted(PATTERNS)))
def test_generated_specs_lie_in_ranges(seed, kind, pid):
    assert sample_spec(PATTERNS[pid], kind, seed).violations() == []


def test_plan_matches_full_dataset_amounts():
    plan = plan_dataset(10, 300, clean_per_pattern=900)
    assert [plan[t] for t in ("line", "abpt", "mixed", "clean")] == [3000, 3000, 3000, 9000]
    assert (plan["train_patterns"], plan["test_patterns"]) == (7, 3)


def test_split_assigns_seven_of_ten_patterns_to_train():
    split = split_patterns([f"p{i}" for i in range(10)])
    assert sum(v == "train" for v in split.values()) == 7
    assert split_patterns(["only"]) == {"only": "train"}


def test_build_single_pattern(tmp_path):
    records = build_dataset({"pat": PATTERNS["text"]}, 2, tmp_path, seed=1)
    assert len(records) == 6 and len(read_manifest(tmp_path)) == 6
    names = sorted(p.name for p in (tmp_path / "train" / "ng").iterdir())
    assert names == [f"pat_{t}_{i:04d}.png" for t in ("abpt", "line", "mixed") for i in range(2)]
    for sub in ("ok", "mask"):
        assert sorted(p.name for p in (tmp_path / "train" / sub).iterdir()) == names


def test_build_is_byte_identical(tmp_path):
    pats = {k: PATTERNS[k] for k in ("text", "rings")}
    build_dataset(pats, 1, tmp_path / "a", seed=3, clean_per_pattern=1)
    build_dataset(pats, 1, tmp_path / "b", seed=3, clean_per_pattern=1)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b and len(files_a) == 1 + 3 * 8
    for f in files_a:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sample_streams_do_not_depend_on_generation_order(tmp_path):
    one = build_dataset({"a": PATTERNS["text"], "b": PATTERNS["rings"]}, 1, tmp_path / "x", seed=4)
    two = build_dataset({"a": PATTERNS["text"]}, 1, tmp_path / "y", seed=4, types=("line", "abpt", "mixed"))
    assert one[:3] == two


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write dataset"):
        build_dataset([PATTERNS["text"]], 1, blocker / "sub", seed=0)


def test_build_needs_patterns(tmp_path):
    with pytest.raises(ValueError):
        build_dataset({}, 1, tmp_path, seed=0)
