import numpy as np
import pytest

from diststn.data import (
    ASYMMETRY_THRESHOLD,
    ClassTemplate,
    PaaSplit,
    asymmetry_score,
    build_paa_split,
    choose_noncoop,
    generate_dataset,
    in_arc,
    labels,
    lobe,
    make_templates,
    render,
    rotate,
    scatterer_positions,
    stack_images,
)
from diststn.errors import EmptyClass, EmptySet, InvalidArg
from diststn.harness import evaluate


def single_scatterer(center=40.0, width=30.0) -> ClassTemplate:
    return ClassTemplate(
        positions=np.array([[0.0, 0.0]]),
        amplitudes=np.array([1.0]),
        lobe_centers=np.array([center]),
        lobe_widths=np.array([width]),
        spot_radii=np.array([0.05]),
    )


class TestTemplates:
    def test_same_seed_same_templates(self):
        a, b = make_templates(3, 6, seed=11), make_templates(3, 6, seed=11)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.positions, tb.positions)
            np.testing.assert_array_equal(ta.lobe_centers, tb.lobe_centers)

    def test_different_seeds_differ(self):
        a, b = make_templates(3, 6, seed=1), make_templates(3, 6, seed=2)
        assert not np.array_equal(a[0].positions, b[0].positions)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_template_is_asymmetric(self, seed):
        for t in make_templates(10, 8, seed):
            assert asymmetry_score(t.positions) > ASYMMETRY_THRESHOLD

    def test_asymmetry_score_brute_force(self, rng):
        pos = rng.normal(size=(5, 2))
        best = min(
            np.hypot(*(-pos[a] - pos[b])) for a in range(5) for b in range(5)
        )
        assert asymmetry_score(pos) == pytest.approx(best, abs=1e-15)

    def test_symmetric_layout_scores_zero(self):
        pos = np.array([[0.3, 0.1], [-0.3, -0.1], [0.0, 0.2], [0.0, -0.2]])
        assert asymmetry_score(pos) == 0.0

    @pytest.mark.parametrize("c,k", [(1, 5), (4, 2)])
    def test_bad_sizes(self, c, k):
        with pytest.raises(InvalidArg):
            make_templates(c, k, seed=0)


class TestRender:
    def test_noise_free_is_deterministic(self):
        tpl = make_templates(2, 6, seed=0)[1]
        a = render(tpl, 33.0, 17.0, 32)
        b = render(tpl, 33.0, 17.0, 32)
        assert a.image.tobytes() == b.image.tobytes()

    def test_lobe_peak_beats_opposite_aspect(self):
        tpl = single_scatterer(center=40.0, width=30.0)
        c = 32 // 2 - 1  # pixel next to the center; the spot is centered at 15.5
        front = render(tpl, 40.0, 17.0, 32).image[c, c]
        back = render(tpl, 220.0, 17.0, 32).image[c, c]
        assert front > back
        # the ratio is set by the lobe formula alone
        expected = (0.1 + lobe(40.0, tpl.lobe_centers, tpl.lobe_widths)[0]) / (
            0.1 + lobe(220.0, tpl.lobe_centers, tpl.lobe_widths)[0]
        )
        assert front / back == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("a,delta", [(0.0, 90.0), (17.5, 200.0), (300.0, 123.4)])
    def test_rotation_consistency(self, a, delta):
        tpl = make_templates(2, 7, seed=3)[0]
        later = scatterer_positions(tpl, a + delta)
        rotated = rotate(scatterer_positions(tpl, a), delta)
        np.testing.assert_allclose(later, rotated, atol=1e-12)

    def test_depression_scales_amplitude(self):
        tpl = make_templates(2, 6, seed=0)[0]
        hi = render(tpl, 10.0, 17.0, 32).image.astype(float)
        lo = render(tpl, 10.0, 15.0, 32).image.astype(float)
        np.testing.assert_allclose(lo, hi * (1 + 0.02 * (15 - 17)), rtol=1e-6, atol=1e-30)

    def test_speckle_is_seeded(self):
        tpl = make_templates(2, 6, seed=0)[0]
        a = render(tpl, 10.0, 17.0, 32, noise_seed=(1, 2))
        b = render(tpl, 10.0, 17.0, 32, noise_seed=(1, 2))
        c = render(tpl, 10.0, 17.0, 32, noise_seed=(1, 3))
        assert a.image.tobytes() == b.image.tobytes()
        assert a.image.tobytes() != c.image.tobytes()

    def test_speckle_has_unit_mean_intensity(self):
        tpl = make_templates(2, 6, seed=0)[0]
        clean = render(tpl, 10.0, 17.0, 32).image.astype(float) ** 2
        noisy = np.mean(
            [render(tpl, 10.0, 17.0, 32, noise_seed=s).image.astype(float) ** 2 for s in range(400)], axis=0
        )
        mask = clean > 0.1 * clean.max()
        assert np.mean(noisy[mask] / clean[mask]) == pytest.approx(1.0, abs=0.03)

    def test_amplitudes_finite_non_negative(self):
        for chip in generate_dataset(num_classes=3, size=32, angle_step=45.0, seed=5):
            assert np.isfinite(chip.image).all() and (chip.image >= 0).all()

    def test_aspect_normalized(self):
        tpl = make_templates(2, 6, seed=0)[0]
        assert render(tpl, 370.0, 17.0, 16).aspect_deg == 10.0
        assert render(tpl, -90.0, 17.0, 16).aspect_deg == 270.0

    def test_minimum_size(self):
        with pytest.raises(InvalidArg):
            render(make_templates(2, 6, seed=0)[0], 0.0, 17.0, 15)


class TestGenerate:
    def test_counts(self):
        chips = generate_dataset(num_classes=10, size=16, angle_step=5.0, seed=0, speckle=False)
        for dep in (17.0, 15.0):
            subset = [c for c in chips if c.depression_deg == dep]
            assert len(subset) == 72 * 10
            for cls in range(10):
                assert len({c.aspect_deg for c in subset if c.class_id == cls}) == 72

    def test_test_aspects_are_offset(self):
        chips = generate_dataset(num_classes=2, size=16, angle_step=10.0, seed=0)
        train = {c.aspect_deg for c in chips if c.depression_deg == 17.0}
        test = {c.aspect_deg for c in chips if c.depression_deg == 15.0}
        assert min(test) == 5.0
        assert not train & test

    def test_deterministic(self):
        a = generate_dataset(num_classes=3, size=16, angle_step=30.0, seed=8)
        b = generate_dataset(num_classes=3, size=16, angle_step=30.0, seed=8)
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))


def _hist(chips, bins=36):
    return np.bincount([int(c.aspect_deg // (360 / bins)) for c in chips], minlength=bins)


class TestPaaSplit:
    def test_all_noncoop_first_half(self, small_chips):
        split = build_paa_split(small_chips, range(4), "first_half", seed=0)
        assert all(c.aspect_deg < 180 for c in split.train + split.validation)
        assert split.violations() == []

    def test_second_half(self, small_chips):
        split = build_paa_split(small_chips, [1], "second_half", seed=0)
        assert all(c.aspect_deg >= 180 for c in split.train if c.class_id == 1)

    def test_no_noncoop_spans_full_circle(self, small_chips):
        split = build_paa_split(small_chips, [], coop_fraction=1.0, val_fraction=0.0, seed=0)
        assert (_hist(split.train, bins=12) > 0).all()

    def test_test_chips_cover_every_bin(self):
        chips = generate_dataset(num_classes=2, size=16, angle_step=5.0, seed=0, speckle=False)
        split = build_paa_split(chips, [0, 1], seed=0)
        assert (_hist(split.test) > 0).all()

    def test_five_of_ten(self):
        chips = generate_dataset(num_classes=10, size=16, angle_step=30.0, seed=0, speckle=False)
        nc = choose_noncoop(10, 5, seed=0)
        split = build_paa_split(chips, nc, seed=0)
        assert len(split.noncoop_classes) == 5
        assert split.violations() == []

    def test_coop_subsampled_to_fraction(self, small_chips):
        split = build_paa_split(small_chips, [0], coop_fraction=0.5, val_fraction=0.0, seed=0)
        counts = np.bincount(labels(split.train), minlength=4)
        assert counts[0] == 6  # arc-limited: 6 of 12 aspects
        assert list(counts[1:]) == [6, 6, 6]

    def test_validation_is_stratified(self, small_chips):
        split = build_paa_split(small_chips, [], coop_fraction=1.0, val_fraction=0.25, seed=0)
        assert list(np.bincount(labels(split.validation))) == [3, 3, 3, 3]

    def test_disjoint(self, small_chips):
        split = build_paa_split(small_chips, [2], seed=4)
        ids = {id(c) for c in split.train}
        assert not ids & {id(c) for c in split.validation}
        assert not ids & {id(c) for c in split.test}

    def test_violations_catch_tampering(self, small_chips):
        split = build_paa_split(small_chips, [0], seed=0)
        leak = next(c for c in small_chips if c.class_id == 0 and c.aspect_deg >= 180 and c.depression_deg == 17)
        bad = PaaSplit(split.train + [leak], split.validation, split.test, split.noncoop_classes, "first_half")
        assert any("non-cooperative" in p for p in bad.violations())
        bad = PaaSplit(split.train + split.test[:1], split.validation, split.test, frozenset(), "first_half")
        assert any("test chip" in p for p in bad.violations())

    def test_empty_arc(self, small_chips):
        chips = [c for c in small_chips if not (c.class_id == 3 and c.aspect_deg < 180)]
        with pytest.raises(EmptyClass):
            build_paa_split(chips, [3], "first_half")

    def test_no_test_chips(self, small_chips):
        with pytest.raises(EmptySet):
            build_paa_split([c for c in small_chips if c.depression_deg == 17], [0])

    @pytest.mark.parametrize(
        "kwargs", [dict(arc="left"), dict(coop_fraction=0.0), dict(coop_fraction=1.5), dict(val_fraction=1.0)]
    )
    def test_invalid_args(self, small_chips, kwargs):
        with pytest.raises(InvalidArg):
            build_paa_split(small_chips, [0], **kwargs)

    def test_in_arc_boundaries(self):
        assert in_arc(0.0, "first_half") and not in_arc(180.0, "first_half")
        assert in_arc(180.0, "second_half") and in_arc(359.9, "second_half")


class TestChooseNoncoop:
    def test_deterministic(self):
        assert choose_noncoop(10, 5, seed=3) == choose_noncoop(10, 5, seed=3)

    @pytest.mark.parametrize("count", [0, 1, 9, 10])
    def test_count(self, count):
        ids = choose_noncoop(10, count, seed=0)
        assert len(set(ids)) == count and all(0 <= i < 10 for i in ids)

    def test_out_of_range(self):
        with pytest.raises(InvalidArg):
            choose_noncoop(10, 11, seed=0)


def test_nearest_neighbour_shows_ood_gap():
    chips = generate_dataset(num_classes=10, size=32, angle_step=10.0, seed=0)
    split = build_paa_split(chips, range(10), "first_half", val_fraction=0.0, seed=0)
    train_x = stack_images(split.train).reshape(len(split.train), -1)
    train_y = labels(split.train)

    def nearest(x):
        flat = x.reshape(len(x), -1)
        d = ((flat[:, None, :] - train_x[None]) ** 2).sum(-1)
        return train_y[d.argmin(axis=1)]

    report = evaluate(nearest, split.test)
    seen = report.arc_accuracy("first_half")
    unseen = report.arc_accuracy("second_half")
    assert seen > unseen + 0.3
