import numpy as np
import pytest
from scipy import stats

from segqc.errors import GeometryOverflow, ShapeMismatch
from segqc.phantom import (
    CovariateModel,
    PhantomSpec,
    SamplerSpec,
    cohort_generate,
    draw_subject,
    icv_fractions,
    make_phantom,
    mc_segment,
    signed_distance_maps,
    simulate_subject,
    upsample_trilinear,
)
from segqc.uncertainty import mc_iou, structure_metrics
from segqc.volume import aggregate_mean_argmax, dice, mean_dice_over_structures


class TestPhantom:
    @pytest.mark.parametrize("k", [2, 4, 8])
    def test_structures_non_empty_and_labelled(self, k):
        truth, img = make_phantom(PhantomSpec(num_structures=k, seed=1))
        counts = np.bincount(truth.data.ravel(), minlength=k + 1)
        assert truth.num_classes == k + 1 and np.all(counts > 0)
        assert img.dims == truth.dims == (32, 32, 32)

    def test_deterministic(self):
        a = make_phantom(PhantomSpec(seed=5))
        b = make_phantom(PhantomSpec(seed=5))
        assert a[0] == b[0] and a[1] == b[1]

    def test_zero_texture_is_piecewise_constant(self):
        spec = PhantomSpec(texture_std=0.0, seed=2)
        truth, img = make_phantom(spec)
        means = np.asarray(spec.means(), dtype=np.float32)
        np.testing.assert_array_equal(img.data, means[truth.data])

    def test_geometry_overflow(self):
        with pytest.raises(GeometryOverflow):
            make_phantom(PhantomSpec(dims=(6, 6, 6), num_structures=5))
        with pytest.raises(GeometryOverflow):
            make_phantom(PhantomSpec(outer_extent=0.6))

    @pytest.mark.parametrize("dims", [(32, 32, 32), (48, 48, 48), (40, 32, 24)])
    def test_cohort_fractions_fit(self, dims):
        model = CovariateModel()
        for i in range(10):
            d = draw_subject(i, 0, model, (0.5, 0.5))
            truth, _ = make_phantom(PhantomSpec(dims=dims, num_structures=4, seed=d.phantom_seed, volume_fractions=d.fractions))
            assert set(np.unique(truth.data)) == {0, 1, 2, 3, 4}

    def test_signed_distance_sign(self):
        truth, _ = make_phantom(PhantomSpec(seed=3))
        sd = signed_distance_maps(truth)
        for c in range(truth.num_classes):
            inside = truth.data == c
            assert np.all(sd[c][inside] < 0) and np.all(sd[c][~inside] > 0)
        np.testing.assert_array_equal(np.argmin(sd, axis=0), truth.data)


def test_upsample_reproduces_constant_and_corners():
    coef = np.full((2, 3, 3, 3), 0.7)
    np.testing.assert_allclose(upsample_trilinear(coef, (5, 6, 7)), 0.7)
    coef = np.random.default_rng(0).normal(size=(1, 4, 4, 4))
    up = upsample_trilinear(coef, (9, 9, 9))
    assert up[0, 0, 0, 0] == pytest.approx(coef[0, 0, 0, 0])
    assert up[0, -1, -1, -1] == pytest.approx(coef[0, -1, -1, -1])


class TestSampler:
    def _phantom(self, seed=0):
        spec = PhantomSpec(seed=seed)
        truth, img = make_phantom(spec)
        return truth, img, signed_distance_maps(truth), spec.means()

    def test_zero_perturbation_is_exact(self):
        truth, img, sd, means = self._phantom()
        s = mc_segment(img, sd, SamplerSpec(n_samples=4, rho=0.0, dropout=0.0), means)
        assert all(lv == truth for lv in s.label_volumes)
        for m in structure_metrics(s):
            assert (m.cv, m.dmc, m.iou, m.mean_entropy) == (0.0, 1.0, 1.0, 0.0)
        for c in range(1, truth.num_classes):
            assert dice(aggregate_mean_argmax(s), truth, c) == 1.0

    def test_stacks_normalised(self):
        truth, img, sd, means = self._phantom()
        s = mc_segment(img, sd, SamplerSpec(n_samples=3, rho=1.5, seed=1), means)
        for ps in s.prob_stacks:
            assert np.max(np.abs(ps.data.sum(axis=0, dtype=np.float64) - 1)) < 1e-5

    def test_deterministic(self):
        truth, img, sd, means = self._phantom()
        spec = SamplerSpec(n_samples=3, rho=1.0, seed=9)
        assert mc_segment(img, sd, spec, means).prob_stacks == mc_segment(img, sd, spec, means).prob_stacks

    def test_shape_mismatch(self):
        truth, img, sd, means = self._phantom()
        with pytest.raises(ShapeMismatch):
            mc_segment(img, sd[:, :-1], SamplerSpec(), means)

    @pytest.mark.parametrize("kw", [dict(n_samples=1), dict(rho=-1), dict(temperature=0), dict(dropout=1.0)])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            SamplerSpec(**kw)

    @pytest.mark.slow
    def test_larger_rho_lowers_iou_and_dice(self):
        iou, dsc = {0.5: [], 2.0: []}, {0.5: []  , 2.0: []}
        for seed in range(20):
            truth, img, sd, means = self._phantom(seed)
            for rho in (0.5, 2.0):
                s = mc_segment(img, sd, SamplerSpec(rho=rho, seed=1000 + seed), means)
                final = aggregate_mean_argmax(s)
                iou[rho].append(np.mean([mc_iou(s, c) for c in range(1, 5)]))
                dsc[rho].append(mean_dice_over_structures(final, truth, range(1, 5)))
        assert np.mean(iou[2.0]) < np.mean(iou[0.5])
        assert np.mean(dsc[2.0]) < np.mean(dsc[0.5])


class TestCohort:
    def test_deterministic_and_order_free(self):
        a = cohort_generate(3, seed=4, dims=(24, 24, 24))
        b = cohort_generate(3, seed=4, dims=(24, 24, 24))
        assert a.table == b.table and a.truth_table == b.truth_table
        # subject i depends only on (seed, i), not on the cohort size
        c = cohort_generate(2, seed=4, dims=(24, 24, 24))
        assert c.table == a.table[:2]

    def test_two_subjects(self):
        c = cohort_generate(2, seed=0, dims=(24, 24, 24))
        assert len(c.table) == 2 and len(c.samples) == 2
        assert c.planted["2"]["diagnosis"] == CovariateModel().beta_diagnosis[0]

    def test_icv_fractions_sum_to_one(self):
        c = cohort_generate(1, seed=1, dims=(24, 24, 24))
        assert sum(icv_fractions(c.truths[0]).values()) == pytest.approx(1.0)

    def test_corrupt_fraction_one_uses_corrupt_range(self):
        model = CovariateModel()
        for i in range(5):
            assert 4.0 <= draw_subject(i, 0, model, (0.1, 0.2), 1.0, (4.0, 5.0)).rho <= 5.0

    @pytest.mark.slow
    def test_monotone_coupling_with_rho(self):
        model = CovariateModel()
        rho, bad_iou, bad_dice = [], [], []
        for i in range(100):
            sub = simulate_subject(draw_subject(i, 77, model, (0.2, 3.0)), (24, 24, 24), SamplerSpec(n_samples=6))
            final = sub.final_segmentation()
            rho.append(sub.draw.rho)
            bad_iou.append(1 - np.mean([mc_iou(sub.samples, c) for c in range(1, 5)]))
            bad_dice.append(1 - mean_dice_over_structures(final, sub.truth, range(1, 5)))
        assert stats.spearmanr(rho, bad_iou)[0] > 0
        assert stats.spearmanr(rho, bad_dice)[0] > 0
