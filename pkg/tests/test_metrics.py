"""Masked MAE/PSNR/SSIM/Dice against direct-formula and windowed oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mri2ct.errors import DataError
from mri2ct.metrics import (PSNR_CAP_DB, dice, evaluate, mae, psnr, ssim,
                            threshold_mask)
from mri2ct.volume import Volume
from oracles import naive_ssim


def vol(data, **kw):
    return Volume(np.asarray(data, dtype=np.float32), **kw)


def full_mask(extents):
    return Volume(np.ones(extents, dtype=np.float32), modality="MASK",
                  unit="arbitrary")


class TestMae:
    def test_identical(self, rng):
        x = vol(rng.standard_normal((4, 4, 4)) * 100)
        assert mae(x, vol(x.data.copy()), full_mask((4, 4, 4))) == 0.0

    def test_constant_offset_inside_mask(self, rng):
        ref = rng.standard_normal((4, 4, 4)).astype(np.float32) * 50
        pred = ref.copy()
        mask = np.zeros((4, 4, 4), dtype=np.float32)
        mask[1:3, 1:3, 1:3] = 1.0
        pred[mask > 0] += 10.0
        pred[mask == 0] += 500.0          # outside-mask error must not count
        got = mae(vol(pred), vol(ref), Volume(mask, modality="MASK",
                                              unit="arbitrary"))
        assert abs(got - 10.0) < 1e-5

    def test_matches_masked_loop_oracle(self, rng):
        pred = (rng.standard_normal((5, 5, 5)) * 100).astype(np.float32)
        ref = (rng.standard_normal((5, 5, 5)) * 100).astype(np.float32)
        mask = (rng.random((5, 5, 5)) > 0.4).astype(np.float32)
        total = n = 0
        for d in range(5):
            for h in range(5):
                for w in range(5):
                    if mask[d, h, w]:
                        total += abs(float(pred[d, h, w]) - float(ref[d, h, w]))
                        n += 1
        got = mae(vol(pred), vol(ref), Volume(mask, modality="MASK",
                                              unit="arbitrary"))
        assert abs(got - total / n) < 1e-9

    def test_symmetry_and_triangle_inequality(self, rng):
        m = full_mask((4, 4, 4))
        a, b, c = (vol(rng.standard_normal((4, 4, 4)) * 100) for _ in range(3))
        assert mae(a, b, m) == mae(b, a, m)
        assert mae(a, c, m) <= mae(a, b, m) + mae(b, c, m) + 1e-9


class TestPsnr:
    def test_zero_db_when_mse_equals_range_squared(self):
        ref = vol(np.zeros((2, 2, 2)))
        pred = vol(np.full((2, 2, 2), 4024.0))
        assert abs(psnr(pred, ref, full_mask((2, 2, 2)))) < 1e-9

    def test_identical_capped(self, rng):
        x = vol(rng.standard_normal((3, 3, 3)))
        assert psnr(x, vol(x.data.copy()), full_mask((3, 3, 3))) == PSNR_CAP_DB

    def test_worked_formula_example(self):
        ref = vol(np.zeros((1, 1, 2)))
        pred = vol(np.array([[[0.1, 0.1]]]))           # MSE = 0.01
        got = psnr(pred, ref, full_mask((1, 1, 2)), data_range=2.0)
        assert abs(got - 10 * np.log10(400.0)) < 1e-6
        assert abs(got - 26.0206) < 1e-3

    def test_strictly_decreasing_in_mse(self, rng):
        ref = vol(np.zeros((3, 3, 3)))
        m = full_mask((3, 3, 3))
        values = [psnr(vol(np.full((3, 3, 3), err)), ref, m)
                  for err in (1.0, 5.0, 25.0, 125.0)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSsim:
    def test_identical_is_exactly_one(self, rng):
        x = vol(rng.standard_normal((9, 9, 9)) * 300)
        assert ssim(x, vol(x.data.copy()), full_mask((9, 9, 9))) == 1.0

    def test_anticorrelated_negative(self, rng):
        # window means must stay small against c1 while the variance
        # dominates c2, so the structure term's -1 drives the product
        base = (rng.standard_normal((9, 9, 9)) * 300).astype(np.float32)
        base -= base.mean()
        got = ssim(vol(base), vol(-base), full_mask((9, 9, 9)))
        assert got < 0

    def test_matches_naive_windowed_oracle(self, rng):
        x = (rng.standard_normal((11, 11, 11)) * 500).astype(np.float32)
        y = (x + rng.standard_normal((11, 11, 11)) * 100).astype(np.float32)
        mask = (rng.random((11, 11, 11)) > 0.3).astype(np.float32)
        got = ssim(vol(x), vol(y), Volume(mask, modality="MASK", unit="arbitrary"))
        expect = naive_ssim(x, y, mask)
        assert abs(got - expect) < 1e-6

    def test_symmetric(self, rng):
        a = vol(rng.standard_normal((9, 9, 9)) * 100)
        b = vol(rng.standard_normal((9, 9, 9)) * 100)
        m = full_mask((9, 9, 9))
        assert abs(ssim(a, b, m) - ssim(b, a, m)) < 1e-12

    def test_volume_smaller_than_window_rejected(self):
        with pytest.raises(DataError, match="window"):
            ssim(vol(np.zeros((4, 4, 4))), vol(np.zeros((4, 4, 4))),
                 full_mask((4, 4, 4)))


class TestDice:
    def _mask(self, data):
        return Volume(np.asarray(data, dtype=np.float32), modality="MASK",
                      unit="arbitrary")

    def test_identical_nonempty(self):
        m = np.zeros((4, 4, 4))
        m[1:3, 1:3, 1:3] = 1
        assert dice(self._mask(m), self._mask(m.copy())) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4, 4))
        b = np.zeros((4, 4, 4))
        a[0, 0, 0] = 1
        b[3, 3, 3] = 1
        assert dice(self._mask(a), self._mask(b)) == 0.0

    def test_shifted_cube_half_overlap(self):
        a = np.zeros((6, 6, 6))
        b = np.zeros((6, 6, 6))
        a[1:3, 1:3, 1:3] = 1                 # 8-voxel cube
        b[1:3, 1:3, 2:4] = 1                 # shifted: 4 voxels overlap
        assert dice(self._mask(a), self._mask(b)) == 0.5

    def test_both_empty_defined_as_one(self):
        z = self._mask(np.zeros((3, 3, 3)))
        assert dice(z, self._mask(np.zeros((3, 3, 3)))) == 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 7))
    def test_symmetric_property(self, na, nb):
        rng = np.random.default_rng(na * 8 + nb)
        a = np.zeros(27)
        b = np.zeros(27)
        a[rng.choice(27, size=na, replace=False)] = 1
        b[rng.choice(27, size=nb, replace=False)] = 1
        ma = self._mask(a.reshape(3, 3, 3))
        mb = self._mask(b.reshape(3, 3, 3))
        assert dice(ma, mb) == dice(mb, ma)
        assert 0.0 <= dice(ma, mb) <= 1.0

    def test_monotone_in_intersection_at_fixed_sizes(self):
        # same |A|,|B|, growing overlap -> growing dice
        scores = []
        for overlap in (0, 1, 2, 3, 4):
            a = np.zeros((4, 4, 4))
            b = np.zeros((4, 4, 4))
            a[0, 0, 0:4] = 1
            b[0, 0, 4 - overlap:4] = 1
            b[1, 0, 0:4 - overlap] = 1
            scores.append(dice(self._mask(a), self._mask(b)))
        assert all(x < y for x, y in zip(scores, scores[1:]))


class TestEvaluate:
    def test_identical_volumes_full_report(self, rng):
        data = (rng.standard_normal((12, 12, 12)) * 400).astype(np.float32)
        pred = vol(data.copy())
        ref = vol(data.copy())
        mask = full_mask((12, 12, 12))
        bone_p = threshold_mask(pred, 300.0)
        bone_r = threshold_mask(ref, 300.0)
        report = evaluate(pred, ref, mask, {"bone": (bone_p, bone_r)})
        assert report.mae_hu == 0.0
        assert report.ssim == 1.0
        assert report.psnr_db == PSNR_CAP_DB
        assert report.dice["bone"] == 1.0
        assert report.mask_voxels == 12 ** 3
        d = report.to_dict()
        assert d["config"]["ssim"]["window"] == 7
        assert d["config"]["data_range"] == 4024.0

    def test_report_json_is_deterministic(self, rng):
        data = (rng.standard_normal((9, 9, 9)) * 100).astype(np.float32)
        pred, ref = vol(data + 5), vol(data.copy())
        mask = full_mask((9, 9, 9))
        assert evaluate(pred, ref, mask).to_json() == evaluate(pred, ref, mask).to_json()

    def test_extent_mismatch_rejected(self):
        with pytest.raises(DataError, match="extents"):
            mae(vol(np.zeros((3, 3, 3))), vol(np.zeros((4, 4, 4))),
                full_mask((3, 3, 3)))
