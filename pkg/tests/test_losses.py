import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from vidcorr.affinity import Affinity
from vidcorr.errors import DimensionError, ValidationError
from vidcorr.losses import (CoordinateGrid, LossReport, LossSwitches,
                            loss_concentration, loss_cycle, loss_intra_inter,
                            loss_self, loss_sparse, loss_total)


def random_affinity(gen, rows, cols, dtype=torch.float32):
    return Affinity(torch.softmax(torch.randn(rows, cols, generator=gen, dtype=dtype),
                                  dim=1))


class TestL1Losses:
    def test_identical_images_zero(self, gen):
        img = torch.rand(3, 8, 8, generator=gen)
        assert float(loss_self(img, img)) == 0.0

    def test_zeros_vs_ones_is_one(self):
        assert float(loss_self(torch.zeros(3, 4, 4), torch.ones(3, 4, 4))) == 1.0

    def test_matches_elementwise_oracle(self, gen):
        a = torch.rand(3, 5, 5, generator=gen, dtype=torch.float64)
        b = torch.rand(3, 5, 5, generator=gen, dtype=torch.float64)
        oracle = float(np.mean(np.abs(a.numpy() - b.numpy())))
        assert float(loss_self(a, b)) == pytest.approx(oracle, abs=1e-7)
        assert float(loss_intra_inter(a, b)) == pytest.approx(oracle, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_self(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))


class TestLossSparse:
    def test_empty_block_zero(self):
        assert float(loss_sparse(torch.zeros(4, 0))) == 0.0

    def test_zero_matrix(self):
        assert float(loss_sparse(torch.zeros(3, 6))) == 0.0

    def test_full_negative_mass(self):
        # All rows put their whole mass on negatives: mean entry 1 / cols.
        neg = torch.full((5, 8), 1.0 / 8)
        assert float(loss_sparse(neg)) == pytest.approx(1.0 / 8, abs=1e-7)

    def test_matches_mean_oracle(self, gen):
        neg = torch.rand(4, 6, generator=gen, dtype=torch.float64) * 0.1
        assert float(loss_sparse(neg)) == pytest.approx(float(neg.numpy().mean()),
                                                        abs=1e-7)

    def test_negative_entries_rejected(self):
        with pytest.raises(ValidationError):
            loss_sparse(torch.tensor([[-0.1, 0.2]]))

    def test_row_mass_consistency(self, gen):
        # mean positive row-mass == 1 - neg_cols * mean-negative-entry
        full = torch.softmax(torch.randn(6, 12, generator=gen, dtype=torch.float64), 1)
        pos, neg = full[:, :4], full[:, 4:]
        sparse = float(loss_sparse(neg))
        mean_pos_mass = float(pos.sum(1).mean())
        assert mean_pos_mass == pytest.approx(1.0 - neg.shape[1] * sparse, abs=1e-6)


class TestLossCycle:
    def test_inverse_permutations_zero(self):
        perm = torch.tensor([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        fwd = Affinity(perm)
        bwd = Affinity(perm.T.contiguous())
        assert float(loss_cycle(fwd, bwd)) == 0.0

    def test_identity_pair_zero(self):
        eye = Affinity(torch.eye(4))
        assert float(loss_cycle(eye, eye)) == 0.0

    def test_uniform_matches_product_oracle(self):
        n = 3
        uni = Affinity(torch.full((n, n), 1.0 / n, dtype=torch.float64))
        got = float(loss_cycle(uni, uni))
        prod = np.full((n, n), 1.0 / n) @ np.full((n, n), 1.0 / n)
        oracle = float(((prod - np.eye(n)) ** 2).mean())
        assert got == pytest.approx(oracle, abs=1e-7)

    def test_random_matches_product_oracle(self, gen):
        fwd = random_affinity(gen, 4, 6, dtype=torch.float64)
        bwd = random_affinity(gen, 6, 4, dtype=torch.float64)
        got = float(loss_cycle(fwd, bwd))
        prod = fwd.values.numpy() @ bwd.values.numpy()
        oracle = float(((prod - np.eye(4)) ** 2).mean())
        assert got == pytest.approx(oracle, abs=1e-7)

    def test_shape_mismatch(self, gen):
        with pytest.raises(DimensionError):
            loss_cycle(random_affinity(gen, 4, 6), random_affinity(gen, 4, 6))


class TestLossConcentration:
    def test_one_hot_rows_zero(self):
        grid = CoordinateGrid.make(2, 2)
        a = Affinity(torch.eye(4))
        assert float(loss_concentration(a, grid)) == pytest.approx(0.0, abs=1e-6)

    def test_uniform_two_cells(self):
        # Two cells at x = 0 and 1: uniform rows have spread 0.25.
        grid = CoordinateGrid.make(1, 2)
        a = Affinity(torch.full((2, 2), 0.5))
        assert float(loss_concentration(a, grid)) == pytest.approx(0.25, abs=1e-6)

    def test_matches_weighted_variance_oracle(self, gen):
        grid = CoordinateGrid.make(3, 4)
        a = random_affinity(gen, 5, 12, dtype=torch.float64)
        got = float(loss_concentration(a, grid))
        coords = grid.values.numpy()
        vals = a.values.numpy()
        spreads = []
        for i in range(5):
            center = vals[i] @ coords
            spreads.append(sum(vals[i, j] * ((coords[j] - center) ** 2).sum()
                               for j in range(12)))
        assert got == pytest.approx(float(np.mean(spreads)), abs=1e-6)

    def test_grid_mismatch(self, gen):
        with pytest.raises(DimensionError):
            loss_concentration(random_affinity(gen, 4, 6), CoordinateGrid.make(2, 2))


class TestLossTotal:
    def test_all_zero(self):
        total, report = loss_total(LossSwitches(), 0.0, 0.0, 0.0, 0.0, 0.0)
        assert float(total) == 0.0 and report.total == 0.0

    def test_only_self_enabled(self):
        switches = LossSwitches(inter=False, sparse=False, cycle=False,
                                concentration=False)
        total, report = loss_total(switches, self_loss=0.3)
        assert float(total) == pytest.approx(0.3)
        assert report.intra_inter_loss == 0.0
        assert report.total == pytest.approx(0.3)

    def test_all_enabled_sum(self):
        total, report = loss_total(LossSwitches(), 0.1, 0.2, 0.05, 0.03, 0.02)
        assert float(total) == pytest.approx(0.40, abs=1e-7)
        assert report.total == pytest.approx(0.40, abs=1e-7)

    def test_disabled_reported_zero_and_excluded(self):
        switches = LossSwitches(inter=False, sparse=False)
        total, report = loss_total(switches, self_loss=0.5, cycle_loss=0.1,
                                   concentration_loss=0.2)
        assert float(total) == pytest.approx(0.8)
        assert report.intra_inter_loss == 0.0 and report.sparse_loss == 0.0

    def test_ablation_reduction_matches_self_plus_others(self):
        # Disabling the contrastive terms leaves reconstruction + regularizers.
        switches = LossSwitches(inter=False, sparse=False)
        total, _ = loss_total(switches, self_loss=0.4, intra_inter_loss=None,
                              sparse_loss=None, cycle_loss=0.1, concentration_loss=0.05)
        assert float(total) == pytest.approx(0.55)

    def test_missing_enabled_component_raises(self):
        with pytest.raises(ValidationError):
            loss_total(LossSwitches(), self_loss=0.1)

    def test_report_validation(self):
        with pytest.raises(ValidationError):
            LossReport(self_loss=-0.1)
        with pytest.raises(ValidationError):
            LossReport(self_loss=float("nan"))

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
    def test_total_is_sum_of_enabled(self, a, b, c):
        switches = LossSwitches(sparse=False, concentration=False)
        total, report = loss_total(switches, self_loss=a, intra_inter_loss=b,
                                   cycle_loss=c)
        assert float(total) == pytest.approx(a + b + c, rel=1e-6, abs=1e-6)
        assert report.sparse_loss == 0.0
