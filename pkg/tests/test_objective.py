"""Metric losses against brute-force oracles and the loss composition rules."""

import numpy as np
import pytest

from disreid.backbone import ConfigError
from disreid.gradcheck import finite_diff_check
from disreid.objective import (
    ALL_COMPONENTS,
    LossReport,
    REPORT_FIELDS,
    compose_ce,
    compose_total,
    intra_class_loss,
    pairwise_euclidean,
    triplet_loss,
    validate_components,
)
from disreid.tensor import ShapeError, Tensor


def triplet_oracle(f, labels, margin):
    """Batch-hard triplet by explicit loops over every pair."""
    b = f.shape[0]
    dist = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            dist[i, j] = np.sqrt(((f[i] - f[j]) ** 2).sum() + 1e-12)
    total = 0.0
    for a in range(b):
        hardest_pos = max(
            dist[a, j] for j in range(b) if j != a and labels[j] == labels[a]
        )
        hardest_neg = min(dist[a, j] for j in range(b) if labels[j] != labels[a])
        total += max(hardest_pos - hardest_neg + margin, 0.0)
    return total / b


class TestComponents:
    def test_all_components_fixed(self):
        assert ALL_COMPONENTS == frozenset(
            {"tlm", "fwg", "sao", "l_lr", "l_w", "l_ic", "l_dis", "l_cam"}
        )

    def test_unknown_component_lists_valid_set(self):
        with pytest.raises(ConfigError, match="l_dis"):
            validate_components({"tlm", "warp"})

    def test_valid_subset_passes_through(self):
        assert validate_components(["tlm", "fwg"]) == frozenset({"tlm", "fwg"})


class TestIntraClass:
    def test_two_point_class(self):
        # class {0, 2} in one dimension: mean 1, deviations +-1, mean square 1
        loss = intra_class_loss(Tensor(np.array([[0.0], [2.0]])), [5, 5])
        np.testing.assert_allclose(loss.item(), 1.0, atol=1e-12)

    def test_classes_add(self):
        f = Tensor(np.array([[0.0], [2.0], [10.0], [14.0]]))
        loss = intra_class_loss(f, [0, 0, 1, 1])
        np.testing.assert_allclose(loss.item(), 1.0 + 4.0, atol=1e-12)

    def test_singleton_class_contributes_zero(self):
        # class 7 is a singleton (zero deviation); class 1 is {0, 2} in dim 0
        f = Tensor(np.array([[3.0, 1.0], [0.0, 0.0], [2.0, 0.0]]))
        loss = intra_class_loss(f, [7, 1, 1])
        np.testing.assert_allclose(loss.item(), 1.0, atol=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            f = rng.standard_normal((8, 5))
            labels = rng.integers(0, 3, size=8)
            want = 0.0
            for value in np.unique(labels):
                members = f[labels == value]
                want += ((members - members.mean(axis=0)) ** 2).mean(axis=0).sum()
            got = intra_class_loss(Tensor(f), labels)
            np.testing.assert_allclose(got.item(), want, atol=1e-10)

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            intra_class_loss(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=int))


class TestTriplet:
    def test_pairwise_euclidean_oracle(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal((6, 4))
        got = pairwise_euclidean(Tensor(f)).data
        for i in range(6):
            for j in range(6):
                want = np.sqrt(((f[i] - f[j]) ** 2).sum() + 1e-12)
                np.testing.assert_allclose(got[i, j], want, atol=1e-12)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p, k = rng.integers(2, 5), rng.integers(2, 4)
            f = rng.standard_normal((p * k, 6))
            labels = np.repeat(rng.permutation(10)[:p], k)
            got = triplet_loss(Tensor(f), labels, margin=0.3).item()
            want = triplet_oracle(f, labels, 0.3)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_identical_embeddings_give_margin(self):
        f = Tensor(np.ones((4, 3)))
        loss = triplet_loss(f, [0, 0, 1, 1], margin=0.3)
        np.testing.assert_allclose(loss.item(), 0.3, atol=1e-9)

    def test_well_separated_clusters_give_zero(self):
        f = np.array([[0.0, 0], [0.1, 0], [100.0, 0], [100.1, 0]])
        loss = triplet_loss(Tensor(f), [0, 0, 1, 1], margin=0.3)
        np.testing.assert_allclose(loss.item(), 0.0, atol=1e-12)

    def test_anchor_without_positive_rejected(self):
        with pytest.raises(ConfigError, match="positive"):
            triplet_loss(Tensor(np.zeros((3, 2))), [0, 1, 2])

    def test_anchor_without_negative_rejected(self):
        with pytest.raises(ConfigError, match="negative"):
            triplet_loss(Tensor(np.zeros((3, 2))), [0, 0, 0])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        f = Tensor(rng.standard_normal((6, 4)), requires_grad=True)
        labels = np.array([0, 0, 1, 1, 2, 2])

        def fn():
            return triplet_loss(f, labels, margin=0.3)

        report = finite_diff_check(fn, {"f": f})
        assert report.passed, str(report)


class TestComposition:
    def test_ce_composite_value(self):
        got = compose_ce(1.0, 2.0, 3.0, 4.0, aux_scale=0.1)
        np.testing.assert_allclose(got, 1.0 + 0.1 * 5.0 + 0.1 * 4.0, atol=1e-12)

    def test_cam_scale_defaults_to_aux_and_can_differ(self):
        base = compose_ce(1.0, 0.0, 0.0, 2.0, aux_scale=0.25)
        np.testing.assert_allclose(base, 1.5, atol=1e-12)
        override = compose_ce(1.0, 0.0, 0.0, 2.0, aux_scale=0.25, cam_scale=0.5)
        np.testing.assert_allclose(override, 2.0, atol=1e-12)

    def test_total_value(self):
        got = compose_total(1.0, 0.2, 0.3, 0.4, 0.5, aux_scale=0.1)
        np.testing.assert_allclose(got, 1.0 + 0.2 + 0.3 + 0.4 + 0.05, atol=1e-12)

    def test_disabled_terms_reduce_exactly(self):
        full = compose_total(2.0, 0.0, 0.0, 0.0, 0.0)
        np.testing.assert_allclose(full, 2.0, atol=1e-15)

    def test_scale_bounds_enforced(self):
        with pytest.raises(ConfigError, match="aux_scale"):
            compose_ce(1.0, 0.0, 0.0, 0.0, aux_scale=1.5)
        with pytest.raises(ConfigError, match="cam_scale"):
            compose_ce(1.0, 0.0, 0.0, 0.0, cam_scale=-0.1)

    def test_negative_term_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            compose_total(1.0, -0.5, 0.0, 0.0, 0.0)

    def test_tensor_terms_compose_on_tape(self):
        ce = Tensor(np.array(1.0), requires_grad=True)
        tri = Tensor(np.array(0.5), requires_grad=True)
        total = compose_total(ce, tri, 0.0, 0.0, 0.0)
        total.backward()
        np.testing.assert_allclose(ce.grad, 1.0)
        np.testing.assert_allclose(tri.grad, 1.0)


class TestLossReport:
    def test_dict_covers_all_fields_in_order(self):
        report = LossReport(ce_id=1.0, total=2.0)
        d = report.to_dict()
        assert tuple(d) == REPORT_FIELDS
        assert d["ce_id"] == 1.0 and d["total"] == 2.0

    def test_non_finite_terms_named(self):
        report = LossReport(tri=np.nan, dis=np.inf)
        assert report.non_finite_terms() == ["tri", "dis"]
