"""Exact probability engine: distribution surgery, reweighting, bounds."""

import math

import pytest

from semcorrupt.exact import (
    BINARY_INPUTS,
    POSTERIOR_FLOOR,
    FiniteCorruption,
    JointTable,
    UndefinedWeightError,
    _reweighted_measure,
    biased_posterior,
    cond_indep_gap,
    corruption_bound,
    corruption_randomize,
    enumerate_binary_predictors,
    extend_with_corruption,
    nuisance_randomize,
    predictor_accuracy,
)
from semcorrupt.families import (
    flip_noise_family,
    negated_coordinate_family,
    xor_sign_family,
)

from reference import ref_flip_accuracy


def table_sum(table):
    return math.fsum(table.cells.values())


SECOND_COORD = FiniteCorruption.deterministic(lambda x: x[1], "second-coordinate")
CONSTANT = FiniteCorruption.deterministic(lambda x: 0, "constant")
MASK_FIRST = FiniteCorruption.deterministic(lambda x: (0.0, x[1]), "mask-first")


# ---------------------------------------------------------------------------
# joint tables


class TestJointTable:
    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            JointTable(("y",), {(0,): 0.4, (1,): 0.4})

    def test_rejects_negative_mass(self):
        with pytest.raises(ValueError):
            JointTable(("y",), {(0,): 1.001, (1,): -0.001})

    def test_tiny_negative_rounding_clamped(self):
        # a -1e-16 cell is numerical dust: clamped away rather than rejected
        t = JointTable(("y",), {(0,): 1.0, (1,): -1e-16})
        assert t.cells.get((1,), 0.0) == 0.0

    def test_rejects_duplicate_variables(self):
        with pytest.raises(ValueError):
            JointTable(("y", "y"), {(0, 0): 1.0})

    def test_rejects_wrong_key_length(self):
        with pytest.raises(ValueError):
            JointTable(("y", "z"), {(0,): 1.0})

    def test_marginal_and_prob(self):
        p = flip_noise_family(1).joint(0.9)
        y = p.marginal("y").cells
        assert y[(-1,)] == pytest.approx(0.5, abs=1e-15)
        assert y[(1,)] == pytest.approx(0.5, abs=1e-15)
        assert p.prob(y=1, z=1) == pytest.approx(0.45, abs=1e-15)

    def test_posterior(self):
        p = flip_noise_family(1).joint(0.9)
        post = p.posterior("y", "z")
        assert post[1][1] == pytest.approx(0.9, abs=1e-12)
        assert post[-1][1] == pytest.approx(0.1, abs=1e-12)

    def test_extend_independent(self):
        base = JointTable(("y",), {(0,): 0.25, (1,): 0.75})
        ext = base.extend_independent("d", {0: 0.5, 1: 0.5})
        assert ext.variables == ("y", "d")
        assert ext.prob(y=1, d=0) == pytest.approx(0.375, abs=1e-15)
        assert table_sum(ext) == pytest.approx(1.0, abs=1e-12)

    def test_with_derived_merges_collisions(self):
        base = JointTable(("y",), {(0,): 0.5, (1,): 0.5})
        ext = base.with_derived("s", lambda y: 0, ("y",))
        assert ext.marginal("s").cells[(0,)] == pytest.approx(1.0, abs=1e-15)

    def test_l1(self):
        a = JointTable(("y",), {(0,): 0.5, (1,): 0.5})
        b = JointTable(("y",), {(0,): 0.8, (1,): 0.2})
        assert a.l1(b) == pytest.approx(0.6, abs=1e-15)
        assert b.l1(a) == pytest.approx(0.6, abs=1e-15)
        assert a.l1(a) == 0.0


# ---------------------------------------------------------------------------
# breaking the label-nuisance link exactly


class TestNuisanceRandomize:
    def test_fixed_point_when_already_independent(self):
        p = flip_noise_family(1).joint(0.5)  # relationship parameter 1/2 = independence
        out = nuisance_randomize(p)
        assert out.l1(p.marginal("y", "z", "x")) < 1e-14

    def test_label_nuisance_product_form(self):
        p = flip_noise_family(1).joint(0.9)
        out = nuisance_randomize(p)
        yz = out.marginal("y", "z").cells
        y = out.marginal("y").cells
        z = out.marginal("z").cells
        for (yy, zz), q in yz.items():
            assert q == pytest.approx(y[(yy,)] * z[(zz,)], abs=1e-14)

    def test_extreme_member_quarter_mass(self):
        # at the deterministic extreme the joint table alone cannot define
        # the broken-link distribution; the family form can
        out = nuisance_randomize(flip_noise_family(1), 1.0)
        assert out.marginal("y", "z").cells[(1, 1)] == pytest.approx(0.25, abs=1e-12)

    def test_family_form_agrees_with_table_form(self):
        fam = flip_noise_family(1)
        for rho in (0.2, 0.5, 0.9):
            via_family = nuisance_randomize(fam, rho)
            via_table = nuisance_randomize(fam.joint(rho))
            assert via_family.l1(via_table) < 1e-12

    def test_table_form_rejects_degenerate_joint(self):
        with pytest.raises(ValueError):
            nuisance_randomize(flip_noise_family(1).joint(1.0))

    def test_family_form_requires_rho(self):
        with pytest.raises(ValueError):
            nuisance_randomize(flip_noise_family(1))

    def test_table_form_rejects_spurious_rho(self):
        with pytest.raises(ValueError):
            nuisance_randomize(flip_noise_family(1).joint(0.5), 0.5)

    def test_semantics_conditionals_untouched(self):
        # p(x | y, z) must survive the surgery wherever (y, z) keeps mass
        p = flip_noise_family(2).joint(0.8)
        out = nuisance_randomize(p)
        yz_in = p.marginal("y", "z").cells
        yz_out = out.marginal("y", "z").cells
        for (y, z, x), q in p.marginal("y", "z", "x").cells.items():
            got = out.cells[(y, z, x)] / yz_out[(y, z)]
            want = q / yz_in[(y, z)]
            assert got == pytest.approx(want, abs=1e-12)

    def test_normalized(self):
        for rho in (0.1, 0.3, 0.7, 0.9):
            out = nuisance_randomize(flip_noise_family(1).joint(rho))
            assert abs(table_sum(out) - 1.0) < 1e-12
        for rho in (0.0, 0.5, 1.0):
            out = nuisance_randomize(flip_noise_family(1), rho)
            assert abs(table_sum(out) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# reweighting by corruption posteriors


class TestCorruptionRandomize:
    def test_raw_measure_of_label_revealing_corruption(self):
        # x == y, so conditioning on the corrupted covariate reveals the label
        # and the raw reweighted measure is the product of marginals
        # restricted to the diagonal
        p = JointTable(("y", "z", "x"), {(0, 0, 0): 0.3, (1, 0, 1): 0.7})
        ident = FiniteCorruption.deterministic(lambda x: x, "copy")
        raw = _reweighted_measure(p, ident)
        assert raw == pytest.approx({(0, 0): 0.09, (1, 1): 0.49}, abs=1e-15)

    def test_label_revealing_corruption_normalized_output(self):
        p = JointTable(("y", "z", "x"), {(0, 0, 0): 0.3, (1, 0, 1): 0.7})
        ident = FiniteCorruption.deterministic(lambda x: x, "copy")
        out = corruption_randomize(p, ident)
        assert out.prob(y=0, x=0) == pytest.approx(0.09 / 0.58, abs=1e-12)
        assert out.prob(y=1, x=1) == pytest.approx(0.49 / 0.58, abs=1e-12)

    def test_constant_corruption_changes_nothing(self):
        p = flip_noise_family(1).joint(0.9)
        out = corruption_randomize(p, CONSTANT)
        assert out.l1(p.marginal("y", "x")) < 1e-14

    def test_nuisance_extracting_corruption_reaches_broken_link(self):
        # corrupting down to the nuisance coordinate reweights the training
        # joint exactly onto the nuisance-randomized one
        p = flip_noise_family(1).joint(0.9)
        got = corruption_randomize(p, SECOND_COORD)
        want = nuisance_randomize(p).marginal("y", "x")
        assert got.l1(want) < 1e-12

    def test_normalized(self):
        p = flip_noise_family(2).joint(0.7)
        out = corruption_randomize(p, SECOND_COORD)
        assert abs(table_sum(out) - 1.0) < 1e-12

    def test_zero_posterior_raises(self):
        eps = 1e-13
        p = JointTable(("y", "z", "x"), {(0, 0, 0): 1.0 - eps, (1, 0, 0): eps})
        assert eps < POSTERIOR_FLOOR
        ident = FiniteCorruption.deterministic(lambda x: x, "copy")
        with pytest.raises(UndefinedWeightError):
            corruption_randomize(p, ident)


# ---------------------------------------------------------------------------
# posteriors used by the biased models


class TestBiasedPosterior:
    def test_independent_case_returns_marginal(self):
        p = flip_noise_family(1).joint(0.5)
        post = biased_posterior(p, "z")
        for z in (-1, 1):
            assert post.at(z)[1] == pytest.approx(0.5, abs=1e-12)

    def test_deterministic_relationship(self):
        post = biased_posterior(flip_noise_family(1).joint(1.0), "z")
        assert post.at(1)[1] == pytest.approx(1.0, abs=1e-12)

    def test_strong_relationship(self):
        post = biased_posterior(flip_noise_family(1).joint(0.9), "z")
        assert post.at(1)[1] == pytest.approx(0.9, abs=1e-12)

    def test_corruption_conditioner_matches_nuisance_conditioner(self):
        # extracting the nuisance coordinate conditions exactly like z itself
        p = flip_noise_family(1).joint(0.9)
        via_var = biased_posterior(p, "z")
        via_corr = biased_posterior(p, SECOND_COORD)
        for z in (-1, 1):
            for y in (-1, 1):
                assert via_corr.at(z)[y] == pytest.approx(via_var.at(z)[y], abs=1e-12)

    def test_zero_mass_lookup_raises(self):
        post = biased_posterior(flip_noise_family(1).joint(0.9), "z")
        with pytest.raises(UndefinedWeightError):
            post.at(42)


# ---------------------------------------------------------------------------
# sign-predictor accuracies (the worked 2-member construction)


class TestPredictorAccuracy:
    def test_constant_predictor_on_balanced_labels(self):
        p = flip_noise_family(1).joint(0.3)
        assert predictor_accuracy(p, lambda x: 1) == pytest.approx(0.5, abs=1e-15)

    def test_semantic_coordinate_is_stable(self):
        for rho in (0.0, 1.0):
            p = flip_noise_family(1).joint(rho)
            assert predictor_accuracy(p, lambda x: x[0]) == pytest.approx(0.90, abs=1e-12)

    def test_nuisance_coordinate_is_unstable(self):
        preds = dict(zip(BINARY_INPUTS, (1, -1, 1, -1)))  # follows -x[1]
        assert predictor_accuracy(flip_noise_family(1).joint(0.0), preds) == pytest.approx(1.0, abs=1e-12)
        assert predictor_accuracy(flip_noise_family(1).joint(1.0), preds) == pytest.approx(0.0, abs=1e-12)

    def test_mapping_and_callable_agree(self):
        p = flip_noise_family(1).joint(0.7)
        for bits in range(16):
            outs = tuple(-1 if (bits >> (3 - j)) & 1 else 1 for j in range(4))
            mapping = dict(zip(BINARY_INPUTS, outs))
            fn = lambda x, m=mapping: m[x]
            assert predictor_accuracy(p, mapping) == pytest.approx(
                predictor_accuracy(p, fn), abs=1e-15)

    def test_mapping_missing_input_raises(self):
        p = flip_noise_family(1).joint(0.5)
        with pytest.raises(ValueError):
            predictor_accuracy(p, {(-1, -1): 1})


class TestEnumerateBinaryPredictors:
    def test_sixteen_rows_in_index_order(self):
        rows = enumerate_binary_predictors()
        assert [r.index for r in rows] == list(range(16))

    def test_prediction_encoding(self):
        rows = enumerate_binary_predictors()
        assert rows[0].predictions == (1, 1, 1, 1)
        assert rows[5].predictions == (1, -1, 1, -1)
        assert rows[15].predictions == (-1, -1, -1, -1)

    def test_accuracies_match_closed_form_oracle(self):
        for row in enumerate_binary_predictors():
            as_map = dict(zip(BINARY_INPUTS, row.predictions))
            assert row.acc_low == pytest.approx(ref_flip_accuracy(as_map, 0.0), abs=1e-12)
            assert row.acc_high == pytest.approx(ref_flip_accuracy(as_map, 1.0), abs=1e-12)
            assert row.min_acc == pytest.approx(min(row.acc_low, row.acc_high), abs=1e-15)

    def test_pinned_rows(self):
        rows = enumerate_binary_predictors()
        assert (rows[0].acc_low, rows[0].acc_high) == pytest.approx((0.50, 0.50), abs=1e-12)
        assert (rows[5].acc_low, rows[5].acc_high) == pytest.approx((1.00, 0.00), abs=1e-12)
        assert (rows[10].acc_low, rows[10].acc_high) == pytest.approx((0.00, 1.00), abs=1e-12)
        assert (rows[12].acc_low, rows[12].acc_high) == pytest.approx((0.90, 0.90), abs=1e-12)

    def test_semantic_predictor_uniquely_maximizes_worst_case(self):
        rows = enumerate_binary_predictors()
        best = max(rows, key=lambda r: r.min_acc)
        assert best.index == 12
        assert rows[12].min_acc == pytest.approx(0.90, abs=1e-12)
        others = [r.min_acc for r in rows if r.index != 12]
        assert max(others) <= 0.5 + 1e-12  # every alternative is that far behind


# ---------------------------------------------------------------------------
# conditional-independence diagnostics


class TestCondIndepGap:
    def test_zero_for_product_distribution(self):
        t = JointTable(("a", "b"), {(i, j): 0.25 for i in (0, 1) for j in (0, 1)})
        assert cond_indep_gap(t, "a", "b", ()) == pytest.approx(0.0, abs=1e-15)

    def test_nonzero_for_dependent_pair(self):
        t = JointTable(("a", "b"), {(0, 0): 0.5, (1, 1): 0.5})
        # worst cell deviation |p(a, b) - p(a) p(b)| = |0.5 - 0.25|
        assert cond_indep_gap(t, "a", "b", ()) == pytest.approx(0.25, abs=1e-15)

    def test_coordinate_shuffle_breaks_label_dependence_given_nuisance(self):
        fam = negated_coordinate_family(1.0, 8)
        ext = extend_with_corruption(fam.joint(0.8), FiniteCorruption.coordinate_permutations(3))
        assert cond_indep_gap(ext, "t", "y", "z") <= 1e-12

    def test_mask_breaks_both_directions(self):
        fam = xor_sign_family(1.0, 8)
        ext = extend_with_corruption(fam.joint(0.8), MASK_FIRST)
        assert cond_indep_gap(ext, "t", "y", "z") <= 1e-12
        assert cond_indep_gap(ext, "y", "z", "t") <= 1e-12

    def test_extended_table_normalized(self):
        fam = xor_sign_family(1.0, 6)
        ext = extend_with_corruption(fam.joint(0.6), MASK_FIRST)
        assert abs(table_sum(ext) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# the guarantee: reweighting error is controlled by the independence defect


class TestCorruptionBound:
    def test_ideal_corruption_coordinate_shuffle(self):
        fam = negated_coordinate_family(1.0, 8)
        report = corruption_bound(fam.joint(0.8), FiniteCorruption.coordinate_permutations(3))
        assert report.epsilon <= 1e-9
        assert report.l1 <= 1e-9
        assert report.holds

    def test_ideal_corruption_mask(self):
        fam = xor_sign_family(1.0, 8)
        report = corruption_bound(fam.joint(0.8), MASK_FIRST)
        assert report.epsilon <= 1e-9
        assert report.l1 <= 1e-9
        assert report.holds

    def test_constant_corruption_distance_is_training_gap(self):
        p = flip_noise_family(1).joint(0.9)
        report = corruption_bound(p, CONSTANT)
        want = nuisance_randomize(p).marginal("y", "x").l1(p.marginal("y", "x"))
        assert report.l1 == pytest.approx(want, abs=1e-12)
        assert report.holds

    def test_bound_holds_across_family_grid(self):
        for rho in (0.05, 0.3, 0.5, 0.8, 0.95):
            for fam, corr in (
                (negated_coordinate_family(0.8, 6), FiniteCorruption.coordinate_permutations(3)),
                (xor_sign_family(0.8, 6), MASK_FIRST),
                (flip_noise_family(1), CONSTANT),
                (flip_noise_family(2), SECOND_COORD),
            ):
                report = corruption_bound(fam.joint(rho), corr)
                assert report.holds, (fam.name, rho)
                assert report.l1 <= report.epsilon * report.moment + 1e-9
