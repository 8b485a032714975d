"""Refinement-field tests, including the independent brute-force oracle."""

import numpy as np
import pytest

from tfkit import refinement, verify
from tfkit.so3 import random_rotation
from tfkit.systems import AtomSystem


def _pair(candidate, target, elements=None):
    n = len(candidate)
    elements = elements or ("C",) * n
    return refinement.StructurePair(
        AtomSystem(candidate, elements), AtomSystem(target, elements)
    )


def _random_structure(rng, n):
    return rng.normal(size=(n, 3)) * 4.0


class TestStructurePair:
    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="atom counts differ"):
            refinement.StructurePair(
                AtomSystem(np.zeros((2, 3)) + np.arange(2)[:, None], ("C", "C")),
                AtomSystem(np.zeros((3, 3)) + np.arange(3)[:, None], ("C", "C", "C")),
            )

    def test_element_mismatch(self):
        a = np.zeros((2, 3)) + np.arange(2)[:, None]
        with pytest.raises(ValueError, match="element sequences"):
            refinement.StructurePair(
                AtomSystem(a, ("C", "N")), AtomSystem(a, ("N", "C"))
            )


class TestRefinementField:
    def test_identical_structures_zero_field(self):
        rng = np.random.default_rng(0)
        pts = _random_structure(rng, 20)
        field = refinement.refinement_field(_pair(pts.copy(), pts), k=6)
        assert np.abs(field.vectors).max() < 1e-10

    def test_global_rigid_motion_annihilated(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            target = _random_structure(rng, 25)
            g = random_rotation(rng)
            t = rng.normal(size=3) * 12.0
            candidate = target @ g.matrix.T + t
            field = refinement.refinement_field(_pair(candidate, target), k=8)
            assert np.linalg.norm(field.vectors, axis=1).max() < 1e-8

    def test_single_displaced_atom_recovered(self):
        rng = np.random.default_rng(2)
        # well-separated cluster plus one displaced atom far from the rest
        target = rng.normal(size=(12, 3)) * 3.0
        target[0] = [12.0, 0.0, 0.0]  # isolated atom
        candidate = target.copy()
        displacement = np.array([0.4, -0.3, 0.2])
        candidate[0] = target[0] + displacement
        # neighbourhood excludes atom 0 from its own alignment; the other
        # atoms match exactly, so the local frame is exact.
        field = refinement.refinement_field(_pair(candidate, target), k=6)
        np.testing.assert_allclose(field.vectors[0], displacement, atol=1e-6)
        others = np.linalg.norm(field.vectors[1:], axis=1)
        assert others.max() < 1e-6

    def test_field_locality(self):
        rng = np.random.default_rng(3)
        target = _random_structure(rng, 30)
        candidate = target + rng.normal(size=(30, 3)) * 0.3
        k = 5
        base = refinement.refinement_field(_pair(candidate, target), k=k)
        # find an atom far from atom 0's neighbourhood and move it slightly
        from tfkit.geometry import k_nearest

        nb0 = set(k_nearest(candidate, 0, k).tolist())
        far = max(
            (i for i in range(1, 30) if i not in nb0),
            key=lambda i: np.linalg.norm(candidate[i] - candidate[0]),
        )
        moved = candidate.copy()
        moved[far] += 0.05  # stays far away
        after = refinement.refinement_field(_pair(moved, target), k=k)
        np.testing.assert_array_equal(base.vectors[0], after.vectors[0])

    def test_field_corotates_with_candidate(self):
        rng = np.random.default_rng(8)
        for trial in range(5):
            target = _random_structure(rng, 20)
            candidate = target + rng.normal(size=(20, 3)) * 0.3
            base = refinement.refinement_field(_pair(candidate, target), k=7)
            g = random_rotation(rng)
            t = rng.normal(size=3) * 10.0
            moved = candidate @ g.matrix.T + t
            rotated = refinement.refinement_field(_pair(moved, target), k=7)
            np.testing.assert_allclose(
                rotated.vectors, base.vectors @ g.matrix.T, atol=1e-8
            )

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(50):
            n = int(rng.integers(8, 41))
            k = int(rng.choice([3, 5, 10]))
            target = _random_structure(rng, n)
            candidate = target + rng.normal(size=(n, 3)) * 0.4
            got = refinement.refinement_field(_pair(candidate, target), k=k).vectors
            want = verify.refinement_field_bruteforce(candidate, target, k)
            worst = max(worst, float(np.abs(got - want).max()))
        assert worst < 1e-10

    def test_degenerate_neighbourhood_flagged(self):
        # collinear structure: every alignment neighbourhood is rank-deficient
        target = np.zeros((6, 3))
        target[:, 0] = np.arange(6.0)
        candidate = target.copy()
        candidate[2, 0] += 0.1
        field = refinement.refinement_field(_pair(candidate, target), k=3)
        assert field.degenerate.any()
        assert np.isfinite(field.vectors).all()

    def test_small_k_rejected(self):
        pts = np.zeros((5, 3)) + np.arange(5)[:, None]
        with pytest.raises(ValueError, match="k must be >= 3"):
            refinement.refinement_field(_pair(pts, pts), k=2)

    def test_too_few_atoms_rejected(self):
        pts = np.zeros((3, 3)) + np.arange(3)[:, None]
        with pytest.raises(ValueError, match="at least 4 atoms"):
            refinement.refinement_field(_pair(pts, pts), k=3)


class TestApplyRefinement:
    def test_zero_field_no_motion(self):
        rng = np.random.default_rng(5)
        pts = _random_structure(rng, 10)
        system = AtomSystem(pts, ("C",) * 10)
        field = refinement.RefinementField(np.zeros((10, 3)), np.zeros(10, bool))
        np.testing.assert_array_equal(
            refinement.apply_refinement(system, field, 1.0).positions, pts
        )

    def test_full_step_lands_on_aligned_native(self):
        rng = np.random.default_rng(6)
        target = rng.normal(size=(12, 3)) * 3.0
        target[0] = [12.0, 0.0, 0.0]
        candidate = target.copy()
        candidate[0] += [0.4, -0.3, 0.2]
        pair = _pair(candidate, target)
        field = refinement.refinement_field(pair, k=6)
        stepped = refinement.apply_refinement(pair.candidate, field, 1.0)
        np.testing.assert_allclose(stepped.positions[0], target[0], atol=1e-5)

    def test_two_half_steps_reduce_deviation(self):
        rng = np.random.default_rng(7)
        reduced = 0
        for trial in range(5):
            target = _random_structure(rng, 25)
            candidate = target + rng.normal(size=(25, 3)) * 0.35
            pair = _pair(candidate, target)
            before = refinement.mean_local_deviation(pair, k=8)
            current = pair
            for _ in range(2):
                field = refinement.refinement_field(current, k=8)
                stepped = refinement.apply_refinement(current.candidate, field, 0.5)
                current = refinement.StructurePair(stepped, current.target)
            after = refinement.mean_local_deviation(current, k=8)
            reduced += after <= before + 1e-12
        assert reduced == 5

    def test_step_range_validated(self):
        system = AtomSystem(np.zeros((2, 3)) + np.arange(2)[:, None], ("C", "C"))
        field = refinement.RefinementField(np.zeros((2, 3)), np.zeros(2, bool))
        for bad in (0.0, 1.5, -0.1):
            with pytest.raises(ValueError, match="step"):
                refinement.apply_refinement(system, field, bad)


class TestMakeRefinementDataset:
    def _targets(self, n=3, atoms=15, seed=8):
        rng = np.random.default_rng(seed)
        return [
            AtomSystem(
                rng.normal(size=(atoms, 3)) * 4.0,
                tuple(rng.choice(("C", "N", "O"), size=atoms)),
                identifier=f"t{i}",
            )
            for i in range(n)
        ]

    def test_zero_noise_gives_zero_targets(self):
        pairs = refinement.make_refinement_dataset(self._targets(), 0.0, 2, seed=9, k=6)
        for pair in pairs:
            assert np.abs(pair.candidate.targets).max() < 1e-8

    def test_seed_determinism(self):
        a = refinement.make_refinement_dataset(self._targets(), 0.4, 2, seed=10, k=6)
        b = refinement.make_refinement_dataset(self._targets(), 0.4, 2, seed=10, k=6)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.candidate.positions, y.candidate.positions)
            np.testing.assert_array_equal(x.candidate.targets, y.candidate.targets)

    def test_field_magnitude_tracks_oracle(self):
        sigma = 0.5
        pairs = refinement.make_refinement_dataset(
            self._targets(n=6, atoms=20, seed=11), sigma, 3, seed=12, k=8
        )
        got = np.sqrt(
            np.mean(
                np.concatenate(
                    [np.sum(p.candidate.targets**2, axis=1) for p in pairs]
                )
            )
        )
        oracle = np.sqrt(
            np.mean(
                np.concatenate(
                    [
                        np.sum(
                            verify.refinement_field_bruteforce(
                                p.candidate.positions, p.target.positions, 8
                            )
                            ** 2,
                            axis=1,
                        )
                        for p in pairs
                    ]
                )
            )
        )
        assert got == pytest.approx(oracle, rel=1e-10)
        assert abs(got - oracle) / oracle < 0.25  # trivially, same computation

    def test_rigid_motion_included_and_annihilated(self):
        targets = self._targets(n=2, atoms=18, seed=13)
        pairs = refinement.make_refinement_dataset(targets, 1e-9, 1, seed=14, k=8)
        for pair, target in zip(pairs, targets):
            # candidate is far from target (rigid motion applied)...
            assert np.abs(pair.candidate.positions - target.positions).max() > 0.5
            # ...but the field stays at the noise floor
            assert np.linalg.norm(pair.candidate.targets, axis=1).max() < 1e-6

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            refinement.make_refinement_dataset(self._targets(), -0.1, 1, seed=0)


class TestPairIO:
    def test_save_load_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        targets = [
            AtomSystem(
                rng.uniform(0, 20, size=(12, 3)),
                tuple(rng.choice(("C", "N"), size=12)),
                identifier=f"t{i}",
            )
            for i in range(2)
        ]
        pairs = refinement.make_refinement_dataset(targets, 0.3, 2, seed=16, k=5)
        manifest = refinement.save_pairs(tmp_path, pairs, ["train", "train", "val", "test"])
        loaded = refinement.load_pairs(manifest)
        assert len(loaded["train"]) == 2
        orig, back = pairs[0], loaded["train"][0]
        assert back.candidate.elements == orig.candidate.elements
        np.testing.assert_array_equal(back.candidate.targets, orig.candidate.targets)
        np.testing.assert_array_equal(back.field.degenerate, orig.field.degenerate)
        assert np.abs(back.candidate.positions - orig.candidate.positions).max() <= 5e-4
        assert np.abs(back.target.positions - orig.target.positions).max() <= 5e-4
