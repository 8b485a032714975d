"""Executable verification suites: rotation-algebra identities, alignment
recovery, per-layer and end-to-end equivariance, gradient checks, and an
independently coded brute-force oracle for the refinement field.

The oracle functions here deliberately share no code with the modules they
check: neighbour search is a plain sort, and alignment uses the quaternion
eigenvector method instead of the SVD route in :mod:`tfkit.geometry`.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import net, so3
from .geometry import kabsch_align, rmsd
from .refinement import StructurePair, refinement_field
from .systems import AtomSystem
from .training import gradient_check

QUICK = "quick"
FULL = "full"


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_deviation: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status}  {self.name}: max deviation {self.max_deviation:.3e} (tol {self.tolerance:.1e})"
        if self.detail:
            msg += f" [{self.detail}]"
        return msg


# ---------------------------------------------------------------------------
# Independent oracles


def horn_align(mobile: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal proper rotation/translation via the quaternion eigenmethod."""
    p = np.asarray(mobile, dtype=float)
    q = np.asarray(target, dtype=float)
    pc = p - p.mean(axis=0)
    qc = q - q.mean(axis=0)
    s = pc.T @ qc
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    evals, evecs = np.linalg.eigh(n)
    w, x, y, z = evecs[:, np.argmax(evals)]
    rot = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    trans = q.mean(axis=0) - rot @ p.mean(axis=0)
    return rot, trans


def refinement_field_bruteforce(
    candidate_positions: np.ndarray, target_positions: np.ndarray, k: int
) -> np.ndarray:
    """Step-by-step refinement vectors: sorted-distance neighbourhoods in the
    candidate, quaternion alignment of the corresponding native atoms onto
    them, residual at the atom."""
    pc = np.asarray(candidate_positions, dtype=float)
    pt = np.asarray(target_positions, dtype=float)
    n = len(pc)
    vectors = np.empty((n, 3))
    for a in range(n):
        ranked = sorted(
            (float(np.linalg.norm(pc[i] - pc[a])), i) for i in range(n) if i != a
        )
        idx = [i for _, i in ranked[: min(k, n - 1)]]
        rot, trans = horn_align(pt[idx], pc[idx])
        vectors[a] = pc[a] - (rot @ pt[a] + trans)
    return vectors


# ---------------------------------------------------------------------------
# Algebra checks


def check_sh_equivariance(seed: int = 0, n_pairs: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        g = so3.random_rotation(rng)
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        for l in range(so3.MAX_ORDER + 1):
            d = so3.wigner_matrix(l, g).matrix
            lhs = so3.real_spherical_harmonics(l, g.apply(u))
            rhs = d @ so3.real_spherical_harmonics(l, u)
            worst = max(worst, float(np.linalg.norm(lhs - rhs)))
    return CheckResult("sh_equivariance", worst < 1e-9, worst, 1e-9)


def check_sh_orthonormality(seed: int = 0, n_dirs: int = 1_000_000) -> CheckResult:
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_dirs, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    blocks = [so3._sh_unchecked(l, u) for l in range(so3.MAX_ORDER + 1)]
    y = np.concatenate(blocks, axis=1)  # (n, 9)
    gram = 4.0 * np.pi * (y.T @ y) / n_dirs
    worst = float(np.abs(gram - np.eye(y.shape[1])).max())
    return CheckResult("sh_orthonormality", worst < 0.01, worst, 0.01)


def check_wigner(seed: int = 0, n_pairs: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        g1 = so3.random_rotation(rng)
        g2 = so3.random_rotation(rng)
        for l in range(so3.MAX_ORDER + 1):
            d1 = so3.wigner_matrix(l, g1).matrix
            d2 = so3.wigner_matrix(l, g2).matrix
            d12 = so3.wigner_matrix(l, g1.compose(g2)).matrix
            worst = max(worst, float(np.abs(d12 - d1 @ d2).max()))
            worst = max(
                worst, float(np.abs(d1.T @ d1 - np.eye(2 * l + 1)).max())
            )
    return CheckResult("wigner_homomorphism", worst < 1e-9, worst, 1e-9)


def check_couplings(seed: int = 0, n_rotations: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for l1 in range(so3.MAX_ORDER + 1):
        for l2 in range(so3.MAX_ORDER + 1):
            for l3 in range(so3.MAX_ORDER + 1):
                c = so3.clebsch_gordan(l1, l2, l3).coefficients
                allowed = abs(l1 - l2) <= l3 <= l1 + l2
                if not allowed:
                    worst = max(worst, float(np.abs(c).max()))
                    continue
                for _ in range(n_rotations):
                    g = so3.random_rotation(rng)
                    d1 = so3.wigner_matrix(l1, g).matrix
                    d2 = so3.wigner_matrix(l2, g).matrix
                    d3 = so3.wigner_matrix(l3, g).matrix
                    lhs = np.einsum("ai,bj,abk->ijk", d1, d2, c)
                    rhs = np.einsum("kc,ijc->ijk", d3, c)
                    worst = max(worst, float(np.abs(lhs - rhs).max()))
    return CheckResult("cg_intertwiner", worst < 1e-9, worst, 1e-9)


def check_kabsch(seed: int = 0, n_instances: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_instances):
        m = int(rng.integers(3, 50))
        pts = rng.normal(size=(m, 3)) * 4.0
        if i % 3 == 0:
            pts[:, 2] *= 1e-6  # nearly planar
        g = so3.random_rotation(rng)
        t = rng.normal(size=3) * 20.0
        target = pts @ g.matrix.T + t
        tr = kabsch_align(pts, target)
        if abs(np.linalg.det(tr.rotation.matrix) - 1.0) > 1e-9:
            return CheckResult("kabsch_recovery", False, 1.0, 1e-8, "det != +1")
        worst = max(worst, rmsd(tr.apply(pts), target))
    return CheckResult("kabsch_recovery", worst < 1e-8, worst, 1e-8)


# ---------------------------------------------------------------------------
# Network checks


class _FaultedGate:
    """Wraps a gate layer and adds a constant bias to its order-1 output,
    deliberately breaking equivariance (test-harness fault injection)."""

    kind = "nonlinearity"

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name + "+fault_bias_l1"
        self.param_shapes = inner.param_shapes
        self.channels = inner.channels

    def forward(self, fm, params):
        out = self.inner.forward(fm, params)
        if 1 in out:
            data = dict(out.data)
            data[1] = data[1] + 0.1
            return net.FeatureMap(data)
        return out


FAULT_ORDER1_BIAS = "order1-bias"


def _build_model(lmax: int, seed: int, fault: str | None = None, filters=(24, 12, 1)) -> net.Model:
    model = net.build_model(net.ModelConfig(lmax=lmax, filters=filters, seed=seed))
    if fault == FAULT_ORDER1_BIAS:
        if lmax < 1:
            raise ValueError("order-1 fault needs lmax >= 1")
        model.blocks[0].gate = _FaultedGate(model.blocks[0].gate)
    elif fault is not None:
        raise ValueError(f"unknown fault {fault!r}")
    return model


def _random_system(rng: np.random.Generator, n_atoms: int) -> AtomSystem:
    positions = rng.uniform(0.0, 12.0, size=(n_atoms, 3))
    elements = tuple(rng.choice(("C", "H", "O", "N", "S"), size=n_atoms))
    return AtomSystem(positions, elements)


def _rotate_map(fm: net.FeatureMap, g: so3.Rotation) -> net.FeatureMap:
    data = {}
    for l in fm.orders():
        d = torch.as_tensor(so3.wigner_matrix(l, g).matrix.copy(), dtype=net.DTYPE)
        data[l] = torch.einsum("ij,ncj->nci", d, fm[l])
    return net.FeatureMap(data)


def _map_deviation(a: net.FeatureMap, b: net.FeatureMap) -> float:
    worst = 0.0
    for l in a.orders():
        num = float(torch.abs(a[l] - b[l]).max())
        den = float(torch.abs(a[l]).max()) + 1e-12
        worst = max(worst, num / den)
    return worst


def check_layer_equivariance(
    seed: int = 0,
    lmax: int = 2,
    n_rotations: int = 5,
    fault: str | None = None,
) -> CheckResult:
    """Rotation test for every layer independently; reports the worst layer."""
    rng = np.random.default_rng(seed)
    model = _build_model(lmax, seed, fault)
    positions = rng.uniform(0.0, 10.0, size=(20, 3))
    from .geometry import knn_indices

    neighbors = knn_indices(positions, 8)
    worst = 0.0
    worst_layer = ""
    tol = 1e-9
    per_layer: dict[str, float] = {}
    for layer in model.layers:
        if layer.kind == "embedding":
            continue
        if layer.kind == "convolution":
            in_channels = {
                l1: model.params[f"{layer.name}.p{l1}{lf}{l3}.radial"].shape[0]
                for l1, lf, l3 in layer.paths
            }
        elif layer.kind == "self_interaction":
            in_channels = layer.in_channels
        else:
            in_channels = layer.channels
        fm = net.FeatureMap(
            {l: rng.normal(size=(len(positions), c, 2 * l + 1)) for l, c in in_channels.items()}
        )
        layer_worst = 0.0
        for i in range(n_rotations):
            g = so3.random_rotation(rng)
            fm_rot = _rotate_map(fm, g)
            if layer.kind == "convolution":
                ctx = net.build_conv_context(positions, neighbors, lmax)
                ctx_rot = net.build_conv_context(positions @ g.matrix.T, neighbors, lmax)
                out = layer.forward(fm, ctx, model.params)
                out_rot = layer.forward(fm_rot, ctx_rot, model.params)
            else:
                out = layer.forward(fm, model.params)
                out_rot = layer.forward(fm_rot, model.params)
            layer_worst = max(layer_worst, _map_deviation(out_rot, _rotate_map(out, g)))
        per_layer[layer.name] = layer_worst
        if layer_worst > worst:
            worst = layer_worst
            worst_layer = layer.name
    listing = "; ".join(f"{name} {dev:.2e}" for name, dev in per_layer.items())
    detail = f"worst layer: {worst_layer}; per layer: {listing}" if worst_layer else ""
    return CheckResult("layer_equivariance", worst < tol, worst, tol, detail)


def check_model_equivariance(
    seed: int = 0,
    lmax_values: tuple[int, ...] = (1, 2),
    n_systems: int = 10,
    n_rotations: int = 100,
    n_atoms: int = 60,
    fault: str | None = None,
) -> CheckResult:
    """End-to-end law: rotating inputs equals rotating outputs, relative to
    per-atom output norms."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    detail = ""
    tol = 1e-6
    for lmax in lmax_values:
        model = _build_model(lmax, seed + lmax, fault)
        for _ in range(n_systems):
            system = _random_system(rng, n_atoms)
            out = net.forward(model, system)
            norms = np.linalg.norm(out, axis=-1) + 1e-12
            for _ in range(n_rotations):
                g = so3.random_rotation(rng)
                rotated = AtomSystem(system.positions @ g.matrix.T, system.elements)
                out_rot = net.forward(model, rotated)
                dev = float(
                    (np.linalg.norm(out_rot - out @ g.matrix.T, axis=-1) / norms).max()
                )
                if dev > worst:
                    worst = dev
                    detail = f"lmax={lmax}"
    return CheckResult("model_equivariance", worst < tol, worst, tol, detail)


def check_order0_invariance(
    seed: int = 0, n_systems: int = 10, n_rotations: int = 100, n_atoms: int = 60
) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _build_model(0, seed)
    worst = 0.0
    for _ in range(n_systems):
        system = _random_system(rng, n_atoms)
        out = net.forward(model, system)
        scale = float(np.abs(out).max()) + 1e-12
        for _ in range(n_rotations):
            g = so3.random_rotation(rng)
            rotated = AtomSystem(system.positions @ g.matrix.T, system.elements)
            worst = max(worst, float(np.abs(net.forward(model, rotated) - out).max()) / scale)
    return CheckResult("order0_invariance", worst < 1e-9, worst, 1e-9)


def check_translation_invariance(
    seed: int = 0, n_systems: int = 5, n_shifts: int = 20, lmax: int = 1
) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _build_model(lmax, seed)
    worst = 0.0
    for _ in range(n_systems):
        system = _random_system(rng, 40)
        out = net.forward(model, system)
        scale = float(np.abs(out).max()) + 1e-12
        for _ in range(n_shifts):
            t = rng.uniform(-100.0, 100.0, size=3)
            shifted = AtomSystem(system.positions + t, system.elements)
            worst = max(worst, float(np.abs(net.forward(model, shifted) - out).max()) / scale)
    return CheckResult("translation_invariance", worst < 1e-9, worst, 1e-9)


def check_permutation(seed: int = 0, lmax: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _build_model(lmax, seed)
    worst = 0.0
    for _ in range(5):
        system = _random_system(rng, 40)
        out = net.forward(model, system)
        perm = rng.permutation(system.n_atoms)
        permuted = AtomSystem(
            system.positions[perm], tuple(np.asarray(system.elements)[perm])
        )
        worst = max(worst, float(np.abs(net.forward(model, permuted) - out[perm]).max()))
    return CheckResult("permutation_equivariance", worst < 1e-12, worst, 1e-12)


def check_gradients(seed: int = 0, n_per_kind: int = 200) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = net.build_model(net.ModelConfig(lmax=1, filters=(6, 4, 1), seed=seed))
    positions = rng.uniform(0.0, 9.0, size=(12, 3))
    elements = tuple(rng.choice(("C", "H", "O"), size=12))
    targets = rng.normal(size=(12, 3)) * 2.0
    system = AtomSystem(positions, elements, None, targets)
    report = gradient_check(model, system, delta=1.0, n_per_kind=n_per_kind, seed=seed)
    worst_kind = max(report.by_kind, key=report.by_kind.get)
    return CheckResult(
        "gradient_check",
        report.max_rel_error < 1e-4,
        report.max_rel_error,
        1e-4,
        f"{report.n_sampled} params, worst kind: {worst_kind}",
    )


# ---------------------------------------------------------------------------
# Refinement checks


def check_refinement_oracle(seed: int = 0, n_pairs: int = 50) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_pairs):
        n = int(rng.integers(8, 41))
        k = int(rng.choice([3, 5, 10]))
        target = rng.normal(size=(n, 3)) * 4.0
        candidate = target + rng.normal(size=(n, 3)) * 0.4
        elements = tuple(rng.choice(("C", "N"), size=n))
        pair = StructurePair(
            AtomSystem(candidate, elements), AtomSystem(target, elements)
        )
        got = refinement_field(pair, k).vectors
        want = refinement_field_bruteforce(candidate, target, k)
        worst = max(worst, float(np.abs(got - want).max()))
    return CheckResult("refinement_oracle", worst < 1e-10, worst, 1e-10)


def check_rigid_annihilation(seed: int = 0, n_pairs: int = 20) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        n = int(rng.integers(10, 40))
        target = rng.normal(size=(n, 3)) * 5.0
        g = so3.random_rotation(rng)
        t = rng.normal(size=3) * 15.0
        candidate = target @ g.matrix.T + t
        elements = ("C",) * n
        pair = StructurePair(
            AtomSystem(candidate, elements), AtomSystem(target, elements)
        )
        field = refinement_field(pair, k=10)
        worst = max(worst, float(np.linalg.norm(field.vectors, axis=1).max()))
    return CheckResult("rigid_annihilation", worst < 1e-8, worst, 1e-8)


def check_scaling(
    seed: int = 0, sizes: tuple[int, ...] = (250, 500, 1000), repeats: int = 5
) -> CheckResult:
    """Forward wall time should grow by less than 2.5x per doubling of N.

    Sizes are timed in interleaved sweeps and the per-size minimum is kept,
    so a transient load spike cannot skew one size against another."""
    rng = np.random.default_rng(seed)
    model = _build_model(1, seed)
    systems_by_size = []
    for n in sizes:
        system = _random_system(rng, n)
        net.forward(model, system)  # warm-up
        systems_by_size.append(system)
    times = [math.inf] * len(sizes)
    for _ in range(repeats):
        for i, system in enumerate(systems_by_size):
            times[i] = min(times[i], _timed(lambda: net.forward(model, system)))
    worst = max(times[i + 1] / times[i] for i in range(len(times) - 1))
    detail = "ms: " + ", ".join(f"{t * 1000:.0f}" for t in times)
    return CheckResult("forward_scaling", worst < 2.5, worst, 2.5, detail)


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# Suite runner


def run_checks(
    level: str = QUICK, seed: int = 0, fault: str | None = None
) -> list[CheckResult]:
    full = level == FULL
    if level not in (QUICK, FULL):
        raise ValueError(f"unknown verification level {level!r}")
    results = [
        check_sh_equivariance(seed),
        check_sh_orthonormality(seed, 1_000_000 if full else 200_000),
        check_wigner(seed),
        check_couplings(seed, 20 if full else 5),
        check_kabsch(seed, 100 if full else 30),
        check_layer_equivariance(seed, lmax=2, fault=fault),
        check_model_equivariance(
            seed,
            n_systems=10 if full else 2,
            n_rotations=100 if full else 10,
            fault=fault,
        ),
        check_order0_invariance(
            seed, n_systems=10 if full else 2, n_rotations=100 if full else 10
        ),
        check_translation_invariance(seed, n_shifts=20 if full else 5),
        check_permutation(seed),
        check_gradients(seed, n_per_kind=200 if full else 40),
        check_refinement_oracle(seed, n_pairs=50 if full else 10),
        check_rigid_annihilation(seed, n_pairs=20 if full else 5),
    ]
    if full:
        results.append(check_scaling(seed))
    return results
