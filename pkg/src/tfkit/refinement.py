"""Local structure-refinement vector fields.

Given a candidate structure and its ground-truth twin (atoms corresponding
1:1 by index), each atom's refinement vector is computed by aligning the
native coordinates of the atom's candidate-space neighbourhood onto the
candidate coordinates and taking the residual at the atom:

    v_a = p_a(candidate) - T_a(p_a(native))

where T_a is the least-squares rigid alignment of the neighbourhood.  The
local alignment makes the field blind to global rigid motion of the
candidate, so vectors measure genuine local deviation only.  Moving atoms
by -v_a reduces that deviation.

Per-atom field computations are independent of each other, so results do
not depend on evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import kabsch_align, knn_indices
from .so3 import random_rotation
from .systems import (
    AtomSystem,
    format_vectors_csv,
    parse_structure,
    parse_vectors_csv,
    read_manifest,
    write_manifest,
    write_structure,
)

DEFAULT_NEIGHBORHOOD = 50


@dataclass
class StructurePair:
    """Candidate structure and its ground truth, corresponding by index."""

    candidate: AtomSystem
    target: AtomSystem
    field: "RefinementField | None" = None

    def __post_init__(self) -> None:
        if self.candidate.n_atoms != self.target.n_atoms:
            raise ValueError(
                f"atom counts differ: candidate {self.candidate.n_atoms}, "
                f"target {self.target.n_atoms}"
            )
        if self.candidate.elements != self.target.elements:
            raise ValueError("element sequences differ between candidate and target")


@dataclass
class RefinementField:
    """Per-atom refinement vectors (A) with degenerate-alignment flags."""

    vectors: np.ndarray
    degenerate: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=float)
        self.degenerate = np.asarray(self.degenerate, dtype=bool)
        if self.vectors.ndim != 2 or self.vectors.shape[1] != 3:
            raise ValueError(f"vectors must be (N, 3), got {self.vectors.shape}")
        if self.degenerate.shape != (len(self.vectors),):
            raise ValueError("flag count does not match vector count")
        if not np.isfinite(self.vectors).all():
            raise ValueError("non-finite refinement vectors")


def refinement_field(pair: StructurePair, k: int = DEFAULT_NEIGHBORHOOD) -> RefinementField:
    """Compute per-atom refinement vectors via local Kabsch alignment.

    Neighbourhoods are the k nearest atoms in *candidate* coordinates
    (query atom excluded, k clamped to N-1); the corresponding native atoms
    are aligned onto them.  Atoms whose neighbourhood alignment is
    rank-deficient are flagged degenerate but still get a finite vector.
    """
    if k < 3:
        raise ValueError("k must be >= 3 for a determined alignment")
    n = pair.candidate.n_atoms
    if n < 4:
        raise ValueError("refinement needs at least 4 atoms (3 per neighbourhood)")
    pc = pair.candidate.positions
    pt = pair.target.positions
    neighbors = knn_indices(pc, min(k, n - 1))
    vectors = np.empty((n, 3))
    degenerate = np.zeros(n, dtype=bool)
    for a in range(n):
        idx = neighbors[a]
        t = kabsch_align(pt[idx], pc[idx])
        vectors[a] = pc[a] - t.apply(pt[a])
        degenerate[a] = t.degenerate
    return RefinementField(vectors, degenerate)


def apply_refinement(
    candidate: AtomSystem, field: RefinementField, step: float
) -> AtomSystem:
    """Move atoms against their refinement vectors: positions - step * v.

    ``step`` is in (0, 1]; step = 1 places each atom at its locally aligned
    native position (up to alignment coupling between atoms).
    """
    if not 0.0 < step <= 1.0:
        raise ValueError("step must be in (0, 1]")
    if len(field.vectors) != candidate.n_atoms:
        raise ValueError("field size does not match system")
    return AtomSystem(
        candidate.positions - step * field.vectors,
        candidate.elements,
        candidate.predict_mask.copy(),
        None,
        candidate.identifier,
    )


def mean_local_deviation(pair: StructurePair, k: int = DEFAULT_NEIGHBORHOOD) -> float:
    """Mean refinement-vector length: the local-deviation score of a pair."""
    field = refinement_field(pair, k)
    return float(np.mean(np.linalg.norm(field.vectors, axis=1)))


def make_refinement_dataset(
    targets: list[AtomSystem],
    noise_sigma: float,
    candidates_per_target: int,
    seed: int = 0,
    k: int = DEFAULT_NEIGHBORHOOD,
    rigid: bool = True,
) -> list[StructurePair]:
    """Perturb target structures into candidates and attach field targets.

    Candidates are the targets plus i.i.d. Gaussian coordinate noise,
    followed (by default) by a random global rigid motion that the local
    field must annihilate.  Each candidate system carries the computed
    refinement vectors as its prediction targets; degenerate-alignment
    atoms are dropped from its predict mask.
    """
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if candidates_per_target < 1:
        raise ValueError("candidates_per_target must be >= 1")
    pairs = []
    for ti, target in enumerate(targets):
        for ci in range(candidates_per_target):
            rng = np.random.default_rng([seed, 13, ti, ci])
            pos = target.positions.copy()
            if noise_sigma > 0:
                pos = pos + rng.normal(0.0, noise_sigma, size=pos.shape)
            if rigid:
                g = random_rotation(rng)
                shift = rng.uniform(-10.0, 10.0, size=3)
                pos = pos @ g.matrix.T + shift
            candidate = AtomSystem(
                pos,
                target.elements,
                target.predict_mask.copy(),
                None,
                f"{target.identifier}-c{ci:02d}",
            )
            pair = StructurePair(candidate, target)
            field = refinement_field(pair, k)
            candidate.targets = field.vectors
            candidate.predict_mask &= ~field.degenerate
            pair.field = field
            pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# On-disk layout: <id>.candidate.pdb / <id>.native.pdb / <id>.field.csv


def save_pairs(
    out_dir: Path | str, pairs: list[StructurePair], splits: list[str]
) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "systems").mkdir(parents=True, exist_ok=True)
    entries = []
    for pair, split in zip(pairs, splits, strict=True):
        stem = f"systems/{pair.candidate.identifier}"
        (out_dir / f"{stem}.candidate.pdb").write_text(write_structure(pair.candidate))
        (out_dir / f"{stem}.native.pdb").write_text(write_structure(pair.target))
        if pair.field is not None:
            (out_dir / f"{stem}.field.csv").write_text(
                format_vectors_csv(
                    pair.candidate.elements, pair.field.vectors, pair.field.degenerate
                )
            )
        entries.append((f"{stem}.candidate.pdb", split))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def load_pairs(manifest_path: Path | str) -> dict[str, list[StructurePair]]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    datasets: dict[str, list[StructurePair]] = {}
    for rel, split in read_manifest(manifest_path):
        if not rel.endswith(".candidate.pdb"):
            raise ValueError(f"refinement manifest entries must be candidates: {rel}")
        stem = rel[: -len(".candidate.pdb")]
        candidate = parse_structure((root / rel).read_text(), Path(stem).name)
        native = parse_structure(
            (root / f"{stem}.native.pdb").read_text(), Path(stem).name + "-native"
        )
        pair = StructurePair(candidate, native)
        field_path = root / f"{stem}.field.csv"
        if field_path.exists():
            elements, vectors, flags = parse_vectors_csv(field_path.read_text())
            if elements != candidate.elements:
                raise ValueError(f"{field_path}: element sequence mismatch")
            candidate.targets = vectors
            candidate.predict_mask &= ~flags
            pair.field = RefinementField(vectors, flags)
        datasets.setdefault(split, []).append(pair)
    return datasets
