"""Atom systems, fixed-width structure files, and the analytic force oracles
used to build desk-scale datasets.

The file format is the ATOM/HETATM subset of the published PDB v3.3
fixed-width layout: coordinates in columns 31-54 (three 8-wide fixed-point
fields, 3 decimals) and the element symbol in columns 77-78.  HETATM
records mark atoms that are kept as network input but excluded from the
prediction mask (solvent-style atoms).

Per-atom target vectors travel in sidecar CSV files (one record per atom:
index, element, v_x, v_y, v_z, degenerate flag) written with 17 significant
digits so float64 values round-trip exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOCAB_PROTEIN = ("C", "H", "O", "N", "S")
VOCAB_RNA = ("C", "H", "O", "N", "P")

# Per-element Lennard-Jones (well depth, length) multipliers applied to the
# base LJParams; carbon is the reference species.
LJ_ELEMENT_FACTORS = {
    "C": (1.0, 1.0),
    "H": (0.3, 0.76),
    "O": (1.6, 0.88),
    "N": (1.4, 0.94),
    "S": (2.2, 1.06),
    "P": (1.8, 1.09),
}

# Point masses for the gravity toy task, natural units (G = 1).
ELEMENT_MASS = {"H": 1.0, "C": 12.0, "N": 14.0, "O": 16.0, "S": 32.0, "P": 31.0}

_MIN_SEPARATION_FACTOR = 0.8  # rejection threshold in units of pair sigma
_COINCIDENT_TOL = 1e-6  # Angstroms


class GenerationError(RuntimeError):
    """Raised when rejection sampling cannot place atoms within bounds."""


@dataclass
class AtomSystem:
    """A point cloud of atoms with optional per-atom target vectors.

    positions are (N, 3) in Angstroms; predict_mask marks atoms whose
    targets enter losses and metrics; targets, when present, are (N, 3)
    in task units (meV/A for forces, A for refinement vectors).
    """

    positions: np.ndarray
    elements: tuple[str, ...]
    predict_mask: np.ndarray = None
    targets: np.ndarray | None = None
    identifier: str = ""

    def __post_init__(self) -> None:
        self.positions = np.array(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        n = len(self.positions)
        if n < 1:
            raise ValueError("system must contain at least one atom")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions contain non-finite coordinates")
        self.elements = tuple(str(e) for e in self.elements)
        if len(self.elements) != n:
            raise ValueError(f"{len(self.elements)} elements for {n} atoms")
        if any(not e for e in self.elements):
            raise ValueError("empty element symbol")
        if self.predict_mask is None:
            self.predict_mask = np.ones(n, dtype=bool)
        else:
            self.predict_mask = np.asarray(self.predict_mask, dtype=bool).reshape(n)
        if self.targets is not None:
            self.targets = np.array(self.targets, dtype=float)
            if self.targets.shape != (n, 3):
                raise ValueError(f"targets must be (N, 3), got {self.targets.shape}")

    @property
    def n_atoms(self) -> int:
        return len(self.positions)

    def replace_positions(self, positions: np.ndarray) -> "AtomSystem":
        return AtomSystem(
            positions,
            self.elements,
            self.predict_mask.copy(),
            None if self.targets is None else self.targets.copy(),
            self.identifier,
        )


@dataclass(frozen=True)
class LJParams:
    """Base Lennard-Jones parameters: well depth (meV), length (A), cutoff (A).

    The default well depth puts desk-scale cluster forces at a mean around
    80 meV/A, comparable to solvated-protein force fields."""

    epsilon: float = 1.3
    sigma: float = 3.4
    cutoff: float = 10.2

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.cutoff <= self.sigma:
            raise ValueError("cutoff must exceed sigma")


# ---------------------------------------------------------------------------
# Fixed-width structure records


def parse_structure(text: str, identifier: str = "") -> AtomSystem:
    """Parse ATOM/HETATM records into an AtomSystem.

    HETATM atoms get predict_mask = False.  If the element columns are
    blank the symbol is inferred from the atom-name field with a warning.
    """
    positions = []
    elements = []
    mask = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        record = line[:6].strip()
        if record not in ("ATOM", "HETATM"):
            continue
        if len(line) < 54:
            raise ValueError(f"line {lineno}: truncated atom record")
        try:
            xyz = [float(line[30:38]), float(line[38:46]), float(line[46:54])]
        except ValueError as exc:
            raise ValueError(f"line {lineno}: malformed coordinate field ({exc})") from None
        element = line[76:78].strip() if len(line) >= 77 else ""
        if not element:
            name = line[12:16].strip()
            letters = [c for c in name if c.isalpha()]
            if not letters:
                raise ValueError(f"line {lineno}: no element symbol or atom name")
            element = letters[0].upper()
            warnings.warn(
                f"line {lineno}: missing element column; inferred {element!r} "
                f"from atom name {name!r}",
                stacklevel=2,
            )
        else:
            element = element[0].upper() + element[1:].lower()
        positions.append(xyz)
        elements.append(element)
        mask.append(record == "ATOM")
    if not positions:
        raise ValueError("no atom records")
    return AtomSystem(np.array(positions), tuple(elements), np.array(mask), None, identifier)


def write_structure(system: AtomSystem) -> str:
    """Render a system as fixed-width ATOM/HETATM records (3-decimal coords)."""
    lines = []
    for i in range(system.n_atoms):
        x, y, z = system.positions[i]
        for v in (x, y, z):
            if not -999.999 <= v <= 9999.999:
                raise ValueError(f"coordinate field overflow: {v}")
        record = "ATOM" if system.predict_mask[i] else "HETATM"
        element = system.elements[i]
        lines.append(
            f"{record:<6s}{(i + 1) % 100000:>5d}  {element:<3s} UNK A{1:>4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2s}"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


def format_vectors_csv(
    elements: tuple[str, ...],
    vectors: np.ndarray,
    degenerate: np.ndarray | None = None,
) -> str:
    vectors = np.asarray(vectors, dtype=float)
    if vectors.shape != (len(elements), 3):
        raise ValueError(f"vectors must be ({len(elements)}, 3), got {vectors.shape}")
    if degenerate is None:
        degenerate = np.zeros(len(elements), dtype=bool)
    lines = ["index,element,v_x,v_y,v_z,degenerate"]
    for i, el in enumerate(elements):
        vx, vy, vz = vectors[i]
        lines.append(f"{i},{el},{vx:.17g},{vy:.17g},{vz:.17g},{int(degenerate[i])}")
    return "\n".join(lines) + "\n"


def parse_vectors_csv(text: str) -> tuple[tuple[str, ...], np.ndarray, np.ndarray]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "index,element,v_x,v_y,v_z,degenerate":
        raise ValueError("missing vector CSV header")
    elements = []
    vectors = []
    flags = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 6:
            raise ValueError(f"malformed vector record: {ln!r}")
        elements.append(parts[1])
        vectors.append([float(parts[2]), float(parts[3]), float(parts[4])])
        flags.append(bool(int(parts[5])))
    return tuple(elements), np.array(vectors), np.array(flags, dtype=bool)


def write_manifest(path: Path | str, entries: list[tuple[str, str]]) -> None:
    """Write the dataset manifest: one relative path and split per line."""
    lines = [f"{rel} {split}" for rel, split in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path | str) -> list[tuple[str, str]]:
    entries = []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip():
            continue
        rel, split = ln.rsplit(" ", 1)
        entries.append((rel, split))
    return entries


def save_systems(out_dir: Path | str, systems: list[AtomSystem], splits: list[str]) -> Path:
    """Write systems as PDB + target-CSV pairs and a split manifest."""
    out_dir = Path(out_dir)
    (out_dir / "systems").mkdir(parents=True, exist_ok=True)
    entries = []
    for system, split in zip(systems, splits, strict=True):
        rel = f"systems/{system.identifier}.pdb"
        (out_dir / rel).write_text(write_structure(system))
        if system.targets is not None:
            tgt_rel = rel[:-4] + ".targets.csv"
            (out_dir / tgt_rel).write_text(
                format_vectors_csv(system.elements, system.targets)
            )
        entries.append((rel, split))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, entries)
    return manifest


def load_systems(manifest_path: Path | str) -> dict[str, list[AtomSystem]]:
    """Load a manifest written by save_systems, grouped by split."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    datasets: dict[str, list[AtomSystem]] = {}
    for rel, split in read_manifest(manifest_path):
        system = parse_structure((root / rel).read_text(), identifier=Path(rel).stem)
        tgt_path = root / (rel[:-4] + ".targets.csv")
        if tgt_path.exists():
            elements, vectors, flags = parse_vectors_csv(tgt_path.read_text())
            if elements != system.elements:
                raise ValueError(f"{tgt_path}: element sequence mismatch")
            system.targets = vectors
            system.predict_mask &= ~flags
        datasets.setdefault(split, []).append(system)
    return datasets


# ---------------------------------------------------------------------------
# Lennard-Jones oracle


def _element_lj(elements: tuple[str, ...], params: LJParams) -> tuple[np.ndarray, np.ndarray]:
    try:
        factors = np.array([LJ_ELEMENT_FACTORS[e] for e in elements])
    except KeyError as exc:
        raise ValueError(f"no Lennard-Jones parameters for element {exc.args[0]!r}") from None
    return params.epsilon * factors[:, 0], params.sigma * factors[:, 1]


def _lj_pairs(
    positions: np.ndarray, eps_i: np.ndarray, sig_i: np.ndarray, cutoff: float
) -> tuple[float, np.ndarray]:
    """Total energy (meV) and per-atom forces (meV/A) with truncated cutoff.

    Pair parameters follow Lorentz-Berthelot mixing of the per-atom values.
    """
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    off = ~np.eye(n, dtype=bool)
    if np.any(r[off] < _COINCIDENT_TOL):
        raise ValueError("coincident points: pair distance below 1e-6 A")
    eps = np.sqrt(eps_i[:, None] * eps_i[None, :])
    sig = 0.5 * (sig_i[:, None] + sig_i[None, :])
    np.fill_diagonal(r, np.inf)
    active = r < cutoff
    sr6 = np.where(active, (sig / r) ** 6, 0.0)
    sr12 = sr6 * sr6
    energy = 0.5 * float(np.sum(4.0 * eps * (sr12 - sr6)))
    coeff = np.where(active, 24.0 * eps * (2.0 * sr12 - sr6) / (r * r), 0.0)
    forces = np.sum(coeff[:, :, None] * diff, axis=1)
    return energy, forces


def lj_forces(positions: np.ndarray, params: LJParams) -> np.ndarray:
    """Single-species Lennard-Jones forces: F_i points away from repelling
    neighbours, in meV/A."""
    n = len(np.asarray(positions))
    eps = np.full(n, params.epsilon)
    sig = np.full(n, params.sigma)
    return _lj_pairs(positions, eps, sig, params.cutoff)[1]


def lj_energy(positions: np.ndarray, params: LJParams) -> float:
    n = len(np.asarray(positions))
    eps = np.full(n, params.epsilon)
    sig = np.full(n, params.sigma)
    return _lj_pairs(positions, eps, sig, params.cutoff)[0]


def lj_forces_mixed(
    positions: np.ndarray, elements: tuple[str, ...], params: LJParams
) -> np.ndarray:
    """Forces with per-element well depths and radii (fixed mixing table)."""
    eps_i, sig_i = _element_lj(elements, params)
    return _lj_pairs(positions, eps_i, sig_i, params.cutoff)[1]


def lj_energy_mixed(
    positions: np.ndarray, elements: tuple[str, ...], params: LJParams
) -> float:
    eps_i, sig_i = _element_lj(elements, params)
    return _lj_pairs(positions, eps_i, sig_i, params.cutoff)[0]


def relax_lj(
    positions: np.ndarray,
    elements: tuple[str, ...],
    params: LJParams,
    steps: int = 200,
    step_size: float = 5e-4,
    max_move: float = 0.05,
) -> np.ndarray:
    """Descend the mixed LJ energy along the forces, with each atom's
    per-step displacement capped at ``max_move`` A.  Used to produce
    near-equilibrium reference structures."""
    pos = np.array(positions, dtype=float)
    eps_i, sig_i = _element_lj(elements, params)
    for _ in range(steps):
        _, forces = _lj_pairs(pos, eps_i, sig_i, params.cutoff)
        move = forces * step_size
        lengths = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, max_move / np.maximum(lengths, 1e-12))
        pos = pos + move
    return pos


# ---------------------------------------------------------------------------
# Synthetic dataset generators


def _insert_points(
    rng: np.random.Generator,
    n_points: int,
    box: float,
    min_dist: np.ndarray,
    max_tries: int,
) -> np.ndarray:
    """Sequentially place points in [0, box]^3 obeying pairwise floors.

    ``min_dist`` is an (N, N) matrix of per-pair minimum separations.
    """
    pos = np.empty((n_points, 3))
    pos[0] = rng.uniform(0.0, box, size=3)
    for i in range(1, n_points):
        for attempt in range(max_tries):
            cand = rng.uniform(0.0, box, size=3)
            d = np.linalg.norm(pos[:i] - cand, axis=1)
            if np.all(d > min_dist[i, :i]):
                pos[i] = cand
                break
        else:
            raise GenerationError(
                f"failed to place atom {i} after {max_tries} attempts; "
                f"box too small for the separation floor"
            )
    return pos


def generate_lj_clusters(
    n_systems: int,
    atoms_per_system: int,
    box: float = 11.0,
    params: LJParams | None = None,
    seed: int = 0,
    vocabulary: tuple[str, ...] = VOCAB_PROTEIN,
    mask_fraction: float = 0.0,
    max_tries: int = 5000,
) -> list[AtomSystem]:
    """Random multi-element clusters with Lennard-Jones force targets.

    Configurations are rejection-sampled so every pair distance exceeds
    0.8 of the mixed pair sigma.  Randomness is streamed per system index,
    so generation order does not matter.  ``mask_fraction`` marks a random
    subset of atoms as input-only (solvent emulation).
    """
    if atoms_per_system < 2:
        raise ValueError("atoms_per_system must be >= 2")
    params = params or LJParams()
    systems = []
    for idx in range(n_systems):
        rng = np.random.default_rng([seed, 7, idx])
        elements = tuple(rng.choice(vocabulary, size=atoms_per_system))
        _, sig_i = _element_lj(elements, params)
        pair_floor = _MIN_SEPARATION_FACTOR * 0.5 * (sig_i[:, None] + sig_i[None, :])
        positions = _insert_points(rng, atoms_per_system, box, pair_floor, max_tries)
        forces = lj_forces_mixed(positions, elements, params)
        mask = np.ones(atoms_per_system, dtype=bool)
        if mask_fraction > 0.0:
            mask = rng.random(atoms_per_system) >= mask_fraction
            if not mask.any():
                mask[0] = True
        systems.append(
            AtomSystem(positions, elements, mask, forces, identifier=f"lj-{idx:04d}")
        )
    return systems


def gravity_accelerations(positions: np.ndarray, masses: np.ndarray) -> np.ndarray:
    """Newtonian accelerations a_i = sum_j m_j (x_j - x_i) / |x_j - x_i|^3."""
    pos = np.asarray(positions, dtype=float)
    m = np.asarray(masses, dtype=float)
    n = len(pos)
    diff = pos[None, :, :] - pos[:, None, :]
    r = np.sqrt(np.sum(diff * diff, axis=2))
    off = ~np.eye(n, dtype=bool)
    if np.any(r[off] < _COINCIDENT_TOL):
        raise ValueError("coincident points")
    np.fill_diagonal(r, np.inf)
    return np.sum((m[None, :] / r**3)[:, :, None] * diff, axis=1)


def gravity_toy(
    n_systems: int,
    n_points: int,
    seed: int = 0,
    box: float = 4.0,
    min_dist: float = 0.6,
    vocabulary: tuple[str, ...] = VOCAB_PROTEIN,
    max_tries: int = 5000,
) -> list[AtomSystem]:
    """Random point-mass systems with acceleration targets (natural units).

    Masses are set by element label, so one-hot inputs determine them.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    systems = []
    floor = np.full((n_points, n_points), min_dist)
    for idx in range(n_systems):
        rng = np.random.default_rng([seed, 11, idx])
        elements = tuple(rng.choice(vocabulary, size=n_points))
        masses = np.array([ELEMENT_MASS[e] for e in elements])
        positions = _insert_points(rng, n_points, box, floor, max_tries)
        targets = gravity_accelerations(positions, masses)
        systems.append(
            AtomSystem(positions, elements, None, targets, identifier=f"grav-{idx:04d}")
        )
    return systems
