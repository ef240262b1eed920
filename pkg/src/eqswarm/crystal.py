"""P1 (Z = 1) molecular crystals: parameterization, cluster construction,
pair-potential energies, crystal embeddings and dataset synthesis.

Cell matrices hold the lattice vectors as rows (a along x, b in the xy plane),
so Cartesian = fractional @ H.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import DomainError, TypedPointCloud
from .data import SynthConfig, synth_molecule
from .nn import Linear, Module
from .training import AdamW, AdamWConfig

log = logging.getLogger(__name__)

VDW_RADII = np.array([1.10, 1.70, 1.55, 1.52, 1.47])  # H C N O F, Å
ATOMIC_MASSES = np.array([1.008, 12.011, 14.007, 15.999, 18.998])
INTERACTION_RANGE = 6.0
MAX_IMAGES = 100_000
BUCKINGHAM = (-3.26, 1.0, -0.2)  # A, B, C
COINCIDENT = 1e-9


class CellError(DomainError):
    pass


@dataclass(frozen=True)
class CrystalParams:
    lengths: np.ndarray  # a, b, c in Å
    angles: np.ndarray  # alpha, beta, gamma in radians
    frac: np.ndarray  # fractional centroid
    rotvec: np.ndarray  # axis-angle rotation of the standard pose

    def __post_init__(self):
        for name in ("lengths", "angles", "frac", "rotvec"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.lengths <= 0):
            raise CellError(f"cell lengths must be positive, got {self.lengths}")
        if np.any(self.angles <= 0) or np.any(self.angles >= np.pi):
            raise CellError(f"cell angles must lie in (0, pi), got {self.angles}")

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.lengths, self.angles, self.frac, self.rotvec])

    @classmethod
    def from_array(cls, x) -> "CrystalParams":
        x = np.asarray(x, dtype=np.float64)
        return cls(x[0:3], x[3:6], x[6:9], x[9:12])

    @property
    def cell(self) -> np.ndarray:
        return cell_matrix(self.lengths, self.angles)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.cell))


def _cell_c_z2(angles) -> float:
    ca, cb, cg = np.cos(angles)
    return 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg


def cell_matrix(lengths, angles) -> np.ndarray:
    """Lower-triangular cell matrix (rows are lattice vectors)."""
    a, b, c = lengths
    al, be, ga = angles
    radicand = _cell_c_z2(angles)
    if radicand <= 0:
        raise CellError(f"degenerate cell: volume {a * b * c * np.sqrt(max(radicand, 0.0)):.3g} Å^3")
    sg = np.sin(ga)
    cy = (np.cos(al) - np.cos(be) * np.cos(ga)) / sg
    return np.array([
        [a, 0.0, 0.0],
        [b * np.cos(ga), b * sg, 0.0],
        [c * np.cos(be), c * cy, c * np.sqrt(radicand) / sg],
    ])


def rodrigues(rotvec) -> np.ndarray:
    theta = np.asarray(rotvec, dtype=np.float64)
    angle = float(np.linalg.norm(theta))
    if angle < 1e-15:
        return np.eye(3)
    k = theta / angle
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


# -- orientation ----------------------------------------------------------------

def inertia_frame(cloud: TypedPointCloud, masses: np.ndarray = ATOMIC_MASSES,
                  tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray, bool]:
    """(moments descending, axes as rows, degenerate flag).

    Each axis is signed so the mass-weighted third moment of the coordinates
    along it is non-negative; when that moment vanishes the first non-zero
    component of the axis is made positive.
    """
    m = masses[cloud.types]
    r = cloud.positions - (m @ cloud.positions) / m.sum()
    tensor = np.einsum("i,ij,ij->", m, r, r) * np.eye(3) - np.einsum("i,ij,ik->jk", m, r, r)
    vals, vecs = np.linalg.eigh(tensor)
    vals, axes = vals[::-1], vecs[:, ::-1].T.copy()
    scale = max(abs(vals[0]), 1e-300)
    degenerate = bool(np.any(np.abs(np.diff(vals)) < tol * scale))
    span = max(float(np.abs(r).max()), 1e-300) if len(r) else 1.0
    for k in range(3):
        proj = r @ axes[k]
        third = float(m @ (proj * proj * proj))
        if abs(third) > tol * m.sum() * span ** 3:
            if third < 0:
                axes[k] = -axes[k]
        else:
            nz = np.flatnonzero(np.abs(axes[k]) > 1e-12)
            if nz.size and axes[k][nz[0]] < 0:
                axes[k] = -axes[k]
    return vals, axes, degenerate


def standardize_orientation(cloud: TypedPointCloud, masses: np.ndarray = ATOMIC_MASSES
                            ) -> tuple[TypedPointCloud, np.ndarray, bool]:
    """Rotate ``cloud`` (about the origin) so its principal axes lie along
    x, y, z with moments descending.  Returns (standard cloud, R, degenerate)
    with standard positions = positions @ R.T.  R may be improper when the
    sign convention demands a reflection."""
    _, axes, degenerate = inertia_frame(cloud, masses)
    return cloud.with_positions(cloud.positions @ axes.T), axes, degenerate


# -- structures -----------------------------------------------------------------

@dataclass
class CrystalStructure:
    molecule: TypedPointCloud  # standard pose, centered
    params: CrystalParams | None
    cell: np.ndarray
    positions: np.ndarray  # asymmetric unit (= unit cell), Cartesian
    types: np.ndarray
    images: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    z: int = 1
    cutoff: float = INTERACTION_RANGE

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.cell)))

    def translations(self) -> np.ndarray:
        h = self.cell
        n = self.images.astype(np.float64)
        return n[:, 0:1] * h[0] + n[:, 1:2] * h[1] + n[:, 2:3] * h[2]

    def image_positions(self) -> np.ndarray:
        """[n_images, n_atoms, 3] Cartesian positions of the cluster images."""
        return self.positions[None, :, :] + self.translations()[:, None, :]

    def rotated(self, rot: np.ndarray) -> "CrystalStructure":
        rot = np.asarray(rot)
        return replace(self, cell=self.cell @ rot.T, positions=self.positions @ rot.T)

    def isolated(self) -> "CrystalStructure":
        return replace(self, images=np.zeros((0, 3), dtype=np.int64))


def build_unit_cell(molecule: TypedPointCloud, params: CrystalParams) -> CrystalStructure:
    """Rotate the standard-pose ``molecule`` by the rotation vector and place
    its centroid at fractional coordinates ``params.frac``."""
    h = params.cell
    rot = rodrigues(params.rotvec)
    centre = params.frac[0] * h[0] + params.frac[1] * h[1] + params.frac[2] * h[2]
    pos = molecule.positions @ rot.T + centre
    return CrystalStructure(molecule, params, h, pos, molecule.types.copy())


def _index_bounds(cell: np.ndarray, reach: float) -> np.ndarray:
    vol = abs(float(np.linalg.det(cell)))
    if vol < 1e-9:
        raise CellError(f"degenerate cell: volume {vol:.3g} Å^3")
    out = np.empty(3, dtype=np.int64)
    for k in range(3):
        other = np.cross(cell[(k + 1) % 3], cell[(k + 2) % 3])
        spacing = vol / np.linalg.norm(other)
        out[k] = int(np.ceil(reach / spacing))
    return out


def build_cluster(structure: CrystalStructure, cutoff: float = INTERACTION_RANGE) -> CrystalStructure:
    """Attach every periodic image (lattice index != 0) with an atom within
    ``cutoff`` of an asymmetric-unit atom, in lexicographic index order."""
    pos = structure.positions
    extent = float(np.max(np.linalg.norm(pos[:, None] - pos[None, :], axis=2))) if len(pos) else 0.0
    bounds = _index_bounds(structure.cell, cutoff + extent)
    count = int(np.prod(2 * bounds + 1))
    if count > MAX_IMAGES:
        raise CellError(f"cell needs {count} periodic images (> {MAX_IMAGES}); "
                        "tighten the cell-length/angle bounds")
    grid = np.array(list(product(*(range(-b, b + 1) for b in bounds))), dtype=np.int64)
    grid = grid[np.any(grid != 0, axis=1)]
    h = structure.cell
    n = grid.astype(np.float64)
    t = n[:, 0:1] * h[0] + n[:, 1:2] * h[1] + n[:, 2:3] * h[2]
    diff = pos[None, None, :, :] + t[:, None, None, :] - pos[None, :, None, :]
    d = np.sqrt(np.sum(diff * diff, axis=3))
    keep = (d <= cutoff).reshape(len(grid), -1).any(axis=1)
    return replace(structure, images=grid[keep], cutoff=cutoff)


# -- pair energies ---------------------------------------------------------------

@dataclass
class PairList:
    """Intermolecular pairs in (image, i, j) order, restricted to the cutoff."""

    r: np.ndarray
    sigma: np.ndarray  # vdW_i + vdW_j


def pair_list(structure: CrystalStructure, vdw: np.ndarray = VDW_RADII) -> PairList:
    if len(structure.images) == 0:
        return PairList(np.zeros(0), np.zeros(0))
    img = structure.image_positions()  # [m, n, 3]
    pos = structure.positions
    dx = img[:, None, :, 0] - pos[None, :, None, 0]
    dy = img[:, None, :, 1] - pos[None, :, None, 1]
    dz = img[:, None, :, 2] - pos[None, :, None, 2]
    r = np.sqrt(dx * dx + dy * dy + dz * dz).reshape(-1)  # index order (image, i, j)
    rad = vdw[structure.types]
    sig = np.broadcast_to(rad[:, None] + rad[None, :], (len(img),) + (len(pos),) * 2).reshape(-1)
    keep = r <= structure.cutoff
    r, sig = r[keep], sig[keep]
    if r.size and r.min() < COINCIDENT:
        raise FloatingPointError(f"coincident atoms (r = {r.min():.3g} Å); energy is not finite")
    return PairList(r, sig)


def _sequential_sum(x: np.ndarray) -> float:
    return float(np.cumsum(x)[-1]) if x.size else 0.0


def lj_pair(r, sigma):
    s = sigma / r
    s2 = s * s
    s6 = s2 * s2 * s2
    return s6 * s6 - s6


def buckingham_pair(d, a: float = BUCKINGHAM[0], b: float = BUCKINGHAM[1], c: float = BUCKINGHAM[2]):
    """A exp(-B d) - C / d^6 with d the vdW-scaled distance."""
    d2 = d * d
    return a * np.exp(-b * d) - c / (d2 * d2 * d2)


def lj_energy(structure: CrystalStructure, vdw: np.ndarray = VDW_RADII) -> float:
    """4 Σ ((σ/r)^12 - (σ/r)^6) over asymmetric-unit ↔ image pairs within the cutoff."""
    p = pair_list(structure, vdw)
    return 4.0 * _sequential_sum(lj_pair(p.r, p.sigma))


def buckingham_energy(structure: CrystalStructure, vdw: np.ndarray = VDW_RADII) -> float:
    p = pair_list(structure, vdw)
    return _sequential_sum(buckingham_pair(p.r / p.sigma))


def lattice_energy(structure: CrystalStructure,
                   energy_fn: Callable[[CrystalStructure], float]) -> float:
    """E_crystal / Z - E_gas, the gas phase being the same rigid molecule alone."""
    return energy_fn(structure) / structure.z - energy_fn(structure.isolated())


# -- differentiable energy in the 12 parameters ---------------------------------------

def _scalar_row(*xs) -> Tensor:
    return ad.concat([ad.reshape(ad.as_tensor(x), (1,)) for x in xs], axis=0)


def cell_tensor(p: Tensor) -> Tensor:
    a, b, c = p[0], p[1], p[2]
    ca, cb, cg = ad.cos(p[3]), ad.cos(p[4]), ad.cos(p[5])
    sg = ad.sin(p[5])
    cy = (ca - cb * cg) / sg
    cz = ad.sqrt(1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg) / sg
    zero = Tensor(np.zeros(()))
    return ad.concat([_scalar_row(a, zero, zero), _scalar_row(b * cg, b * sg, zero),
                      _scalar_row(c * cb, c * cy, c * cz)], axis=0).reshape(3, 3)


def rodrigues_tensor(theta: Tensor) -> Tensor:
    angle = ad.sqrt(ad.tsum(theta * theta) + 1e-30)
    k = theta / angle
    zero = Tensor(np.zeros(()))
    kx = ad.concat([_scalar_row(zero, -k[2], k[1]), _scalar_row(k[2], zero, -k[0]),
                    _scalar_row(-k[1], k[0], zero)], axis=0).reshape(3, 3)
    return np.eye(3) + ad.sin(angle) * kx + (1.0 - ad.cos(angle)) * (kx @ kx)


def energy_tensor(p: Tensor, molecule: TypedPointCloud, kind: str = "lj",
                  vdw: np.ndarray = VDW_RADII, cutoff: float = INTERACTION_RANGE) -> Tensor:
    """Energy as a differentiable function of the 12-vector ``p``.  The pair
    list is fixed from the numeric structure at ``p``."""
    params = CrystalParams.from_array(p.data)
    cluster = build_cluster(build_unit_cell(molecule, params), cutoff)
    n = len(molecule.positions)
    if len(cluster.images) == 0:
        return Tensor(np.zeros(())) + ad.tsum(p * 0.0)
    h = cell_tensor(p)
    rot = rodrigues_tensor(p[9:12])
    rel = Tensor(molecule.positions) @ ad.transpose(rot, (1, 0))  # [n, 3]
    m = len(cluster.images)
    ii = np.tile(np.repeat(np.arange(n), n), m)
    jj = np.tile(np.tile(np.arange(n), n), m)
    img = np.repeat(np.arange(m), n * n)
    shift = Tensor(cluster.images.astype(np.float64)) @ h  # [m, 3]
    diff = ad.gather(rel, jj) - ad.gather(rel, ii) + ad.gather(shift, img)
    r = ad.sqrt(ad.tsum(diff * diff, axis=1))
    keep = r.data <= cutoff
    r = ad.gather(r, np.flatnonzero(keep))
    rad = vdw[molecule.types]
    sig = (rad[ii] + rad[jj])[keep]
    if kind in ("lj", "lj_shifted"):
        s = sig / r
        s2 = s * s
        s6 = s2 * s2 * s2
        pair = s6 * s6 - s6
        if kind == "lj_shifted":
            # continuous at the cutoff, so line searches do not stall on the jump
            pair = pair - lj_pair(cutoff, sig)
        return ad.tsum(pair) * 4.0
    if kind == "buckingham":
        a, b, c = BUCKINGHAM
        d = r / sig
        d2 = d * d
        return ad.tsum(ad.exp(d * (-b)) * a - c / (d2 * d2 * d2))
    raise ValueError(f"unknown energy kind {kind!r}")


def energy_and_grad(x: np.ndarray, molecule: TypedPointCloud, kind: str = "lj") -> tuple[float, np.ndarray]:
    p = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    e = energy_tensor(p, molecule, kind)
    if not e.requires_grad:
        return float(e.data), np.zeros(12)
    ad.backward(e)
    return float(e.data), p.grad.copy()


# -- embeddings --------------------------------------------------------------------

def crystal_embedding(mol_embedding, params: CrystalParams) -> np.ndarray:
    c = np.concatenate([params.lengths / 20.0, params.angles / np.pi, params.frac, params.rotvec / np.pi])
    return np.concatenate([np.asarray(mol_embedding, dtype=np.float64).reshape(-1), c])


def molecular_volume(cloud: TypedPointCloud, vdw: np.ndarray = VDW_RADII) -> float:
    r = vdw[cloud.types]
    return float(np.sum(4.0 / 3.0 * np.pi * r * r * r))


def inertial_embedding(cloud: TypedPointCloud, masses: np.ndarray = ATOMIC_MASSES) -> np.ndarray:
    vals, axes, _ = inertia_frame(cloud, masses)
    return np.concatenate([vals, axes.reshape(-1)])


EMBEDDING_KINDS = ("empty", "volume", "inertial", "autoencoder")


def baseline_embeddings(cloud: TypedPointCloud, model=None) -> dict[str, np.ndarray]:
    out = {"empty": np.zeros(0), "volume": np.array([molecular_volume(cloud)]),
           "inertial": inertial_embedding(cloud)}
    if model is not None:
        out["autoencoder"] = np.asarray(model.encode([cloud])[0].scalars)
    return out


# -- dataset synthesis ---------------------------------------------------------------

@dataclass
class CrystalSynthConfig:
    n_variants: int = 10
    length_lo: float = 0.4  # times the molecule diameter
    length_hi: float = 1.5
    min_length: float = 2.0  # Å, floor for tiny molecules
    angle_lo: float = np.pi / 3
    angle_hi: float = 2 * np.pi / 3
    max_iter: int = 200
    grad_tol: float = 1e-4
    noise_lengths: float = 0.05  # relative
    noise_angles: float = 0.05  # rad
    noise_frac: float = 0.05
    noise_rotvec: float = 0.1  # rad
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class CrystalRecord:
    base: int
    variant: int  # 0 = optimized
    mol_seed: list
    params: np.ndarray
    lj: float
    buckingham: float


def _diameter(cloud: TypedPointCloud) -> float:
    pos = cloud.positions
    d = float(np.max(np.linalg.norm(pos[:, None] - pos[None, :], axis=2)))
    return d + 2.0 * float(VDW_RADII[cloud.types].max())


def sample_params(cloud: TypedPointCloud, rng: np.random.Generator,
                  cfg: CrystalSynthConfig) -> CrystalParams:
    diam = _diameter(cloud)
    for _ in range(100):
        lengths = np.maximum(rng.uniform(cfg.length_lo * diam, cfg.length_hi * diam, 3), cfg.min_length)
        angles = rng.uniform(cfg.angle_lo, cfg.angle_hi, 3)
        if _cell_c_z2(angles) <= MIN_RADICAND:
            continue
        u = rng.uniform(0, 1, 3)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        # uniform over the ball of radius pi
        theta = axis * np.pi * rng.uniform() ** (1.0 / 3.0)
        return CrystalParams(lengths, angles, u, theta)
    raise CellError("could not sample a valid cell")


MIN_RADICAND = 0.05  # keeps cells away from flat, image-hungry shapes


def _valid(x: np.ndarray) -> bool:
    return bool(np.all(x[0:3] > 1.0) and np.all(x[3:6] > 0.1) and np.all(x[3:6] < np.pi - 0.1)
                and _cell_c_z2(x[3:6]) > MIN_RADICAND)


def minimize_lj(cloud: TypedPointCloud, x0: np.ndarray, max_iter: int = 200,
                grad_tol: float = 1e-4, stall_window: int = 10, stall_rtol: float = 1e-2
                ) -> tuple[np.ndarray, float, float, bool]:
    """Gradient descent with Armijo backtracking on the cutoff-shifted LJ
    energy; returns (x, e0, e, converged) with shifted energies.

    Converged means a small gradient, no acceptable step, or a relative energy
    gain below ``stall_rtol`` over the last ``stall_window`` iterations.
    """
    x = np.array(x0, dtype=np.float64)
    # descend in coordinates where lengths are relative, so one step size suits all 12
    scale = np.concatenate([x[0:3], np.ones(9)])
    e, g = energy_and_grad(x, cloud, "lj_shifted")
    g = g * scale
    e0, hist, step = e, [e], 1e-2
    for _ in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < grad_tol:
            return x, e0, e, True
        t = step / gn
        while t * gn > 1e-10:
            cand = x - t * g * scale
            if _valid(cand):
                try:
                    ec, gc = energy_and_grad(cand, cloud, "lj_shifted")
                except (FloatingPointError, CellError):
                    ec = np.inf
                if ec <= e - 1e-4 * t * gn * gn:
                    x, e, g = cand, ec, gc * scale
                    step = min(t * gn * 2.0, 1.0)
                    break
            t *= 0.5
        else:
            return x, e0, e, True
        hist.append(e)
        if len(hist) > stall_window and hist[-stall_window - 1] - e <= stall_rtol * abs(e):
            return x, e0, e, True
    return x, e0, e, False


def structure_of(cloud: TypedPointCloud, params: CrystalParams) -> CrystalStructure:
    return build_cluster(build_unit_cell(cloud, params))


def synth_crystal_dataset(n: int, seed: int = 0, cfg: CrystalSynthConfig | None = None
                          ) -> tuple[list[CrystalRecord], dict[int, TypedPointCloud]]:
    """``n`` base crystals, each LJ-minimized and followed by ``n_variants``
    Gaussian perturbations.  Returns the records and the standard-pose
    molecules keyed by base index."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or CrystalSynthConfig()
    records, molecules = [], {}
    for base in range(n):
        mol_seed = [seed, base]
        rng = np.random.default_rng([seed, base, 1])
        cloud, _, _ = standardize_orientation(synth_molecule(cfg.synth, mol_seed))
        x0 = sample_params(cloud, rng, cfg).to_array()
        try:
            x, e0, e, ok = minimize_lj(cloud, x0, cfg.max_iter, cfg.grad_tol)
        except (CellError, FloatingPointError) as exc:
            log.warning("base crystal %d discarded: %s", base, exc)
            continue
        if not ok or not np.isfinite(e):
            log.warning("base crystal %d discarded: minimizer did not converge", base)
            continue
        molecules[base] = cloud
        xs = [x]
        scale = np.concatenate([x[0:3] * cfg.noise_lengths, np.full(3, cfg.noise_angles),
                                np.full(3, cfg.noise_frac), np.full(3, cfg.noise_rotvec)])
        structures = [structure_of(cloud, CrystalParams.from_array(x))]
        while len(structures) < cfg.n_variants + 1:
            cand = x + rng.normal(size=12) * scale
            if not _valid(cand):
                continue
            try:
                structures.append(structure_of(cloud, CrystalParams.from_array(cand)))
            except CellError:
                continue
        for k, st in enumerate(structures):
            try:
                lj = lattice_energy(st, lj_energy)
                bh = lattice_energy(st, buckingham_energy)
            except FloatingPointError:
                lj = bh = np.inf
            records.append(CrystalRecord(base, k, mol_seed, st.params.to_array(), lj, bh))
    return records, molecules


RECORD_HEADER = ("# crystal dataset; lengths in Å, angles and rotation vector in radians, "
                 "energies in arbitrary units E")


def write_records(records: Sequence[CrystalRecord], path, config_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [RECORD_HEADER, f"# config_hash={config_hash}"]
    for r in records:
        lines.append(json.dumps({"base": r.base, "variant": r.variant, "mol_seed": r.mol_seed,
                                 "params": [float(v) for v in r.params],
                                 "lj": float(r.lj), "buckingham": float(r.buckingham)}))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_records(path) -> list[CrystalRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        d = json.loads(line)
        out.append(CrystalRecord(d["base"], d["variant"], d["mol_seed"], np.array(d["params"]),
                                 d["lj"], d["buckingham"]))
    return out


# -- energy regression ---------------------------------------------------------------

@dataclass
class RegressionConfig:
    hidden: int = 256
    layers: int = 8
    epochs: int = 60
    batch: int = 128
    lr: float = 5e-4
    weight_decay: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0


class EnergyMLP(Module):
    """Residual GELU MLP mapping a crystal embedding to a scalar energy."""

    def __init__(self, d_in: int, cfg: RegressionConfig):
        rng = np.random.default_rng(cfg.seed)
        self.inp = Linear(d_in, cfg.hidden, rng)
        self.hidden = [Linear(cfg.hidden, cfg.hidden, rng) for _ in range(cfg.layers - 1)]
        self.out = Linear(cfg.hidden, 1, rng)

    def __call__(self, x) -> Tensor:
        h = ad.gelu(self.inp(x))
        for layer in self.hidden:
            h = h + ad.gelu(layer(h))
        return self.out(h).reshape(-1)


@dataclass
class RegressionResult:
    kind: str
    mae: float
    r: float
    n_train: int
    n_test: int
    test_true: np.ndarray
    test_pred: np.ndarray


def split_by_group(groups: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test row indices with every group (base molecule) on one side."""
    uniq = np.unique(groups)
    rng = np.random.default_rng(seed)
    test_groups = rng.permutation(uniq)[:max(1, int(round(test_fraction * len(uniq))))]
    is_test = np.isin(groups, test_groups)
    return np.flatnonzero(~is_test), np.flatnonzero(is_test)


def fit_energy_model(x: np.ndarray, y: np.ndarray, groups: np.ndarray,
                     cfg: RegressionConfig | None = None, kind: str = "") -> RegressionResult:
    cfg = cfg or RegressionConfig()
    train, test = split_by_group(groups, cfg.test_fraction, cfg.seed)
    mu, sd = x[train].mean(axis=0), x[train].std(axis=0) + 1e-8
    ym, ys = y[train].mean(), y[train].std() + 1e-12
    xs, yn = (x - mu) / sd, (y - ym) / ys
    model = EnergyMLP(x.shape[1], cfg)
    opt = AdamW(model.parameters(), AdamWConfig(weight_decay=cfg.weight_decay))
    rng = np.random.default_rng([cfg.seed, 1])
    steps_per_epoch = max(1, int(np.ceil(len(train) / cfg.batch)))
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(train)
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            diff = model(Tensor(xs[idx])) - yn[idx]
            loss = ad.mean(diff * diff)
            ad.zero_grad(model.parameters())
            ad.backward(loss)
            # linear decay to 10% of the base rate
            opt.step(cfg.lr * (1.0 - 0.9 * step / total))
            step += 1
    pred = model(Tensor(xs[test])).data * ys + ym
    true = y[test]
    r = float(np.corrcoef(true, pred)[0, 1]) if np.std(pred) > 0 else 0.0
    return RegressionResult(kind, float(np.mean(np.abs(pred - true))), r, len(train), len(test), true, pred)


def embedding_matrix(records: Sequence[CrystalRecord], molecules: dict[int, TypedPointCloud],
                     kind: str, model=None) -> np.ndarray:
    """Crystal embeddings (molecule part ∥ 12 parameters) for every record."""
    if kind not in EMBEDDING_KINDS:
        raise ValueError(f"unknown embedding kind {kind!r}")
    if kind == "autoencoder" and model is None:
        raise ValueError("autoencoder embedding needs a trained model checkpoint")
    bases = sorted(molecules)
    if kind == "autoencoder":
        embs = model.encode([molecules[b] for b in bases])
        mol = {b: np.asarray(e.scalars) for b, e in zip(bases, embs)}
    else:
        mol = {b: baseline_embeddings(molecules[b])[kind] for b in bases}
    return np.stack([crystal_embedding(mol[r.base], CrystalParams.from_array(r.params))
                     for r in records])


def regression_benchmark(records: Sequence[CrystalRecord], molecules: dict[int, TypedPointCloud],
                         model=None, target: str = "buckingham",
                         cfg: RegressionConfig | None = None,
                         kinds: Sequence[str] = EMBEDDING_KINDS) -> list[RegressionResult]:
    y = np.array([getattr(r, target) for r in records], dtype=np.float64)
    keep = np.isfinite(y)
    recs = [r for r, k in zip(records, keep) if k]
    groups = np.array([r.base for r in recs])
    return [fit_energy_model(embedding_matrix(recs, molecules, kind, model), y[keep], groups, cfg, kind)
            for kind in kinds]
