"""Synthetic molecules, augmentation and XYZ files.

Molecules are grown as random trees: every new atom sits a bond length away
from a randomly chosen existing atom, with placements closer than
``min_separation`` to any atom rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cloud import ELEMENTS, DomainError, TypedPointCloud, center_cloud

DEFAULT_TYPE_PROBS = (0.40, 0.35, 0.10, 0.12, 0.03)


class XYZFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    min_atoms: int = 4
    max_atoms: int = 9
    type_probs: tuple = DEFAULT_TYPE_PROBS
    bond_min: float = 1.0
    bond_max: float = 1.6
    min_separation: float = 0.8
    rescale_min: float = 0.95
    rescale_max: float = 1.05
    noise: float = 0.0
    max_attempts: int = 200
    max_reseeds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.min_atoms < 1 or self.max_atoms < self.min_atoms:
            raise ValueError(f"bad atom-count range [{self.min_atoms}, {self.max_atoms}]")
        if self.bond_min <= 0 or self.bond_max < self.bond_min:
            raise ValueError("bond lengths must be positive and ordered")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        if self.rescale_min <= 0 or self.rescale_max < self.rescale_min:
            raise ValueError("bad rescale range")
        p = np.asarray(self.type_probs, dtype=float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("type_probs must be a probability vector")

    @property
    def num_types(self) -> int:
        return len(self.type_probs)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _grow(cfg: SynthConfig, rng: np.random.Generator) -> TypedPointCloud | None:
    n = int(rng.integers(cfg.min_atoms, cfg.max_atoms + 1))
    types = rng.choice(cfg.num_types, size=n, p=np.asarray(cfg.type_probs, float))
    pos = np.zeros((n, 3))
    for k in range(1, n):
        for _ in range(cfg.max_attempts):
            anchor = pos[rng.integers(k)]
            cand = anchor + rng.uniform(cfg.bond_min, cfg.bond_max) * _random_unit(rng)
            if np.linalg.norm(pos[:k] - cand, axis=1).min() >= cfg.min_separation:
                pos[k] = cand
                break
        else:
            return None
    return center_cloud(TypedPointCloud(pos, types, cfg.num_types))


def synth_molecule(cfg: SynthConfig, seed) -> TypedPointCloud:
    """Random tree-grown molecule; a pure function of ``(cfg, seed)``."""
    for attempt in range(cfg.max_reseeds):
        mol = _grow(cfg, _rng([seed, attempt] if attempt else seed))
        if mol is not None:
            return mol
    raise RuntimeError(f"placement budget exhausted for seed {seed}")


def synth_dataset(cfg: SynthConfig, n: int) -> list[TypedPointCloud]:
    """``n`` molecules; molecule ``i`` uses the substream ``(cfg.seed, i)``."""
    return [synth_molecule(cfg, [cfg.seed, i]) for i in range(n)]


def augment(cloud: TypedPointCloud, cfg: SynthConfig, seed) -> TypedPointCloud:
    """Gaussian position noise, one global rescale, then re-centering."""
    rng = _rng(seed)
    pos = cloud.positions + rng.normal(scale=cfg.noise, size=cloud.positions.shape) \
        if cfg.noise > 0 else cloud.positions.copy()
    pos = pos * rng.uniform(cfg.rescale_min, cfg.rescale_max)
    return center_cloud(cloud.with_positions(pos))


# mean of the chi distribution with 3 degrees of freedom, in units of the std
_CHI3_MEAN = 2.0 * np.sqrt(2.0 / np.pi)


def symmetry_noise(cloud: TypedPointCloud, amplitude: float = 0.01,
                   seed=0) -> TypedPointCloud:
    """Isotropic per-atom displacement whose mean norm equals ``amplitude``."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude == 0:
        return cloud
    std = amplitude / _CHI3_MEAN
    return cloud.with_positions(cloud.positions + _rng(seed).normal(scale=std, size=cloud.positions.shape))


def strip_hydrogens(cloud: TypedPointCloud) -> TypedPointCloud:
    keep = cloud.types != 0
    if not keep.any():
        raise DomainError("molecule has no heavy atoms")
    return center_cloud(TypedPointCloud(cloud.positions[keep], cloud.types[keep], cloud.num_types))


# -- XYZ ----------------------------------------------------------------------

def parse_xyz(text: str, elements: Sequence[str] = ELEMENTS) -> TypedPointCloud:
    lines = text.splitlines()
    if not lines:
        raise XYZFormatError("line 1: missing atom count")
    try:
        n = int(lines[0].strip())
    except ValueError:
        raise XYZFormatError(f"line 1: malformed atom count {lines[0]!r}") from None
    if n < 0 or len(lines) < n + 2:
        raise XYZFormatError(f"line 1: expected {n} atoms, file has {max(len(lines) - 2, 0)} rows")
    lookup = {e.lower(): i for i, e in enumerate(elements)}
    pos, types = [], []
    for lineno in range(3, n + 3):
        parts = lines[lineno - 1].split()
        if len(parts) < 4:
            raise XYZFormatError(f"line {lineno}: expected 'symbol x y z'")
        sym = parts[0]
        if sym.lower() not in lookup:
            raise XYZFormatError(f"line {lineno}: unknown element {sym!r}")
        try:
            pos.append([float(t) for t in parts[1:4]])
        except ValueError:
            raise XYZFormatError(f"line {lineno}: non-numeric coordinate in {parts[1:4]}") from None
        types.append(lookup[sym.lower()])
    return TypedPointCloud(np.array(pos).reshape(-1, 3), np.array(types, dtype=int), len(elements))


def write_xyz(cloud: TypedPointCloud, comment: str = "",
              elements: Sequence[str] = ELEMENTS, extra: np.ndarray | None = None) -> str:
    """XYZ text; ``extra`` adds trailing per-atom columns (e.g. swarm weights)."""
    rows = [str(cloud.n_atoms), comment.replace("\n", " ")]
    for k, (p, z) in enumerate(zip(cloud.positions, cloud.types)):
        row = f"{elements[z]} {p[0]:.10f} {p[1]:.10f} {p[2]:.10f}"
        if extra is not None:
            row += " " + " ".join(f"{v:.10f}" for v in np.atleast_1d(extra[k]))
        rows.append(row)
    return "\n".join(rows) + "\n"


def read_xyz(path) -> TypedPointCloud:
    return parse_xyz(Path(path).read_text())


def write_dataset(clouds: Iterable[TypedPointCloud], out_dir, cfg: SynthConfig,
                  config_hash: str = "") -> Path:
    """One XYZ file per molecule plus ``manifest.json`` recording the seeds."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, c in enumerate(clouds):
        name = f"mol_{i:06d}.xyz"
        (out / name).write_text(write_xyz(c, comment=f"seed={cfg.seed} index={i}"))
        entries.append({"file": name, "seed": [cfg.seed, i], "n_atoms": c.n_atoms})
    manifest = {"config": asdict(cfg), "config_hash": config_hash, "molecules": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> list[TypedPointCloud]:
    """Molecules from a directory (manifest order if present) or a single XYZ file."""
    path = Path(path)
    if path.is_file():
        return [read_xyz(path)]
    manifest = path / "manifest.json"
    if manifest.exists():
        files = [path / e["file"] for e in json.loads(manifest.read_text())["molecules"]]
    else:
        files = sorted(path.glob("*.xyz"))
    return [center_cloud(read_xyz(f)) for f in files]
