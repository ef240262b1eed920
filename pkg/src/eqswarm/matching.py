"""Turning swarms back into atoms and scoring reconstructions."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .cloud import Swarm, TypedPointCloud


@dataclass(frozen=True)
class SyntheticAtom:
    position: np.ndarray
    mass: float
    type_probs: np.ndarray

    @property
    def type_index(self) -> int:
        return int(np.argmax(self.type_probs))


@dataclass
class MatchReport:
    matched: np.ndarray  # per input atom
    deviations: np.ndarray  # per input atom, Å (nan where mass is zero)
    masses: np.ndarray
    type_correct: np.ndarray
    molecule_id: int = 0

    @property
    def n_atoms(self) -> int:
        return len(self.matched)

    @property
    def molecule_matched(self) -> bool:
        return bool(self.matched.all())

    @property
    def matched_fraction(self) -> float:
        return float(self.matched.mean())

    @property
    def mean_deviation(self) -> float:
        """Mean δ over matched atoms; nan when nothing matched."""
        if not self.matched.any():
            return float("nan")
        return float(self.deviations[self.matched].mean())

    @property
    def type_accuracy(self) -> float:
        return float(self.type_correct.mean())


def _weighted_atom(pos: np.ndarray, probs: np.ndarray, w: np.ndarray,
                   fallback: np.ndarray) -> SyntheticAtom:
    mass = float(w.sum())
    if mass <= 0:
        return SyntheticAtom(np.asarray(fallback, float).copy(), 0.0,
                             np.full(probs.shape[1], 1.0 / probs.shape[1]))
    return SyntheticAtom(w @ pos / mass, mass, w @ probs / mass)


def scaffold_match(cloud: TypedPointCloud, swarm: Swarm, radius: float = 0.5,
                   mass_cutoff: float = 0.25) -> tuple[list[SyntheticAtom], MatchReport]:
    """Assign every swarm point within ``radius`` of an input atom to the
    nearest such atom (ties go to the lower index) and collapse each group
    into a weight-averaged synthetic atom."""
    x = cloud.positions
    y = np.asarray(swarm.positions, float)
    w = np.asarray(swarm.weights, float)
    d = np.linalg.norm(y[:, None, :] - x[None, :, :], axis=2)  # [n_j, n_i]
    owner = np.argmin(d, axis=1)  # argmin returns the first minimum
    owner = np.where(d[np.arange(len(y)), owner] <= radius, owner, -1)

    atoms, masses, devs = [], np.zeros(cloud.n_atoms), np.full(cloud.n_atoms, np.nan)
    type_ok = np.zeros(cloud.n_atoms, dtype=bool)
    for i in range(cloud.n_atoms):
        sel = owner == i
        atom = _weighted_atom(y[sel], swarm.type_probs[sel], w[sel], x[i])
        atoms.append(atom)
        masses[i] = atom.mass
        if atom.mass > 0:
            devs[i] = float(np.linalg.norm(atom.position - x[i]))
            type_ok[i] = atom.type_index == cloud.types[i]
    report = MatchReport(matched=masses >= mass_cutoff, deviations=devs,
                         masses=masses, type_correct=type_ok)
    return atoms, report


def agglomerative_cluster(swarm: Swarm, link_threshold: float = 0.75,
                          min_mass: float = 0.25) -> list[SyntheticAtom]:
    """Single-linkage clusters of swarm points; light clusters are folded into
    the cluster with the nearest centroid until all reach ``min_mass`` (or a
    single cluster remains)."""
    y = np.asarray(swarm.positions, float)
    w = np.asarray(swarm.weights, float)
    if len(y) == 0:
        raise ValueError("empty swarm")
    if len(y) == 1:
        labels = np.zeros(1, dtype=int)
    else:
        labels = fcluster(linkage(y, method="single"), t=link_threshold, criterion="distance") - 1
    groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]

    def summary(g):
        m = w[g].sum()
        c = w[g] @ y[g] / m if m > 0 else y[g].mean(axis=0)
        return m, c

    while len(groups) > 1:
        stats = [summary(g) for g in groups]
        light = [k for k, (m, _) in enumerate(stats) if m < min_mass]
        if not light:
            break
        k = min(light, key=lambda k: stats[k][0])
        cents = np.array([c for _, c in stats])
        dist = np.linalg.norm(cents - cents[k], axis=1)
        dist[k] = np.inf
        j = int(np.argmin(dist))
        groups[j] = np.concatenate([groups[j], groups[k]])
        del groups[k]
    return [_weighted_atom(y[g], swarm.type_probs[g], w[g], y[g].mean(axis=0))
            for g in sorted(groups, key=lambda g: g.min())]


def mean_deviations(reports: Sequence[MatchReport]) -> tuple[float | None, float | None]:
    """(atom-wise, molecule-wise) mean deviation.

    Atom-wise averages δ over every matched atom in the dataset; molecule-wise
    first averages within each fully matched molecule.  ``None`` marks a mean
    with nothing to average.
    """
    atom_devs = [r.deviations[r.matched] for r in reports]
    flat = np.concatenate(atom_devs) if atom_devs else np.zeros(0)
    atomwise = float(flat.mean()) if flat.size else None
    mol = [r.deviations.mean() for r in reports if r.n_atoms and r.molecule_matched]
    molwise = float(np.mean(mol)) if mol else None
    return atomwise, molwise


@dataclass
class DatasetMatch:
    reports: list
    atomwise: float | None
    molwise: float | None

    @property
    def matched_molecule_fraction(self) -> float:
        return float(np.mean([r.molecule_matched for r in self.reports]))

    @property
    def matched_atom_fraction(self) -> float:
        return float(np.concatenate([r.matched for r in self.reports]).mean())


def match_dataset(clouds: Sequence[TypedPointCloud], swarms: Sequence[Swarm],
                  radius: float = 0.5, mass_cutoff: float = 0.25) -> DatasetMatch:
    reports = []
    for k, (c, s) in enumerate(zip(clouds, swarms)):
        _, rep = scaffold_match(c, s, radius, mass_cutoff)
        rep.molecule_id = k
        reports.append(rep)
    return DatasetMatch(reports, *mean_deviations(reports))


def reports_to_csv(reports: Sequence[MatchReport]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["molecule_id", "n_atoms", "matched", "mean_deviation", "type_accuracy"])
    for r in reports:
        wr.writerow([r.molecule_id, r.n_atoms, int(r.molecule_matched),
                     f"{r.mean_deviation:.10g}", f"{r.type_accuracy:.10g}"])
    return buf.getvalue()
