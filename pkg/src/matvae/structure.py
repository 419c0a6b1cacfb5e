"""Contact masks from wild-type PDB structures."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matvae import kernels

DEFAULT_CUTOFF = 7.0


class StructureError(ValueError):
    pass


@dataclass
class ResidueCoords:
    chain: str
    residue_numbers: list[int]
    coords: np.ndarray  # n x 3, Angstrom

    def __len__(self) -> int:
        return len(self.residue_numbers)


@dataclass
class ContactMask:
    mask: np.ndarray  # L x L bool

    @property
    def length(self) -> int:
        return self.mask.shape[0]

    @classmethod
    def full(cls, length: int) -> "ContactMask":
        return cls(np.ones((length, length), dtype=bool))


def _atom_fields(line: str):
    # fixed-width PDB v3.3 ATOM columns
    name = line[12:16].strip()
    altloc = line[16].strip()
    chain = line[21].strip()
    resseq = int(line[22:26])
    icode = line[26].strip()
    x, y, z = float(line[30:38]), float(line[38:46]), float(line[46:54])
    occ_txt = line[54:60].strip()
    occ = float(occ_txt) if occ_txt else 1.0
    return name, altloc, chain, resseq, icode, (x, y, z), occ


def parse_pdb(path, chain: str | None = None) -> ResidueCoords:
    """One representative atom per residue: CA, else CB, else the first atom.

    Alternate locations resolve to the highest occupancy (first on ties).
    ``chain=None`` takes the chain of the first ATOM record.
    """
    path = Path(path)
    atoms: dict[int, dict[str, tuple[float, tuple[float, float, float]]]] = {}
    order: dict[int, list[str]] = {}
    found_any = False
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.startswith("ATOM  "):
                if line.startswith("ENDMDL"):
                    break
                continue
            try:
                name, altloc, ch, resseq, icode, xyz, occ = _atom_fields(line.rstrip("\n").ljust(80))
            except ValueError:
                raise StructureError(f"{path}:{lineno}: malformed ATOM record") from None
            found_any = True
            if chain is None:
                chain = ch
            if ch != chain or icode:
                continue
            res = atoms.setdefault(resseq, {})
            names = order.setdefault(resseq, [])
            if name in res:
                prev_occ, prev_xyz = res[name]
                if altloc:
                    if occ > prev_occ:
                        res[name] = (occ, xyz)
                    continue
                if prev_xyz != xyz:
                    raise StructureError(f"{path}:{lineno}: residue {resseq} atom {name} has conflicting coordinates")
                continue
            res[name] = (occ, xyz)
            names.append(name)
    if not found_any:
        raise StructureError(f"{path}: no ATOM records")
    if not atoms:
        raise StructureError(f"{path}: chain {chain!r} has no ATOM records")
    numbers = sorted(atoms)
    coords = []
    for r in numbers:
        res = atoms[r]
        rep = "CA" if "CA" in res else "CB" if "CB" in res else order[r][0]
        coords.append(res[rep][1])
    return ResidueCoords(chain, numbers, np.array(coords, dtype=np.float64))


def distance_matrix(coords) -> np.ndarray:
    """Euclidean pairwise distances between representative atoms."""
    c = coords.coords if isinstance(coords, ResidueCoords) else np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 1:
        raise StructureError("distance_matrix: need at least one coordinate")
    return kernels.pairwise_distances(c)


def contact_mask(coords: ResidueCoords, cutoff: float = DEFAULT_CUTOFF, column_map: list[int] | None = None) -> ContactMask:
    """mask[i, j] = distance <= cutoff between the residues of columns i and j."""
    if column_map is None:
        column_map = list(coords.residue_numbers)
    row_of = {r: i for i, r in enumerate(coords.residue_numbers)}
    missing = [p for p in column_map if p not in row_of]
    if missing:
        raise StructureError(f"structure lacks residues for positions {missing}")
    idx = np.array([row_of[p] for p in column_map], dtype=np.intp)
    dist = distance_matrix(coords.coords[idx])
    return mask_from_distances(dist, cutoff)


def mask_from_distances(dist: np.ndarray, cutoff: float = DEFAULT_CUTOFF) -> ContactMask:
    m = np.asarray(dist) <= cutoff
    np.fill_diagonal(m, True)
    return ContactMask(m)


def hop_reach(mask: np.ndarray, hops: int) -> np.ndarray:
    """Boolean reachability within ``hops`` steps of the mask graph."""
    m = np.asarray(mask, dtype=bool)
    reach = np.eye(m.shape[0], dtype=bool)
    for _ in range(hops):
        reach = (reach.astype(np.int64) @ m.astype(np.int64)) > 0
    return reach
