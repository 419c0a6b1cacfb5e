"""MSA / DMS ingestion and DeepSequence-style preprocessing."""
from __future__ import annotations

import csv
import logging
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matvae import kernels

log = logging.getLogger(__name__)

# 20 canonical residues then the gap; GAP_INDEX is fixed at 20.
ALPHABET = "ACDEFGHIKLMNPQRSTVWY-"
GAP = "-"
GAP_INDEX = ALPHABET.index(GAP)
AMBIGUOUS = set("BZXJUO")

ROW_GAP_MAX = 0.5
COL_GAP_MAX = 0.3
DEFAULT_THETA = 0.2


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Alphabet:
    symbols: str = ALPHABET

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def gap_index(self) -> int:
        return self.symbols.index(GAP)

    def index(self, ch: str) -> int:
        c = ch.upper()
        if c == ".":
            c = GAP
        try:
            return self.symbols.index(c)
        except ValueError:
            if c in AMBIGUOUS:
                log.warning("ambiguous residue %r mapped to gap", ch)
                return self.gap_index
            raise


PROTEIN = Alphabet()


@dataclass
class RawAlignment:
    ids: list[str]
    seqs: list[str]

    def __len__(self) -> int:
        return len(self.seqs)

    @property
    def width(self) -> int:
        return len(self.seqs[0]) if self.seqs else 0


@dataclass
class MsaDataset:
    """Preprocessed alignment ready for training.

    ``encoded`` is the N x L integer matrix of alphabet indices; one-hot
    matrices are built on demand.
    """

    ids: list[str]
    encoded: np.ndarray
    weights: np.ndarray
    column_map: list[int]
    alphabet: Alphabet = PROTEIN

    @property
    def length(self) -> int:
        return self.encoded.shape[1]

    @property
    def wild_type(self) -> np.ndarray:
        return one_hot_indices(self.encoded[0], self.alphabet.size)

    @property
    def wild_type_string(self) -> str:
        return decode_indices(self.encoded[0], self.alphabet)

    def sequences(self) -> list[str]:
        return [decode_indices(r, self.alphabet) for r in self.encoded]

    def __len__(self) -> int:
        return self.encoded.shape[0]


@dataclass
class DmsRecord:
    mutant: str
    encoded: np.ndarray
    score: float
    label: bool


@dataclass
class DmsDataset:
    records: list[DmsRecord]
    threshold: float
    higher_is_fit: bool = True
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=bool)

    @property
    def fitness(self) -> np.ndarray:
        """Scores oriented so that larger means fitter."""
        s = self.scores
        return s if self.higher_is_fit else -s

    def one_hot(self, alphabet: Alphabet = PROTEIN) -> np.ndarray:
        return np.stack([one_hot_indices(r.encoded, alphabet.size) for r in self.records])

    def standardized(self) -> "DmsDataset":
        """Copy with z-scored scores; labels and threshold follow."""
        s = self.scores
        mu, sd = s.mean(), s.std()
        if sd == 0:
            raise DataError("cannot standardize constant DMS scores")
        recs = [DmsRecord(r.mutant, r.encoded, (r.score - mu) / sd, r.label) for r in self.records]
        return DmsDataset(recs, (self.threshold - mu) / sd, self.higher_is_fit, self.n_dropped)


@dataclass
class FoldSplit:
    assignment: np.ndarray
    k: int
    seed: int

    def indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, validation) index arrays for ``fold``."""
        val = np.flatnonzero(self.assignment == fold)
        train = np.flatnonzero(self.assignment != fold)
        return train, val


# ---------------------------------------------------------------------------
# parsing


def _read_fasta_records(path: Path) -> list[tuple[str, str, int]]:
    records: list[tuple[str, list[str], int]] = []
    text = path.read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            name = line[1:].strip()
            if not name:
                raise DataError(f"{path}:{lineno}: empty header")
            records.append((name, [], lineno))
        else:
            if not records:
                raise DataError(f"{path}:{lineno}: sequence data before first header")
            records[-1][1].append(line)
    if not records:
        raise DataError(f"{path}: no records")
    return [(n, "".join(parts), ln) for n, parts, ln in records]


def parse_msa(path, fmt: str = "a2m") -> RawAlignment:
    """Read an aligned FASTA / a2m file.

    In a2m, lowercase letters are insert states and are dropped, and '.' is
    a gap.  The first record is taken as the query (wild type).
    """
    path = Path(path)
    if fmt not in ("a2m", "fasta"):
        raise ValueError(f"unknown MSA format {fmt!r}")
    ids, seqs = [], []
    width = None
    for name, seq, lineno in _read_fasta_records(path):
        if fmt == "a2m":
            seq = "".join(c for c in seq if not c.islower() and c != ".")
        seq = seq.replace(".", GAP).upper()
        if width is None:
            width = len(seq)
        elif len(seq) != width:
            raise DataError(
                f"{path}:{lineno}: record {name!r} has aligned length {len(seq)}, expected {width}"
            )
        ids.append(name)
        seqs.append(seq)
    if not width:
        raise DataError(f"{path}: empty alignment")
    return RawAlignment(ids, seqs)


def filter_rows(aln: RawAlignment, max_gap: float = ROW_GAP_MAX) -> RawAlignment:
    """Drop sequences whose gap fraction is strictly above ``max_gap``.

    The first record (wild type) is always kept.
    """
    if not aln.seqs:
        raise DataError("filter_rows: empty alignment")
    keep_ids, keep = [aln.ids[0]], [aln.seqs[0]]
    for name, s in zip(aln.ids[1:], aln.seqs[1:]):
        if s.count(GAP) / len(s) <= max_gap:
            keep_ids.append(name)
            keep.append(s)
    return RawAlignment(keep_ids, keep)


def filter_columns(aln: RawAlignment, max_gap: float = COL_GAP_MAX) -> tuple[RawAlignment, list[int]]:
    """Drop columns whose gap fraction is strictly above ``max_gap``.

    Returns the reduced alignment and the surviving 1-based column indices.
    """
    if not aln.seqs:
        raise DataError("filter_columns: empty alignment")
    arr = np.array([list(s) for s in aln.seqs])
    frac = (arr == GAP).mean(axis=0)
    kept = np.flatnonzero(frac <= max_gap)
    if kept.size == 0:
        raise DataError("filter_columns: every column exceeds the gap threshold")
    seqs = ["".join(row) for row in arr[:, kept]]
    return RawAlignment(list(aln.ids), seqs), [int(c) + 1 for c in kept]


def filter_alignment(aln: RawAlignment, row_gap: float = ROW_GAP_MAX,
                     col_gap: float = COL_GAP_MAX) -> tuple[RawAlignment, list[int]]:
    """Alternate row and column filtering until neither removes anything.

    A single pass is not idempotent: dropping columns changes row gap
    fractions.  Iterating makes the result a fixed point.
    """
    cols = list(range(1, aln.width + 1))
    while True:
        rows = filter_rows(aln, row_gap)
        out, kept = filter_columns(rows, col_gap)
        cols = [cols[k - 1] for k in kept]
        if len(out) == len(aln) and out.width == aln.width:
            return out, cols
        aln = out


def query_start(query_id: str) -> int:
    """Residue number of the first query residue from a ``NAME/start-end`` header."""
    m = re.search(r"/(\d+)-(\d+)$", query_id.split()[0]) if query_id else None
    return int(m.group(1)) if m else 1


def query_positions(query: str, start: int = 1) -> list[int]:
    """1-based wild-type residue number of each alignment column (0 for gaps)."""
    out, pos = [], start - 1
    for c in query:
        if c == GAP:
            out.append(0)
        else:
            pos += 1
            out.append(pos)
    return out


# ---------------------------------------------------------------------------
# encoding


def encode(seq: str, alphabet: Alphabet = PROTEIN) -> np.ndarray:
    out = np.empty(len(seq), dtype=np.int8)
    for i, ch in enumerate(seq):
        try:
            out[i] = alphabet.index(ch)
        except ValueError:
            raise DataError(f"unmappable character {ch!r} at position {i + 1}") from None
    return out


def one_hot_indices(idx: np.ndarray, d: int = PROTEIN.size) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (d,), dtype=np.float64)
    np.put_along_axis(out, idx[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def one_hot(seq: str, alphabet: Alphabet = PROTEIN) -> np.ndarray:
    """L x d one-hot matrix of ``seq``."""
    return one_hot_indices(encode(seq, alphabet), alphabet.size)


def decode_indices(idx, alphabet: Alphabet = PROTEIN) -> str:
    return "".join(alphabet.symbols[int(i)] for i in idx)


def decode(x: np.ndarray, alphabet: Alphabet = PROTEIN) -> str:
    return decode_indices(np.asarray(x).argmax(axis=-1), alphabet)


# ---------------------------------------------------------------------------
# weighting and sampling


def compute_weights(encoded: np.ndarray, theta: float = DEFAULT_THETA) -> np.ndarray:
    """Reciprocal neighbourhood size under normalised Hamming distance < theta."""
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    counts = kernels.neighbor_counts(np.ascontiguousarray(encoded, dtype=np.int8), float(theta))
    return 1.0 / counts.astype(np.float64)


def preprocess(aln: RawAlignment, theta: float = DEFAULT_THETA, row_gap: float = ROW_GAP_MAX,
               col_gap: float = COL_GAP_MAX, alphabet: Alphabet = PROTEIN) -> MsaDataset:
    """Filter rows and columns, encode, and weight.

    ``column_map`` holds 1-based wild-type residue numbers of the kept
    columns; columns where the query itself has a gap are dropped because
    they have no wild-type coordinate.
    """
    qpos = query_positions(aln.seqs[0], query_start(aln.ids[0]))
    cols, kept = filter_alignment(aln, row_gap, col_gap)
    sel = [i for i, c in enumerate(kept) if qpos[c - 1] > 0]
    if not sel:
        raise DataError("no retained column is a wild-type residue")
    seqs = ["".join(s[i] for i in sel) for s in cols.seqs]
    column_map = [qpos[kept[i] - 1] for i in sel]
    encoded = np.stack([encode(s, alphabet) for s in seqs])
    return MsaDataset(list(cols.ids), encoded, compute_weights(encoded, theta), column_map, alphabet)


def sample_batch(msa: MsaDataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn i.i.d. with probability proportional to the weights."""
    p = msa.weights / msa.weights.sum()
    return rng.choice(len(msa), size=batch_size, replace=True, p=p)


# ---------------------------------------------------------------------------
# DMS


def parse_mutant(mutant: str) -> list[tuple[str, int, str]]:
    subs = []
    for part in mutant.split(":"):
        part = part.strip()
        if len(part) < 3 or not part[1:-1].isdigit() or not part[0].isalpha() or not part[-1].isalpha():
            raise DataError(f"unparsable mutant {mutant!r}")
        subs.append((part[0].upper(), int(part[1:-1]), part[-1].upper()))
    return subs


def residue_lookup(wild_type: str | Mapping[int, str]) -> dict[int, str]:
    """Residue number -> upper-case letter; a plain string is numbered from 1."""
    if isinstance(wild_type, str):
        return {i + 1: c.upper() for i, c in enumerate(wild_type)}
    return {int(k): v.upper() for k, v in wild_type.items()}


def apply_mutant(mutant: str, wild_type: str | Mapping[int, str], column_map: list[int]) -> str | None:
    """Processed-coordinate mutated sequence, or None if a site was filtered out.

    ``wild_type`` is the unaligned query sequence, or a mapping from residue
    number to letter when the query does not start at residue 1.
    """
    wt_at = residue_lookup(wild_type)
    col_of = {p: i for i, p in enumerate(column_map)}
    try:
        out = [wt_at[p] for p in column_map]
    except KeyError as exc:
        raise DataError(f"column_map position {exc.args[0]} missing from wild type") from None
    dropped = False
    for wt, pos, mt in parse_mutant(mutant):
        found = wt_at.get(pos)
        if found != wt:
            raise DataError(f"mutant {mutant!r}: wild type at position {pos} is {found or '<out of range>'!r}, not {wt!r}")
        if pos not in col_of:
            dropped = True
            continue
        out[col_of[pos]] = mt
    return None if dropped else "".join(out)


def parse_dms(path, wild_type: str | Mapping[int, str], column_map: list[int], threshold: float | None = None,
              higher_is_fit: bool = True, alphabet: Alphabet = PROTEIN) -> DmsDataset:
    """Read a ProteinGym-style DMS table (``mutant,DMS_score[,DMS_score_bin]``).

    Threshold precedence: explicit ``threshold``; else the boundary implied by
    ``DMS_score_bin`` (smallest fit score); else the median score.
    """
    path = Path(path)
    wt = residue_lookup(wild_type)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "mutant" not in reader.fieldnames or "DMS_score" not in reader.fieldnames:
            raise DataError(f"{path}: header must contain 'mutant' and 'DMS_score'")
        has_bin = "DMS_score_bin" in reader.fieldnames
        for lineno, row in enumerate(reader, start=2):
            try:
                seq = apply_mutant(row["mutant"], wt, column_map)
                score = float(row["DMS_score"])
            except (DataError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            b = row.get("DMS_score_bin") if has_bin else None
            rows.append((row["mutant"], seq, score, None if b in (None, "") else bool(int(float(b)))))
    kept = [r for r in rows if r[1] is not None]
    n_dropped = len(rows) - len(kept)
    if n_dropped:
        log.info("dropped %d variants touching filtered columns", n_dropped)
    if not kept:
        raise DataError(f"{path}: no variants left after column filtering")
    if threshold is None:
        fit_scores = [s for _, _, s, b in kept if b]
        if fit_scores and all(b is not None for *_, b in kept):
            threshold = min(fit_scores) if higher_is_fit else max(fit_scores)
        else:
            threshold = float(np.median([s for _, _, s, _ in kept]))
    recs = [
        DmsRecord(m, encode(seq, alphabet), s, (s >= threshold) if higher_is_fit else (s <= threshold))
        for m, seq, s, _ in kept
    ]
    return DmsDataset(recs, float(threshold), higher_is_fit, n_dropped)


def kfold_split(n: int, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle then round-robin fold assignment."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} records into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % k
    return FoldSplit(assignment, k, seed)
