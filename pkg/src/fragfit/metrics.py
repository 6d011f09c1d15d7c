"""Evaluation: CA detection precision/recall, AA-type precision, RMSD, TM-score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .structio import Structure

MATCH_CUTOFF = 1.5
TM_MIN_LENGTH = 20


@dataclass
class MatchReport:
    true_positives: int
    false_positives: int
    false_negatives: int
    match_pairs: list = field(default_factory=list)

    @property
    def precision(self) -> float:
        n = self.true_positives + self.false_positives
        return self.true_positives / n if n else 0.0

    @property
    def recall(self) -> float:
        n = self.true_positives + self.false_negatives
        return self.true_positives / n if n else 0.0

    def as_dict(self) -> dict:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "precision": self.precision,
            "recall": self.recall,
        }


def greedy_match(a, b, cutoff: float = MATCH_CUTOFF) -> list[tuple[int, int]]:
    """One-to-one pairs by ascending distance, pairs farther than ``cutoff`` excluded.

    Ties are broken by the index pair, so the result is deterministic.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return []
    dist = cKDTree(a).sparse_distance_matrix(cKDTree(b), cutoff, output_type="ndarray")
    rows = [(float(d), int(i), int(j)) for i, j, d in dist]
    rows.sort()
    used_a, used_b, pairs = set(), set(), []
    for d, i, j in rows:
        if d > cutoff or i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return pairs


def ca_precision_recall(detected, truth, cutoff: float = MATCH_CUTOFF) -> MatchReport:
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    detected = np.asarray(detected, dtype=np.float64).reshape(-1, 3)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    if len(truth) == 0:
        raise DataError("empty truth set; recall undefined")
    pairs = greedy_match(detected, truth, cutoff)
    tp = len(pairs)
    return MatchReport(tp, len(detected) - tp, len(truth) - tp, pairs)


def truth_residues(structure: Structure):
    """CA positions and one-letter types of every residue, chain by chain."""
    pos, types = [], []
    for res in structure.residues():
        pos.append(res.ca)
        types.append(res.aa)
    return np.array(pos, dtype=np.float64).reshape(-1, 3), "".join(types)


def aa_precision_at(positions, assigned: str, truth: Structure, cutoff: float = MATCH_CUTOFF) -> float:
    """Fraction of position-matched residues whose assigned type equals the true type."""
    tpos, ttypes = truth_residues(truth)
    pairs = greedy_match(positions, tpos, cutoff)
    if not pairs:
        raise DataError("no residues matched the truth structure")
    return sum(assigned[i] == ttypes[j] for i, j in pairs) / len(pairs)


def aa_precision(labeled, truth: Structure, cutoff: float = MATCH_CUTOFF) -> float:
    """AA-type precision of labeled fragments against ``truth``."""
    positions = np.concatenate([lf.fragment.positions for lf in labeled]) if labeled else np.zeros((0, 3))
    assigned = "".join(lf.aa_assignment for lf in labeled)
    return aa_precision_at(positions, assigned, truth, cutoff)


def rmsd(a, b) -> float:
    """Root-mean-square deviation without superposition."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) != len(b) or len(a) == 0:
        raise ValueError("rmsd needs two non-empty position sets of equal length")
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def kabsch(mobile, target, weights=None):
    """Least-squares rotation ``R`` and translation ``t`` with ``mobile @ R.T + t ~ target``."""
    p = np.asarray(mobile, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    w = np.ones(len(p)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    pc = w @ p
    qc = w @ q
    h = (p - pc).T @ ((q - qc) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ u.T
    return r, qc - pc @ r.T


def tm_d0(length: int) -> float:
    if length <= 15:
        return 0.5
    return max(0.5, 1.24 * (length - 15) ** (1.0 / 3.0) - 1.8)


def tm_sum(distances, d0: float, l_ref: int) -> float:
    d = np.asarray(distances, dtype=np.float64)
    return float(np.sum(1.0 / (1.0 + (d / d0) ** 2)) / l_ref)


def _paired_ca(model: Structure, reference: Structure):
    def table(s):
        return {(c.chain_id, r.index): r.ca for c in s.chains for r in c.residues if r.atom("CA") is not None}

    m, r = table(model), table(reference)
    keys = [k for k in r if k in m]
    if not keys:
        # Chain ids may differ between files; fall back to residue numbers alone.
        m1 = {k[1]: v for k, v in m.items()}
        r1 = {k[1]: v for k, v in r.items()}
        keys1 = [k for k in r1 if k in m1]
        return np.array([m1[k] for k in keys1]).reshape(-1, 3), np.array([r1[k] for k in keys1]).reshape(-1, 3), len(r)
    return np.array([m[k] for k in keys]), np.array([r[k] for k in keys]), len(r)


def tm_score_coords(model, reference, l_ref: int | None = None, max_iter: int = 20) -> float:
    """TM-score of paired coordinates, maximised over rigid superpositions.

    Seeds are contiguous windows of length L, L/2, L/4, ... (>= 4), each
    refined by iterating superposition on the pairs closer than the
    search cutoff until the inclusion set stops changing.
    """
    x = np.asarray(model, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    if n < 3:
        raise DataError("TM-score needs at least 3 common residues")
    l_ref = n if l_ref is None else l_ref
    d0 = tm_d0(l_ref)
    d_search = min(max(d0, 4.5), 8.0)
    best = 0.0

    def score(r, t):
        d = np.linalg.norm(x @ r.T + t - y, axis=1)
        return tm_sum(d, d0, l_ref), d

    seeds = []
    length = n
    while True:
        seeds.append(length)
        if length // 2 < 4:
            break
        length //= 2
    tried = set()
    for seed in seeds:
        step = max(1, seed // 2)
        starts = list(range(0, n - seed + 1, step))
        if starts[-1] != n - seed:
            starts.append(n - seed)
        for s0 in starts:
            sel = np.zeros(n, dtype=bool)
            sel[s0 : s0 + seed] = True
            for _ in range(max_iter):
                key = sel.tobytes()
                if key in tried:
                    break
                tried.add(key)
                r, t = kabsch(x[sel], y[sel])
                tm, d = score(r, t)
                best = max(best, tm)
                cut = d_search
                new = d < cut
                while new.sum() < 3 and cut < 1e3:
                    cut += 0.5
                    new = d < cut
                if np.array_equal(new, sel):
                    break
                sel = new
    return best


def tm_score(model: Structure, reference: Structure) -> float:
    """Cα TM-score of ``model`` against ``reference`` (length-normalised by the reference)."""
    x, y, l_ref = _paired_ca(model, reference)
    if l_ref < TM_MIN_LENGTH:
        raise DataError(f"reference has {l_ref} residues; TM-score d0 needs at least {TM_MIN_LENGTH}")
    if len(x) < 3:
        raise DataError("TM-score needs at least 3 common residues")
    return tm_score_coords(x, y, l_ref)
