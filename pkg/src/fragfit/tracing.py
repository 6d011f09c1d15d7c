"""CA tracing: candidates from feature grids, PPV-linked fragments, pruning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureGrids
from .structio import AA_ALPHABET, ca_structure, chain_ids, write_structure

MIN_LINK = 2.0
MAX_LINK = 4.5
SEARCH_CELLS = 3


@dataclass(frozen=True, eq=False)
class CaCandidate:
    cell_index: tuple[int, int, int]
    position: np.ndarray
    ppv: np.ndarray
    aa_dist: np.ndarray
    score: float

    @property
    def head(self) -> np.ndarray:
        """Predicted position of the next CA."""
        return self.position + self.ppv


@dataclass(eq=False)
class Fragment:
    residues: list[CaCandidate] = field(default_factory=list)

    def __len__(self):
        return len(self.residues)

    @property
    def positions(self) -> np.ndarray:
        return np.array([r.position for r in self.residues]).reshape(-1, 3)

    @property
    def aa_matrix(self) -> np.ndarray:
        return np.array([r.aa_dist for r in self.residues]).reshape(-1, 20)

    @property
    def cells(self) -> list[tuple[int, int, int]]:
        return [r.cell_index for r in self.residues]


def extract_candidates(grids: FeatureGrids, threshold: float = 0.5) -> list[CaCandidate]:
    """One candidate per coarse cell with probability >= ``threshold``, in index order."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"detection threshold must lie in (0, 1), got {threshold}")
    prob = np.asarray(grids.ca_prob.values)
    origin = np.asarray(grids.ca_prob.origin)
    cell = grids.grid.coarse_spacing
    out = []
    for ijk in np.argwhere(prob >= threshold):
        key = tuple(int(v) for v in ijk)
        pos = origin + cell * ijk + grids.ca_offset[key]
        out.append(
            CaCandidate(
                cell_index=key,
                position=pos.astype(np.float64),
                ppv=np.asarray(grids.ppv[key], dtype=np.float64),
                aa_dist=np.asarray(grids.aa_dist[key], dtype=np.float64),
                score=float(prob[key]),
            )
        )
    return out


def link_residual(q: CaCandidate, p: CaCandidate) -> float:
    d = q.head - p.position
    return float(d @ d)


def candidate_edges(candidates: list[CaCandidate], epsilon_sq: float, cell: float = 2.0):
    """All admissible links ``(residual, q, p)`` using a cell hash.

    A link needs the squared residual within ``epsilon_sq`` and a CA-CA
    distance in (2.0, 4.5) Å. Only cells within Chebyshev distance 3 of
    the cell holding ``q``'s predicted successor position are searched.
    """
    by_cell: dict[tuple, list[int]] = {}
    bucket = np.array([np.floor(c.position / cell).astype(int) for c in candidates]).reshape(-1, 3)
    for n, b in enumerate(bucket):
        by_cell.setdefault(tuple(int(v) for v in b), []).append(n)
    span = range(-SEARCH_CELLS, SEARCH_CELLS + 1)
    edges = []
    for qi, q in enumerate(candidates):
        hb = np.floor(q.head / cell).astype(int)
        for dx in span:
            for dy in span:
                for dz in span:
                    for pi in by_cell.get((hb[0] + dx, hb[1] + dy, hb[2] + dz), ()):
                        if pi == qi:
                            continue
                        p = candidates[pi]
                        r = link_residual(q, p)
                        if r > epsilon_sq:
                            continue
                        dist = float(np.linalg.norm(p.position - q.position))
                        if MIN_LINK < dist < MAX_LINK:
                            edges.append((r, qi, pi))
    return edges


def trace_fragments(candidates: list[CaCandidate], epsilon_sq: float = 1.0) -> list[Fragment]:
    """Connect candidates into fragments with mutual-best PPV links.

    Each candidate keeps its lowest-residual successor; each candidate
    then keeps only the best of the predecessors that chose it. Ties fall
    to the smaller residual, then the lexicographically smaller cell
    index. Cycles are opened at their largest-residual link. Fragments are
    returned ordered by the cell index of their first residue.
    """
    if epsilon_sq <= 0:
        raise ValueError("epsilon_sq must be positive")
    order = sorted(range(len(candidates)), key=lambda n: candidates[n].cell_index)
    cands = [candidates[n] for n in order]
    cells = [c.cell_index for c in cands]
    edges = candidate_edges(cands, epsilon_sq)

    best_succ: dict[int, tuple] = {}
    for r, q, p in edges:
        key = (r, cells[p])
        if q not in best_succ or key < best_succ[q][0]:
            best_succ[q] = (key, p, r)
    best_pred: dict[int, tuple] = {}
    for q, (_, p, r) in best_succ.items():
        key = (r, cells[q])
        if p not in best_pred or key < best_pred[p][0]:
            best_pred[p] = (key, q, r)

    succ = {q: p for p, (_, q, _) in best_pred.items()}
    pred = {p: q for q, p in succ.items()}
    resid = {q: best_pred[p][2] for q, p in succ.items()}

    fragments = []
    seen = set()
    for start in range(len(cands)):
        if start in pred or start in seen:
            continue
        chain = [start]
        seen.add(start)
        while chain[-1] in succ:
            nxt = succ[chain[-1]]
            chain.append(nxt)
            seen.add(nxt)
        fragments.append(chain)

    # Whatever is left lies on cycles.
    for start in range(len(cands)):
        if start in seen:
            continue
        cycle = [start]
        while succ[cycle[-1]] != start:
            cycle.append(succ[cycle[-1]])
        # Open the cycle at its worst link q -> succ[q].
        worst = max(cycle, key=lambda q: (resid[q], cells[q]))
        k = cycle.index(worst)
        opened = cycle[k + 1 :] + cycle[: k + 1]
        seen.update(opened)
        fragments.append(opened)

    result = [Fragment([cands[n] for n in chain]) for chain in fragments]
    result.sort(key=lambda f: f.residues[0].cell_index)
    return result


def prune_fragments(fragments: list[Fragment], min_len: int = 3) -> list[Fragment]:
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    return [f for f in fragments if len(f) >= min_len]


def fragments_to_structure(fragments: list[Fragment], residue_names: list[str] | None = None):
    """CA-only structure, one chain per fragment; unlabeled residues become GLY."""
    ids = chain_ids(len(fragments))
    chains = {}
    for n, (cid, frag) in enumerate(zip(ids, fragments)):
        seq = residue_names[n] if residue_names else "G" * len(frag)
        chains[cid] = (frag.positions, seq, list(range(1, len(frag) + 1)))
    return ca_structure(chains)


def fragments_to_json(fragments: list[Fragment]) -> dict:
    ids = chain_ids(len(fragments))
    return {
        "aa_order": AA_ALPHABET,
        "fragments": [
            {
                "chain_id": cid,
                "length": len(frag),
                "residues": [
                    {
                        "cell_index": list(r.cell_index),
                        "position": [float(v) for v in r.position],
                        "ppv": [float(v) for v in r.ppv],
                        "score": float(r.score),
                        "aa_dist": [float(v) for v in r.aa_dist],
                    }
                    for r in frag.residues
                ],
            }
            for cid, frag in zip(ids, fragments)
        ],
    }


def fragments_from_json(doc: dict) -> list[Fragment]:
    if doc.get("aa_order", AA_ALPHABET) != AA_ALPHABET:
        raise DataError("fragment sidecar uses an unsupported AA order")
    out = []
    for f in doc["fragments"]:
        out.append(
            Fragment(
                [
                    CaCandidate(
                        cell_index=tuple(r["cell_index"]),
                        position=np.array(r["position"], dtype=np.float64),
                        ppv=np.array(r["ppv"], dtype=np.float64),
                        aa_dist=np.array(r["aa_dist"], dtype=np.float64),
                        score=float(r["score"]),
                    )
                    for r in f["residues"]
                ]
            )
        )
    return out


def save_fragments(fragments: list[Fragment], pdb_path, json_path) -> None:
    if fragments:
        Path(pdb_path).write_text(write_structure(fragments_to_structure(fragments)))
    else:
        Path(pdb_path).write_text("END\n")
    Path(json_path).write_text(json.dumps(fragments_to_json(fragments), indent=1) + "\n")


def load_fragments(json_path) -> list[Fragment]:
    return fragments_from_json(json.loads(Path(json_path).read_text()))
