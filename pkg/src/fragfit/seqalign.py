"""Windowed alignment of fragment AA profiles against target sequences."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .structio import Sequence, ca_structure, chain_ids, write_structure
from .tracing import Fragment

PROB_FLOOR = 1e-9
STD_EPS = 1e-6
DEFAULT_CONFIDENCE = 3.4


def alignment_scores(profile, sequence: Sequence) -> np.ndarray:
    """Mean log-probability of each length-N window of ``sequence``.

    ``profile`` is a :class:`Fragment` or an ``(N, 20)`` probability
    matrix. Entry ``i`` scores the sequence slice ``[i, i + N)``.
    """
    p = profile.aa_matrix if isinstance(profile, Fragment) else np.asarray(profile, dtype=np.float64)
    n = len(p)
    length = len(sequence)
    if n < 1:
        raise ValueError("empty fragment")
    if n > length:
        raise ValueError(f"fragment length {n} exceeds sequence length {length}")
    logp = np.log(np.maximum(p, PROB_FLOOR))
    # gathered[k, j] = log P(residue k is the type of sequence position j)
    gathered = logp[:, sequence.indices]
    windows = length - n + 1
    s = np.zeros(windows)
    for k in range(n):
        s += gathered[k, k : k + windows]
    return s / n


def confidence(s) -> float:
    """(max - mean) / (population std + 1e-6)."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty score vector")
    return float((s.max() - s.mean()) / (s.std() + STD_EPS))


@dataclass(eq=False)
class LabeledFragment:
    fragment: Fragment
    chain_index: int
    start_index: int
    aa_assignment: str
    confidence: float
    all_scores: np.ndarray
    ambiguous: bool = False
    residue_offset: int = 1

    def __len__(self):
        return len(self.fragment)

    @property
    def end_index(self) -> int:
        return self.start_index + len(self.fragment)

    @property
    def author_indices(self) -> list[int]:
        """Author residue numbers, assuming the sequence is numbered from ``residue_offset``."""
        return [self.start_index + k + self.residue_offset for k in range(len(self.fragment))]


@dataclass(eq=False)
class Rejected:
    fragment: Fragment
    reason: str
    confidence: float = float("nan")
    start_index: int | None = None
    chain_index: int | None = None


@dataclass
class _Scored:
    scores: list[np.ndarray]
    chain_index: int
    start_index: int
    confidence: float
    ambiguous: bool
    best: float = field(default=0.0)


def _score_fragment(fragment: Fragment, sequences: list[Sequence]) -> _Scored | None:
    per_chain = []
    for seq in sequences:
        per_chain.append(alignment_scores(fragment, seq) if len(fragment) <= len(seq) else np.zeros(0))
    flat = np.concatenate(per_chain)
    if flat.size == 0:
        return None
    best = flat.max()
    hits = np.flatnonzero(flat == best)
    pos = int(hits[0])
    chain = 0
    while pos >= len(per_chain[chain]):
        pos -= len(per_chain[chain])
        chain += 1
    return _Scored(per_chain, chain, pos, confidence(flat), len(hits) > 1, float(best))


def _as_list(sequences) -> list[Sequence]:
    return [sequences] if isinstance(sequences, Sequence) else list(sequences)


def label_fragment(
    fragment: Fragment,
    sequence,
    conf_threshold: float = DEFAULT_CONFIDENCE,
    assigned: dict[int, np.ndarray] | None = None,
    residue_offset: int = 1,
):
    """Label one fragment with its best window, or return :class:`Rejected`.

    ``assigned`` maps chain index to a boolean occupancy mask over sequence
    positions already claimed by higher-confidence fragments.
    """
    if len(fragment) < 1:
        raise ValueError("empty fragment")
    seqs = _as_list(sequence)
    scored = _score_fragment(fragment, seqs)
    if scored is None:
        return Rejected(fragment, "longer than every sequence")
    return _decide(fragment, seqs, scored, conf_threshold, assigned, residue_offset)


def _decide(fragment, seqs, scored: _Scored, conf_threshold, assigned, residue_offset):
    c, i, n = scored.chain_index, scored.start_index, len(fragment)
    if scored.confidence < conf_threshold:
        return Rejected(fragment, "low confidence", scored.confidence, i, c)
    if assigned is not None and c in assigned and assigned[c][i : i + n].any():
        return Rejected(fragment, "window already claimed", scored.confidence, i, c)
    all_scores = np.concatenate(scored.scores) if len(seqs) > 1 else scored.scores[0]
    return LabeledFragment(
        fragment=fragment,
        chain_index=c,
        start_index=i,
        aa_assignment=seqs[c].residues[i : i + n],
        confidence=scored.confidence,
        all_scores=all_scores,
        ambiguous=scored.ambiguous,
        residue_offset=residue_offset,
    )


def label_fragments(
    fragments: list[Fragment],
    sequences,
    conf_threshold: float = DEFAULT_CONFIDENCE,
    residue_offset: int = 1,
    threads: int = 1,
):
    """Greedy labeling in descending confidence with non-overlapping windows.

    Returns ``(accepted, rejected)``; accepted fragments are sorted by
    descending confidence (ties by input order).
    """
    seqs = _as_list(sequences)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scored = list(pool.map(lambda f: _score_fragment(f, seqs), fragments))
    else:
        scored = [_score_fragment(f, seqs) for f in fragments]

    order = sorted(
        range(len(fragments)),
        key=lambda n: (-(scored[n].confidence if scored[n] is not None else -np.inf), n),
    )
    assigned = {c: np.zeros(len(s), dtype=bool) for c, s in enumerate(seqs)}
    accepted, rejected = [], []
    for n in order:
        frag = fragments[n]
        if scored[n] is None:
            rejected.append(Rejected(frag, "longer than every sequence"))
            continue
        out = _decide(frag, seqs, scored[n], conf_threshold, assigned, residue_offset)
        if isinstance(out, LabeledFragment):
            assigned[out.chain_index][out.start_index : out.end_index] = True
            accepted.append(out)
        else:
            rejected.append(out)
    return accepted, rejected


def argmax_assignment(fragment: Fragment, sequence: Sequence) -> tuple[int, str]:
    """Best window without any confidence gating: ``(start_index, assigned types)``."""
    s = alignment_scores(fragment, sequence)
    i = int(np.argmax(s))
    return i, sequence.residues[i : i + len(fragment)]


def labeled_to_structure(labeled: list[LabeledFragment]):
    ids = chain_ids(len(labeled))
    chains = {
        cid: (lf.fragment.positions, lf.aa_assignment, lf.author_indices) for cid, lf in zip(ids, labeled)
    }
    return ca_structure(chains)


def labeled_report(accepted: list[LabeledFragment], rejected: list[Rejected]) -> dict:
    ids = chain_ids(len(accepted))
    rows = []
    for cid, lf in zip(ids, accepted):
        s = lf.all_scores
        rows.append(
            {
                "chain_id": cid,
                "sequence_chain": lf.chain_index,
                "start_index": lf.start_index,
                "author_indices": lf.author_indices,
                "length": len(lf),
                "aa_assignment": lf.aa_assignment,
                "confidence": lf.confidence,
                "ambiguous": lf.ambiguous,
                "score_summary": {
                    "max": float(s.max()),
                    "mean": float(s.mean()),
                    "std": float(s.std()),
                    "windows": int(s.size),
                },
                "positions": [[float(v) for v in p] for p in lf.fragment.positions],
            }
        )
    return {
        "accepted": rows,
        "rejected": [
            {
                "length": len(r.fragment),
                "reason": r.reason,
                "confidence": None if np.isnan(r.confidence) else r.confidence,
                "start_index": r.start_index,
            }
            for r in rejected
        ],
    }


def save_labeled(accepted, rejected, pdb_path, json_path) -> None:
    if accepted:
        Path(pdb_path).write_text(write_structure(labeled_to_structure(accepted)))
    else:
        Path(pdb_path).write_text("END\n")
    Path(json_path).write_text(json.dumps(labeled_report(accepted, rejected), indent=1) + "\n")


@dataclass(frozen=True)
class FragmentTarget:
    """What fitting needs from a labeled fragment: author numbers and target CA positions."""

    chain_index: int
    author_indices: tuple[int, ...]
    positions: np.ndarray
    confidence: float


def load_targets(json_path) -> list[FragmentTarget]:
    doc = json.loads(Path(json_path).read_text())
    if "accepted" not in doc:
        raise DataError(f"{json_path} is not a labeled-fragment report")
    return [
        FragmentTarget(
            row["sequence_chain"],
            tuple(row["author_indices"]),
            np.array(row["positions"], dtype=np.float64).reshape(-1, 3),
            row["confidence"],
        )
        for row in doc["accepted"]
    ]


def targets_from_labeled(labeled: list[LabeledFragment]) -> list[FragmentTarget]:
    return [
        FragmentTarget(lf.chain_index, tuple(lf.author_indices), lf.fragment.positions, lf.confidence)
        for lf in labeled
    ]
