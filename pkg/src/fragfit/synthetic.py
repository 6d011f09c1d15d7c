"""Synthetic proteins for tests, ablations and demos.

Chains are grown one CA at a time from virtual bond/dihedral angles
drawn per secondary-structure type (helix, strand, loop), rejecting
placements closer than ``min_sep`` Å to any earlier non-adjacent CA.
Backbone N, C and O atoms are placed approximately from the CA trace;
they only feed the backbone label, so exact stereochemistry is moot.
"""

from __future__ import annotations

import numpy as np

from .structio import AA_ALPHABET, Atom, Chain, Residue, Sequence, Structure

CA_BOND = 3.8

# (virtual bond angle, virtual dihedral) in degrees, with spread
_SS_PARAMS = {
    "H": ((91.0, 4.0), (50.0, 6.0)),
    "E": ((120.0, 6.0), (-170.0, 10.0)),
    "L": ((105.0, 15.0), (None, None)),
}


def _place(a, b, c, bond, angle, dihedral):
    """NeRF placement of a point after ``c`` given the previous three."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array(
        [-bond * np.cos(angle), bond * np.sin(angle) * np.cos(dihedral), bond * np.sin(angle) * np.sin(dihedral)]
    )
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def _ss_plan(n: int, rng: np.random.Generator) -> str:
    plan = []
    while len(plan) < n:
        kind = rng.choice(["H", "E", "L"], p=[0.45, 0.25, 0.30])
        length = {"H": rng.integers(8, 18), "E": rng.integers(4, 9), "L": rng.integers(2, 6)}[kind]
        plan.extend(kind * int(length))
    return "".join(plan[:n])


def random_ca_trace(n: int, rng: np.random.Generator, min_sep: float = 4.2, max_tries: int = 200) -> np.ndarray:
    """Self-avoiding CA trace of ``n`` residues with 3.8 Å virtual bonds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    for _ in range(max_tries):
        plan = _ss_plan(n, rng)
        pts = [np.zeros(3), np.array([CA_BOND, 0.0, 0.0])]
        theta = np.deg2rad(rng.uniform(85, 130))
        pts.append(pts[1] + CA_BOND * np.array([-np.cos(theta), np.sin(theta), 0.0]))
        ok = True
        while len(pts) < n and ok:
            i = len(pts)
            (am, asd), (dm, dsd) = _SS_PARAMS[plan[i]]
            placed = False
            for _ in range(60):
                angle = np.deg2rad(rng.normal(am, asd))
                angle = np.clip(angle, np.deg2rad(80), np.deg2rad(150))
                dih = rng.uniform(-np.pi, np.pi) if dm is None else np.deg2rad(rng.normal(dm, dsd))
                cand = _place(pts[-3], pts[-2], pts[-1], CA_BOND, angle, dih)
                prev = np.array(pts[:-1])
                if np.min(np.linalg.norm(prev - cand, axis=1)) >= min_sep:
                    pts.append(cand)
                    placed = True
                    break
            ok = placed
        if ok:
            trace = np.array(pts[:n])
            return trace - trace.mean(axis=0)
    raise RuntimeError(f"could not grow a self-avoiding chain of {n} residues")


def backbone_atoms(ca: np.ndarray) -> list[dict]:
    """Approximate N, C, O positions around each CA."""
    n = len(ca)
    out = []
    for i in range(n):
        fwd = ca[i + 1] - ca[i] if i + 1 < n else ca[i] - ca[i - 1] if n > 1 else np.array([CA_BOND, 0, 0])
        bwd = ca[i] - ca[i - 1] if i > 0 else fwd
        fwd_u = fwd / np.linalg.norm(fwd)
        bwd_u = bwd / np.linalg.norm(bwd)
        side = np.cross(bwd_u, fwd_u)
        if np.linalg.norm(side) < 1e-6:
            side = np.cross(fwd_u, [0.0, 0.0, 1.0])
            if np.linalg.norm(side) < 1e-6:
                side = np.cross(fwd_u, [0.0, 1.0, 0.0])
        side /= np.linalg.norm(side)
        c = ca[i] + 1.52 * (0.85 * fwd_u + 0.53 * side)
        nn = ca[i] - 1.46 * (0.85 * bwd_u - 0.53 * side)
        o = c + 1.23 * side
        out.append({"N": nn, "CA": ca[i], "C": c, "O": o})
    return out


def random_sequence(n: int, rng: np.random.Generator) -> str:
    return "".join(rng.choice(list(AA_ALPHABET), size=n))


def make_structure(ca: np.ndarray, sequence: str, chain_id: str = "A", first_index: int = 1, full_backbone=True):
    residues = []
    atoms = backbone_atoms(ca) if full_backbone else [{"CA": p} for p in ca]
    for k, (aa, group) in enumerate(zip(sequence, atoms)):
        elements = {"N": "N", "CA": "C", "C": "C", "O": "O"}
        residues.append(Residue(first_index + k, aa, [Atom(nm, elements[nm], xyz) for nm, xyz in group.items()]))
    return Structure([Chain(chain_id, residues)])


def synthetic_target(n: int, seed: int, tail: int = 15, chain_id: str = "A"):
    """A modeled chain plus its full sequence.

    The sequence carries ``tail`` extra residues on each end that are
    absent from the model, as for disordered termini. Returns
    ``(structure, sequence)`` with author numbering matching 1-based
    sequence positions.
    """
    rng = np.random.default_rng(seed)
    ca = random_ca_trace(n, rng)
    full = random_sequence(n + 2 * tail, rng)
    structure = make_structure(ca, full[tail : tail + n], chain_id, first_index=tail + 1)
    return structure, Sequence(full)


def smooth_perturbation(ca: np.ndarray, target_rmsd: float, rng: np.random.Generator, n_modes: int = 3) -> np.ndarray:
    """Low-frequency displacement field scaled to ``target_rmsd``.

    Neighbouring residues move together, mimicking a conformational
    change rather than random jitter.
    """
    ca = np.asarray(ca, dtype=np.float64)
    disp = np.zeros_like(ca)
    span = np.ptp(ca, axis=0).max() + 1e-9
    for _ in range(n_modes):
        k = rng.normal(size=3)
        k *= 2 * np.pi / span * rng.uniform(0.5, 1.5) / np.linalg.norm(k)
        amp = rng.normal(size=3)
        phase = rng.uniform(0, 2 * np.pi)
        disp += np.sin(ca @ k + phase)[:, None] * amp
    disp += rng.normal(size=3)  # global shift
    cur = np.sqrt(np.mean(np.sum(disp ** 2, axis=1)))
    return ca + disp * (target_rmsd / cur)


def with_ca(structure: Structure, new_ca: np.ndarray) -> Structure:
    """Copy of ``structure`` with each residue translated so its CA lands on ``new_ca``."""
    chains = []
    k = 0
    for c in structure.chains:
        residues = []
        for r in c.residues:
            shift = new_ca[k] - r.ca
            residues.append(Residue(r.index, r.aa, [Atom(a.name, a.element, a.position + shift) for a in r.atoms]))
            k += 1
        chains.append(Chain(c.chain_id, residues))
    return Structure(chains)


def parallel_chains(n: int, separation: float = 10.0):
    """Two straight-ish zig-zag chains ``separation`` Å apart along z."""
    x = np.arange(n) * 3.3
    y = np.where(np.arange(n) % 2 == 0, 0.0, 1.9)
    a = np.stack([x, y, np.zeros(n)], axis=1)
    b = a + np.array([0.0, 0.0, separation])
    return a, b



def ideal_helix(n: int, radius: float = 2.3, turn_deg: float = 100.0) -> np.ndarray:
    """CA positions of an ideal alpha helix with exactly 3.8 Å virtual bonds."""
    turn = np.deg2rad(turn_deg)
    chord = 2.0 * radius * np.sin(turn / 2.0)
    rise = np.sqrt(CA_BOND ** 2 - chord ** 2)
    k = np.arange(n)
    ca = np.stack([radius * np.cos(k * turn), radius * np.sin(k * turn), rise * k], axis=1)
    return ca - ca.mean(axis=0)
