"""Atomic structures (PDB ATOM subset) and protein sequences (FASTA)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

AA_ALPHABET = "ARNDCQEGHILKMFPSTWYV"
AA_INDEX = {aa: i for i, aa in enumerate(AA_ALPHABET)}

ONE_TO_THREE = {
    "A": "ALA", "R": "ARG", "N": "ASN", "D": "ASP", "C": "CYS",
    "Q": "GLN", "E": "GLU", "G": "GLY", "H": "HIS", "I": "ILE",
    "L": "LEU", "K": "LYS", "M": "MET", "F": "PHE", "P": "PRO",
    "S": "SER", "T": "THR", "W": "TRP", "Y": "TYR", "V": "VAL",
}
THREE_TO_ONE = {v: k for k, v in ONE_TO_THREE.items()}
# Single non-canonical substitution; anything else is skipped.
NONCANONICAL = {"MSE": "M"}

BACKBONE_ATOMS = ("N", "CA", "C", "O")
MAX_COORD = 10000.0


@dataclass
class Atom:
    name: str
    element: str
    position: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)


@dataclass
class Residue:
    index: int
    aa: str
    atoms: list[Atom] = field(default_factory=list)

    def atom(self, name: str) -> Atom | None:
        for a in self.atoms:
            if a.name == name:
                return a
        return None

    @property
    def ca(self) -> np.ndarray:
        a = self.atom("CA")
        if a is None:
            raise DataError(f"residue {self.aa}{self.index} has no CA atom")
        return a.position


@dataclass
class Chain:
    chain_id: str
    residues: list[Residue] = field(default_factory=list)

    def ca_coords(self) -> np.ndarray:
        return np.array([r.ca for r in self.residues], dtype=np.float64).reshape(-1, 3)

    @property
    def sequence(self) -> str:
        return "".join(r.aa for r in self.residues)


@dataclass
class Structure:
    chains: list[Chain] = field(default_factory=list)

    def chain(self, chain_id: str) -> Chain:
        for c in self.chains:
            if c.chain_id == chain_id:
                return c
        raise DataError(f"no chain {chain_id!r}; have {[c.chain_id for c in self.chains]}")

    def residues(self):
        for c in self.chains:
            yield from c.residues

    def atoms(self):
        for r in self.residues():
            yield from r.atoms

    def atom_positions(self, names=None) -> np.ndarray:
        pos = [a.position for a in self.atoms() if names is None or a.name in names]
        return np.array(pos, dtype=np.float64).reshape(-1, 3)

    def ca_coords(self) -> np.ndarray:
        return np.concatenate([c.ca_coords() for c in self.chains]) if self.chains else np.zeros((0, 3))

    def validate(self) -> None:
        for c in self.chains:
            idx = [r.index for r in c.residues]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise DataError(f"chain {c.chain_id}: residue indices not strictly increasing")
            for r in c.residues:
                for a in r.atoms:
                    if not np.all(np.isfinite(a.position)):
                        raise DataError(f"non-finite coordinate in {c.chain_id}:{r.index}")


@dataclass(frozen=True)
class Sequence:
    residues: str

    def __post_init__(self):
        if len(self.residues) < 1:
            raise DataError("empty sequence")
        bad = sorted(set(self.residues) - set(AA_ALPHABET))
        if bad:
            raise DataError(f"illegal sequence characters: {''.join(bad)}")

    def __len__(self):
        return len(self.residues)

    @property
    def indices(self) -> np.ndarray:
        return np.array([AA_INDEX[a] for a in self.residues], dtype=np.intp)

    def one_hot(self) -> np.ndarray:
        """L x 20 one-hot matrix, one 1 per row."""
        out = np.zeros((len(self), 20))
        out[np.arange(len(self)), self.indices] = 1.0
        return out


def _field(line: str, lo: int, hi: int, what: str, conv, lineno: int):
    try:
        return conv(line[lo:hi])
    except ValueError:
        raise DataError(f"line {lineno}: malformed {what} field {line[lo:hi]!r}") from None


def parse_structure(text: str) -> Structure:
    """Parse PDB ATOM records into a :class:`Structure`.

    HETATM records are ignored, alternate locations other than blank/'A'
    dropped, and unknown residue names skipped with a warning. The chain
    identifier is read from columns 21-22 so two-letter IDs survive a
    round trip.
    """
    chains: dict[str, Chain] = {}
    current: dict[str, Residue] = {}
    n_atoms = 0
    skipped = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.startswith("ATOM  "):
            continue
        line = line.ljust(80)
        altloc = line[16]
        if altloc not in (" ", "A"):
            continue
        name = line[12:16].strip()
        resname = line[17:20].strip()
        chain_id = line[20:22].strip()
        resseq = _field(line, 22, 26, "resSeq", int, lineno)
        if line[26] != " ":
            raise DataError(f"line {lineno}: insertion codes are not supported")
        xyz = [
            _field(line, 30, 38, "x", float, lineno),
            _field(line, 38, 46, "y", float, lineno),
            _field(line, 46, 54, "z", float, lineno),
        ]
        element = line[76:78].strip() or name[:1]
        aa = THREE_TO_ONE.get(resname) or NONCANONICAL.get(resname)
        if aa is None:
            if resname not in skipped:
                log.warning("skipping unknown residue %s (line %d)", resname, lineno)
                skipped.add(resname)
            continue
        chain = chains.setdefault(chain_id, Chain(chain_id))
        res = current.get(chain_id)
        if res is None or res.index != resseq:
            res = Residue(resseq, aa)
            chain.residues.append(res)
            current[chain_id] = res
        res.atoms.append(Atom(name, element, np.array(xyz)))
        n_atoms += 1
    if n_atoms == 0:
        raise DataError("no ATOM records found")
    structure = Structure(list(chains.values()))
    structure.validate()
    return structure


def _atom_name_field(name: str, element: str) -> str:
    if len(name) >= 4 or len(element) == 2:
        return f"{name:<4}"[:4]
    return f" {name:<3}"


def write_structure(structure: Structure) -> str:
    """Fixed-column ATOM records, a TER after each chain and a closing END."""
    if not structure.chains:
        raise DataError("structure has no chains")
    lines = []
    serial = 1
    for chain in structure.chains:
        if not chain.residues:
            raise DataError(f"chain {chain.chain_id!r} is empty")
        if len(chain.chain_id) > 2:
            raise DataError(f"chain id {chain.chain_id!r} longer than two characters")
        last = None
        for res in chain.residues:
            resname = ONE_TO_THREE[res.aa]
            for atom in res.atoms:
                x, y, z = atom.position
                if max(abs(x), abs(y), abs(z)) >= MAX_COORD:
                    raise DataError(f"coordinate out of PDB range in {chain.chain_id}:{res.index}")
                lines.append(
                    f"ATOM  {serial % 100000:5d} {_atom_name_field(atom.name, atom.element)} "
                    f"{resname:>3}{chain.chain_id:>2}{res.index:4d}    "
                    f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {atom.element:>2}"
                )
                serial += 1
            last = res
        lines.append(f"TER   {serial % 100000:5d}      {ONE_TO_THREE[last.aa]:>3}{chain.chain_id:>2}{last.index:4d}")
        serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"


def parse_fasta(text: str) -> Sequence:
    """First FASTA record as a :class:`Sequence` (whitespace stripped, upper-cased)."""
    lines = text.splitlines()
    body = []
    seen_header = False
    for line in lines:
        if line.startswith(">"):
            if seen_header:
                break
            seen_header = True
            continue
        if line.startswith(";"):
            continue
        body.append("".join(line.split()))
    seq = "".join(body).upper()
    if not seq:
        raise DataError("FASTA record has an empty body")
    return Sequence(seq)


def read_structure(path) -> Structure:
    with open(path) as fh:
        return parse_structure(fh.read())


def save_structure(structure: Structure, path) -> None:
    with open(path, "w") as fh:
        fh.write(write_structure(structure))


def read_fasta(path) -> Sequence:
    with open(path) as fh:
        return parse_fasta(fh.read())


def ca_structure(chains: dict[str, tuple[np.ndarray, str, list[int]]]) -> Structure:
    """Build a CA-only structure from ``{chain_id: (coords, sequence, residue_numbers)}``."""
    out = []
    for cid, (coords, seq, numbers) in chains.items():
        residues = [
            Residue(int(n), aa, [Atom("CA", "C", xyz)]) for xyz, aa, n in zip(np.asarray(coords), seq, numbers)
        ]
        out.append(Chain(cid, residues))
    return Structure(out)


def chain_ids(n: int) -> list[str]:
    """A..Z then AA..ZZ."""
    letters = [chr(ord("A") + i) for i in range(26)]
    ids = letters + [a + b for a in letters for b in letters]
    if n > len(ids):
        raise DataError(f"too many chains ({n}) for two-character chain ids")
    return ids[:n]
