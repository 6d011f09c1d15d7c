from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragfit.errors import DataError
from fragfit.structio import (
    AA_ALPHABET,
    Atom,
    Chain,
    Residue,
    Sequence,
    Structure,
    ca_structure,
    chain_ids,
    parse_fasta,
    parse_structure,
    write_structure,
)
from fragfit.synthetic import ideal_helix, make_structure

FIXTURES = Path(__file__).parent / "fixtures"


def atom_line(serial, name, resname, chain, resseq, xyz, altloc=" ", record="ATOM  ", icode=" ", element="C"):
    x, y, z = xyz
    return (
        f"{record}{serial:5d} {name:<4}{altloc}{resname:>3} {chain}{resseq:4d}{icode}   "
        f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00          {element:>2}"
    )


def test_single_ca_record():
    s = parse_structure(atom_line(1, " CA", "ALA", "A", 1, (1.0, 2.0, 3.0)))
    assert len(s.chains) == 1
    assert len(s.chains[0].residues) == 1
    res = s.chains[0].residues[0]
    assert res.aa == "A" and res.index == 1 and len(res.atoms) == 1
    assert np.allclose(res.ca, [1.0, 2.0, 3.0])


def test_two_chains_match_line_count_oracle(rng):
    lines = []
    serial = 1
    for chain, n in (("A", 7), ("B", 4)):
        for i in range(n):
            for name in (" N", " CA", " C"):
                lines.append(atom_line(serial, name, "GLY", chain, 10 + i, rng.normal(size=3) * 10))
                serial += 1
        lines.append("TER")
    text = "\n".join(lines) + "\nEND\n"
    expected = {}
    for line in text.splitlines():
        if line.startswith("ATOM"):
            expected.setdefault(line[21], set()).add(int(line[22:26]))
    s = parse_structure(text)
    assert [c.chain_id for c in s.chains] == ["A", "B"]
    assert {c.chain_id: len(c.residues) for c in s.chains} == {k: len(v) for k, v in expected.items()}


def test_hetatm_altloc_and_noncanonical():
    text = "\n".join(
        [
            atom_line(1, " CA", "ALA", "A", 1, (0, 0, 0)),
            atom_line(2, " CA", "ALA", "A", 2, (3.8, 0, 0), altloc="A"),
            atom_line(3, " CA", "ALA", "A", 2, (9.9, 9, 9), altloc="B"),
            atom_line(4, " CA", "MSE", "A", 3, (7.6, 0, 0)),
            atom_line(5, "O", "HOH", "A", 4, (1, 1, 1), record="HETATM", element="O"),
        ]
    )
    s = parse_structure(text)
    res = s.chains[0].residues
    assert [r.aa for r in res] == ["A", "A", "M"]
    assert np.allclose(res[1].ca, [3.8, 0, 0])


def test_unknown_residue_is_skipped(caplog):
    text = "\n".join([atom_line(1, " CA", "XYZ", "A", 1, (0, 0, 0)), atom_line(2, " CA", "GLY", "A", 2, (3.8, 0, 0))])
    s = parse_structure(text)
    assert [r.index for r in s.residues()] == [2]
    assert "XYZ" in caplog.text


@pytest.mark.parametrize(
    "text, message",
    [
        ("REMARK nothing here\n", "no ATOM"),
        (atom_line(1, " CA", "ALA", "A", 1, (0, 0, 0), icode="B"), "insertion"),
        ("ATOM      1  CA  ALA A   1    xxxxxxxx   2.000   3.000", "malformed"),
    ],
)
def test_parse_errors(text, message):
    with pytest.raises(DataError, match=message):
        parse_structure(text)


def test_write_errors():
    with pytest.raises(DataError):
        write_structure(Structure([Chain("A", [])]))
    with pytest.raises(DataError):
        write_structure(Structure([]))
    far = Structure([Chain("A", [Residue(1, "G", [Atom("CA", "C", [10000.0, 0, 0])])])])
    with pytest.raises(DataError, match="range"):
        write_structure(far)


def test_write_format_columns():
    s = ca_structure({"A": (np.array([[1.0, -2.5, 30.125]]), "W", [42])})
    text = write_structure(s)
    line = text.splitlines()[0]
    assert line[0:6] == "ATOM  " and line[12:16] == " CA " and line[17:20] == "TRP"
    assert line[21] == "A" and int(line[22:26]) == 42
    assert float(line[30:38]) == 1.0 and float(line[38:46]) == -2.5 and float(line[46:54]) == 30.125
    assert text.splitlines()[1].startswith("TER") and text.splitlines()[-1] == "END"


def test_helix_golden_file():
    ca = ideal_helix(3)
    s = make_structure(ca, "ACD", first_index=1)
    golden = (FIXTURES / "helix3.pdb").read_text()
    assert write_structure(s) == golden
    assert write_structure(parse_structure(golden)) == golden


coords = st.lists(
    st.tuples(*[st.floats(-999.0, 9999.0, allow_nan=False)] * 3), min_size=1, max_size=12
)


@given(coords, st.text(alphabet=AA_ALPHABET, min_size=12, max_size=12), st.sampled_from(["A", "Z", "AB", "ZZ"]))
@settings(max_examples=60, deadline=None)
def test_round_trip_preserves_coordinates_to_format_precision(xyz, seq, cid):
    pos = np.array(xyz)
    s = ca_structure({cid: (pos, seq[: len(pos)], list(range(-2, -2 + len(pos))))})
    back = parse_structure(write_structure(s))
    assert [c.chain_id for c in back.chains] == [cid]
    assert back.chains[0].sequence == seq[: len(pos)]
    assert [r.index for r in back.residues()] == list(range(-2, -2 + len(pos)))
    assert np.max(np.abs(back.ca_coords() - pos)) <= 5e-4 + 1e-9
    # Once at format precision, the text is a fixed point.
    assert write_structure(back) == write_structure(parse_structure(write_structure(back)))


def test_fasta_examples():
    assert parse_fasta(">x\nACD").residues == "ACD"
    assert len(parse_fasta(">x\nACD")) == 3
    assert parse_fasta(">x\nacd") == parse_fasta(">x\nACD")
    body = "A" * 60 + "\n" + "C" * 20
    assert len(parse_fasta(">x\n" + body + "\n")) == 80
    assert parse_fasta(">first\nAC\n>second\nDD\n").residues == "AC"


@pytest.mark.parametrize("text", [">x\n", ">x\nAC1D", ">x\nACBX"])
def test_fasta_errors(text):
    with pytest.raises(DataError):
        parse_fasta(text)


@given(st.text(alphabet=AA_ALPHABET, min_size=1, max_size=50))
def test_one_hot_rows(seq):
    f = Sequence(seq).one_hot()
    assert f.shape == (len(seq), 20)
    assert np.all(f.sum(axis=1) == 1)
    assert "".join(AA_ALPHABET[i] for i in f.argmax(axis=1)) == seq


def test_chain_ids():
    ids = chain_ids(30)
    assert ids[:3] == ["A", "B", "C"] and ids[26] == "AA" and ids[29] == "AD"
    with pytest.raises(DataError):
        chain_ids(26 + 26 * 26 + 1)


def test_validate_rejects_non_increasing_indices():
    s = ca_structure({"A": (np.zeros((2, 3)), "AA", [5, 5])})
    with pytest.raises(DataError):
        s.validate()
