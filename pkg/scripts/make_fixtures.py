"""Write the MRC/PDB round-trip corpus under tests/fixtures/corpus.

The MRC files are assembled byte by byte with ``struct`` rather than with
fragfit's writer, and cover both byte orders, permuted axis maps, start
offsets, non-cubic cells and an extended header. The expected x-fastest
value arrays go to ``expected.npz`` next to them. The PDB files exercise
CA-only and full-backbone chains, two-letter chain IDs, extreme
coordinates, and records the reader skips.

Run from the repository root:  python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from fragfit.synthetic import ideal_helix, make_structure, random_ca_trace, random_sequence
from fragfit.structio import write_structure

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "corpus"


def mrc_bytes(field_xyz, axes=(1, 2, 3), cella=None, starts=(0, 0, 0), origin=(0.0, 0.0, 0.0),
              endian="<", nsymbt=0, sampling=None):
    """MODE 2 MRC whose columns/rows/sections follow ``axes`` (MAPC, MAPR, MAPS)."""
    field_xyz = np.asarray(field_xyz, dtype=np.float32)
    dims_xyz = field_xyz.shape
    # File array is (sections, rows, columns); axis k of the file maps to physical axis axes[k] - 1.
    order = [axes[2] - 1, axes[1] - 1, axes[0] - 1]
    data = np.transpose(field_xyz, order)
    ns, nr, nc = data.shape
    sampling = sampling or dims_xyz
    cella = cella or tuple(float(n) for n in sampling)
    header = bytearray(1024)
    struct.pack_into(endian + "10i", header, 0, nc, nr, ns, 2, *starts, *sampling)
    struct.pack_into(endian + "6f", header, 40, *cella, 90.0, 90.0, 90.0)
    struct.pack_into(endian + "3i", header, 64, *axes)
    wide = data.astype(np.float64)
    struct.pack_into(endian + "3f", header, 76, wide.min(), wide.max(), wide.mean())
    struct.pack_into(endian + "i", header, 92, nsymbt)
    struct.pack_into(endian + "3f", header, 196, *origin)
    header[208:212] = b"MAP "
    header[212:214] = b"\x44\x44" if endian == "<" else b"\x11\x11"
    struct.pack_into(endian + "f", header, 216, wide.std())
    return bytes(header) + b"\x00" * nsymbt + np.ascontiguousarray(data, dtype=endian + "f4").tobytes()


def mrc_cases(rng):
    special = rng.normal(size=(5, 4, 3)).astype(np.float32)
    special.flat[:4] = [np.float32(1e-40), -0.0, np.float32(3.4e38), np.float32(-1.17e-38)]
    return {
        "little_standard.mrc": (rng.normal(size=(7, 5, 3)), {}),
        "big_endian.mrc": (rng.random((4, 6, 5)), {"endian": ">"}),
        "permuted_axes.mrc": (rng.normal(size=(3, 4, 5)), {"axes": (2, 3, 1)}),
        "start_offset.mrc": (
            rng.normal(size=(6, 6, 4)),
            {"starts": (-3, 2, 7), "sampling": (12, 12, 8), "cella": (14.4, 13.2, 9.6)},
        ),
        "extended_header.mrc": (special, {"nsymbt": 160, "origin": (-12.5, 3.25, 100.0), "endian": ">"}),
    }


def pdb_cases(rng):
    helix = write_structure(make_structure(ideal_helix(12), random_sequence(12, rng), full_backbone=False))
    a = make_structure(random_ca_trace(9, rng), random_sequence(9, rng), "A", first_index=-2)
    b = make_structure(random_ca_trace(7, rng) + 20.0, random_sequence(7, rng), "B", first_index=40)
    two_chain = write_structure(a).replace("END\n", "") + write_structure(b)
    ca = np.array([[-999.999, 9999.999, 0.0], [-996.5, 9998.0, 0.001], [-993.0, 9996.0, -0.001]])
    extreme = write_structure(make_structure(ca, "GAG", full_backbone=False))
    wide = make_structure(random_ca_trace(5, rng), random_sequence(5, rng), "AB", full_backbone=False)
    two_letter = write_structure(wide)
    noisy = (
        "HEADER    ROUND-TRIP FIXTURE\n"
        "REMARK   2 RESOLUTION.    3.00 ANGSTROMS.\n"
        "CRYST1   50.000   50.000   50.000  90.00  90.00  90.00 P 1           1\n"
        "ATOM      1  N   MET A   1      11.104   6.134  -6.504  1.00 20.00           N\n"
        "ATOM      2  CA AMET A   1      11.639   6.071  -5.147  0.60 20.00           C\n"
        "ATOM      3  CA BMET A   1      11.700   6.000  -5.100  0.40 20.00           C\n"
        "ATOM      4  C   MET A   1      10.534   5.897  -4.122  1.00 20.00           C\n"
        "ATOM      5  O   MET A   1       9.348   5.909  -4.452  1.00 20.00           O\n"
        "ATOM      6  N   LYS A   2      10.914   5.739  -2.859  1.00 20.00           N\n"
        "ATOM      7  CA  LYS A   2       9.938   5.528  -1.795  1.00 20.00           C\n"
        "ATOM      8  C   LYS A   2       9.684   4.042  -1.562  1.00 20.00           C\n"
        "ATOM      9  O   LYS A   2      10.585   3.227  -1.796  1.00 20.00           O\n"
        "HETATM   10  O   HOH A 101      15.000  15.000  15.000  1.00 30.00           O\n"
        "ATOM     11  CA  UNK A   3       8.000   2.000   0.000  1.00 20.00           C\n"
        "TER      12      UNK A   3\n"
        "END\n"
    )
    return {
        "helix_ca.pdb": helix,
        "two_chains.pdb": two_chain,
        "extreme_coords.pdb": extreme,
        "two_letter_chain.pdb": two_letter,
        "skipped_records.pdb": noisy,
    }


def main():
    rng = np.random.default_rng(20240611)
    OUT.mkdir(parents=True, exist_ok=True)
    expected = {}
    for name, (field, kw) in mrc_cases(rng).items():
        field = np.asarray(field, dtype=np.float32)
        (OUT / name).write_bytes(mrc_bytes(field, **kw))
        expected[name] = field
    np.savez(OUT / "expected.npz", **{k.replace(".mrc", ""): v for k, v in expected.items()})
    pdbs = pdb_cases(rng)
    for name, text in pdbs.items():
        (OUT / name).write_text(text)
    print(f"wrote {len(expected)} MRC and {len(pdbs)} PDB fixtures to {OUT}")


if __name__ == "__main__":
    main()
