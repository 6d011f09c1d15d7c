import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragfit import seqalign as S
from fragfit.structio import AA_ALPHABET, AA_INDEX, ONE_TO_THREE, Sequence
from fragfit.tracing import CaCandidate, Fragment


def fragment_from_profile(profile, start=(0.0, 0.0, 0.0)):
    residues = []
    for k, row in enumerate(np.asarray(profile)):
        pos = np.asarray(start) + [3.8 * k, 0.0, 0.0]
        residues.append(CaCandidate((k, 0, 0), pos, np.array([3.8, 0.0, 0.0]), np.asarray(row, dtype=float), 1.0))
    return Fragment(residues)


def one_hot(seq):
    return np.eye(20)[[AA_INDEX[a] for a in seq]]


def loop_scores(profile, seq):
    n, big_l = len(profile), len(seq)
    out = []
    for i in range(big_l - n + 1):
        total = 0.0
        for k in range(n):
            total += math.log(max(profile[k][AA_INDEX[seq[i + k]]], 1e-9))
        out.append(total / n)
    return np.array(out)


def test_matching_window_scores_zero():
    seq = Sequence("MKTAYIAKQRQISFVKSHFSRQ")
    s = S.alignment_scores(fragment_from_profile(one_hot("AYIAK")), seq)
    assert s.shape == (len(seq) - 5 + 1,)
    assert s[3] == 0.0 and s.max() == 0.0
    assert np.all(s <= 0)


def test_uniform_profile_scores():
    s = S.alignment_scores(np.full((4, 20), 0.05), Sequence("ACDEFGHIK"))
    assert np.allclose(s, -math.log(20))


def test_scores_match_double_loop(rng):
    profile = rng.dirichlet(np.ones(20), size=5)
    seq = "".join(rng.choice(list(AA_ALPHABET), size=30))
    assert np.allclose(S.alignment_scores(profile, Sequence(seq)), loop_scores(profile, seq), rtol=1e-12)


def test_fragment_longer_than_sequence():
    with pytest.raises(ValueError):
        S.alignment_scores(np.full((6, 20), 0.05), Sequence("ACDE"))


def test_confidence_examples():
    assert S.confidence([-1.0, -1.0, -1.0]) == 0.0
    assert S.confidence([0.0]) == 0.0
    assert S.confidence([0, -1, -1, -1, -1]) == pytest.approx(0.8 / (0.4 + 1e-6))
    assert S.confidence([0, -1, -1, -1, -1]) == pytest.approx(2.0, abs=1e-5)


@given(st.lists(st.floats(-20, 0), min_size=2, max_size=40), st.floats(0.1, 10), st.floats(-5, 5))
def test_confidence_affine_invariance(s, a, b):
    s = np.array(s)
    if s.std() < 1e-3:
        return
    c = S.confidence(s)
    assert S.confidence(a * s + b) == pytest.approx(c, rel=1e-3, abs=1e-3)


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_scores_invariant_under_alphabet_permutation(seed):
    r = np.random.default_rng(seed)
    profile = r.dirichlet(np.ones(20), size=4)
    seq = "".join(r.choice(list(AA_ALPHABET), size=15))
    perm = r.permutation(20)  # new position j holds old type perm[j]
    inv = {AA_ALPHABET[p]: AA_ALPHABET[j] for j, p in enumerate(perm)}
    permuted_seq = "".join(inv[a] for a in seq)
    assert np.allclose(
        S.alignment_scores(profile[:, perm], Sequence(permuted_seq)), S.alignment_scores(profile, Sequence(seq))
    )


def test_label_unique_motif_accepted(rng):
    seq = "".join(rng.choice(list(AA_ALPHABET), size=80))
    frag = fragment_from_profile(one_hot(seq[37:52]))
    out = S.label_fragment(frag, Sequence(seq))
    assert isinstance(out, S.LabeledFragment)
    assert out.start_index == 37 and out.aa_assignment == seq[37:52]
    assert out.author_indices[0] == 38
    assert out.confidence >= 3.4 and not out.ambiguous


def test_repeated_motif_rejected():
    frag = fragment_from_profile(one_hot("AAAA"))
    out = S.label_fragment(frag, Sequence("A" * 30))
    assert isinstance(out, S.Rejected) and out.reason == "low confidence"
    assert out.confidence == 0.0


def test_uniform_fragment_rejected():
    out = S.label_fragment(fragment_from_profile(np.full((6, 20), 0.05)), Sequence("ACDEFGHIKLMNPQRSTVWY" * 3))
    assert isinstance(out, S.Rejected)


def test_tie_reports_smallest_start_and_ambiguous():
    seq = Sequence("WACDWGGGGGGGGGGGGGGGGWACDW")
    out = S.label_fragment(fragment_from_profile(one_hot("ACD")), seq, conf_threshold=0.0)
    assert out.start_index == 1 and out.ambiguous


@given(st.integers(0, 2**31), st.integers(3, 25))
@settings(max_examples=40, deadline=None)
def test_one_hot_fragments_recover_start(seed, n):
    r = np.random.default_rng(seed)
    seq = "".join(r.choice(list(AA_ALPHABET), size=120))
    start = int(r.integers(0, 120 - n + 1))
    frag = fragment_from_profile(one_hot(seq[start : start + n]))
    i, assigned = S.argmax_assignment(frag, Sequence(seq))
    # A random 120-mer can repeat a short window; only then may the start differ.
    if seq.count(seq[start : start + n]) == 1:
        assert i == start
    assert assigned == seq[start : start + n]


def test_overlapping_claims_rejected(rng):
    seq = "".join(rng.choice(list(AA_ALPHABET), size=100))
    a = fragment_from_profile(one_hot(seq[10:30]))
    b = fragment_from_profile(one_hot(seq[25:40]), start=(0, 50, 0))
    c = fragment_from_profile(one_hot(seq[60:75]), start=(0, 90, 0))
    accepted, rejected = S.label_fragments([b, a, c], Sequence(seq))
    starts = sorted(lf.start_index for lf in accepted)
    assert starts == [10, 60]
    assert [r.reason for r in rejected] == ["window already claimed"]
    intervals = sorted((lf.start_index, lf.end_index) for lf in accepted)
    assert all(e <= s for (_, e), (s, _) in zip(intervals, intervals[1:]))
    confs = [lf.confidence for lf in accepted]
    assert confs == sorted(confs, reverse=True)


def test_multi_chain_labeling(rng):
    s1 = "".join(rng.choice(list(AA_ALPHABET), size=50))
    s2 = "".join(rng.choice(list(AA_ALPHABET), size=60))
    frag = fragment_from_profile(one_hot(s2[20:35]))
    out = S.label_fragment(frag, [Sequence(s1), Sequence(s2)])
    assert out.chain_index == 1 and out.start_index == 20
    assert out.all_scores.size == (50 - 15 + 1) + (60 - 15 + 1)


def test_threads_do_not_change_results(rng):
    seq = "".join(rng.choice(list(AA_ALPHABET), size=200))
    frags = [
        fragment_from_profile(0.5 * rng.dirichlet(np.ones(20), size=12) + 0.5 * one_hot(seq[s : s + 12]))
        for s in range(0, 180, 15)
    ]
    a1, r1 = S.label_fragments(frags, Sequence(seq), threads=1)
    a8, r8 = S.label_fragments(frags, Sequence(seq), threads=8)
    assert [(x.start_index, x.confidence) for x in a1] == [(x.start_index, x.confidence) for x in a8]
    assert len(r1) == len(r8)


def test_report_and_targets(tmp_path, rng):
    seq = "".join(rng.choice(list(AA_ALPHABET), size=60))
    frags = [fragment_from_profile(one_hot(seq[5:20])), fragment_from_profile(np.full((4, 20), 0.05))]
    accepted, rejected = S.label_fragments(frags, Sequence(seq))
    S.save_labeled(accepted, rejected, tmp_path / "l.pdb", tmp_path / "l.json")
    targets = S.load_targets(tmp_path / "l.json")
    assert len(targets) == 1
    assert targets[0].author_indices == tuple(range(6, 21))
    assert np.allclose(targets[0].positions, frags[0].positions)
    first = (tmp_path / "l.pdb").read_text().splitlines()[0]
    assert first[17:20] == ONE_TO_THREE[seq[5]] and int(first[22:26]) == 6
