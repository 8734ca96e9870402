import itertools

import numpy as np
import pytest

from lpt_seqopt import oracles as orc
from lpt_seqopt.seqcore import Vocabulary, decode, encode

DNA = Vocabulary(tuple("ACGT"), 8)


@pytest.fixture(scope="module")
def table():
    return orc.TableOracle(DNA, seed=0)


def _score_by_hand(o, seq):
    """Direct transcription of the landscape formula for one sequence."""
    total = 0.0
    W = o.motif_width
    for k in range(o.n_motifs):
        best = max(sum(o.pwms[k, i, seq[p + i]] for i in range(W)) for p in range(8 - W + 1))
        total += o.motif_weights[k] * best
    for c, (i, j) in enumerate(o.pairs):
        total += o.couplings[c, seq[i], seq[j]]
    return total


def test_table_matches_formula(table):
    rng = np.random.default_rng(3)
    for _ in range(25):
        seq = tuple(int(v) for v in rng.integers(0, 4, 8))
        assert table([seq])[0, 0] == pytest.approx(_score_by_hand(table, seq), abs=1e-12)


def test_table_optimum_by_enumeration(table):
    best = max(itertools.product(range(4), repeat=8), key=lambda s: table.table[
        int(np.dot(s, 4 ** np.arange(7, -1, -1)))])
    res = orc.brute_force(table)
    assert res["argmax"] == best
    assert res["n_total"] == 65536 == res["n_feasible"]
    assert decode(res["argmax"], DNA) == "GGTCGCAA"
    assert res["max"] == pytest.approx(17.296, abs=1e-3)


def test_table_deterministic_per_seed():
    a, b = orc.TableOracle(DNA, seed=4), orc.TableOracle(DNA, seed=4)
    assert np.array_equal(a.table, b.table)
    assert not np.array_equal(a.table, orc.TableOracle(DNA, seed=5).table)


def test_memo_and_meter(table):
    o = orc.TableOracle(DNA, seed=0)
    s = encode("ACGTACGT", DNA)
    o([s, s])
    assert o.query_count == 1
    o([s])
    assert o.query_count == 1 and o.is_cached(s)
    orc.all_scores(o)
    orc.brute_force(o)
    assert o.query_count == 1


def test_motif_overlapping_counts():
    vocab = Vocabulary(tuple("AB"), 6, eos=True)
    o = orc.MotifOracle(vocab, [("AA", 1.0)])
    assert o([encode("AAA", vocab)])[0, 0] == 2.0
    o2 = orc.MotifOracle(vocab, [("AB", 2.0), ("BA", 0.5)], length_penalty=0.1)
    # ABABA: AB twice, BA twice -> 4 + 1 - 0.5
    assert o2([encode("ABABA", vocab)])[0, 0] == pytest.approx(4.5)


def test_noisy_oracle_is_per_sequence_deterministic(table):
    a = orc.NoisyOracle(table, 10.0, seed=1)
    b = orc.NoisyOracle(table, 10.0, seed=1)
    seqs = [tuple(int(v) for v in s) for s in np.random.default_rng(0).integers(0, 4, (50, 8))]
    ya = a(seqs)
    yb = b(list(reversed(seqs)))[::-1]
    assert np.array_equal(ya, yb)
    assert not np.array_equal(ya, a.true_values(seqs))
    # sigma is 10% of the range
    assert a.sigma[0] == pytest.approx(0.1 * (table.max - table.min))


def test_noisy_needs_a_range():
    vocab = Vocabulary(tuple("AB"), 4, eos=True)
    with pytest.raises(orc.UnknownRange):
        orc.NoisyOracle(orc.MotifOracle(vocab, [("A", 1.0)]), 5.0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noise_level_statistics(table, seed):
    o = orc.NoisyOracle(table, 5.0, seed=seed)
    seqs = [tuple(int(v) for v in s) for s in table.sequences[:8000]]
    resid = (o(seqs) - table(seqs))[:, 0] / (table.max - table.min)
    # zero mean within 4 standard errors; std is 5% of the range
    assert abs(resid.mean()) < 4 * 0.05 / np.sqrt(len(resid))
    assert resid.std() == pytest.approx(0.05, rel=0.05)


def test_constrained_task_feasible_fraction():
    o = orc.constrained_table_task(DNA, seed=0, feasible_frac=0.1)
    res = orc.brute_force(o)
    assert res["n_feasible"] == pytest.approx(6554, abs=1)
    tokens, scores = orc.all_scores(o)
    mask = orc.feasible(scores, o.constraint_specs())
    assert res["max"] == scores[mask, 0].max()
    assert res["max"] <= orc.brute_force(o.primary)["max"]


def test_feasible_directions():
    y = np.array([[1.0, 0.5], [1.0, 2.0]])
    assert orc.feasible(y, [(1, ">", 1.0)]).tolist() == [False, True]
    assert orc.feasible(y, [(1, "<", 1.0)]).tolist() == [True, False]


def test_rank_of():
    desc = np.array([5.0, 4.0, 4.0, 1.0])
    assert orc.rank_of(5.0, desc) == 1
    assert orc.rank_of(4.0, desc) == 2
    assert orc.rank_of(3.0, desc) == 4


def test_file_oracle_and_json_roundtrip(tmp_path):
    vocab = Vocabulary(tuple("AB"), 2)
    (tmp_path / "t.tsv").write_text("AA\t1\nAB\t2\nBA\t3\nBB\t4\n")
    o = orc.FileTableOracle(vocab, tmp_path / "t.tsv")
    assert o([(1, 0)])[0, 0] == 3.0
    orc.save_oracle(tmp_path / "o.json", o)
    (tmp_path / "o.json").write_text((tmp_path / "o.json").read_text().replace(
        str(tmp_path / "t.tsv"), "t.tsv"))
    back = orc.load_oracle(tmp_path / "o.json")
    assert orc.brute_force(back)["argmax"] == (1, 1)
    with pytest.raises(orc.OutOfTable):
        orc.FileTableOracle(Vocabulary(tuple("ABC"), 2), tmp_path / "t.tsv")([(2, 2)])


def test_oracle_json_roundtrip(tmp_path, table):
    for o in (table, orc.NoisyOracle(table, 5.0, seed=3), orc.constrained_table_task(DNA, 1)):
        orc.save_oracle(tmp_path / "o.json", o)
        back = orc.load_oracle(tmp_path / "o.json")
        seqs = [tuple(s) for s in table.sequences[::4099]]
        assert np.array_equal(back(seqs), o(seqs))


def test_space_too_large():
    with pytest.raises(orc.SpaceTooLarge):
        orc.TableOracle(Vocabulary(tuple("ACGT"), 11))


def test_composite_rejects_foreign_vocab(table):
    other = orc.TableOracle(Vocabulary(tuple("AB"), 8))
    with pytest.raises(orc.VocabMismatch):
        orc.CompositeOracle(table, [(other, 0.0, ">")])
