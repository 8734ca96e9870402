import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpt_seqopt.seqcore import (
    LabeledSample,
    ParseError,
    SequenceTooLong,
    SequenceTooShort,
    ShiftingDataset,
    UnknownSymbol,
    UnlabeledProposal,
    Vocabulary,
    batch_tokens,
    buffer_merge,
    decode,
    encode,
    load_buffer,
    load_dataset,
    save_buffer,
    save_dataset,
    validate,
)

DNA = Vocabulary(tuple("ACGT"), 8)


def sample(text, score, vocab=DNA):
    return LabeledSample(encode(text, vocab), [score])


def test_encode_decode_examples():
    assert encode("ACGTACGT", DNA) == (0, 1, 2, 3, 0, 1, 2, 3)
    assert decode((3, 3, 0, 0, 1, 1, 2, 2), DNA) == "TTAACCGG"


def test_encode_errors():
    with pytest.raises(UnknownSymbol):
        encode("ACGTACGN", DNA)
    with pytest.raises(SequenceTooLong):
        encode("ACGTACGTA", DNA)
    with pytest.raises(SequenceTooShort):
        encode("ACG", DNA)
    with pytest.raises(SequenceTooShort):
        encode("", Vocabulary(("A",), 3, eos=True))


def test_multichar_glyphs():
    vocab = Vocabulary(("C", "Cl", "O", "[NH]"), 6, eos=True)
    assert encode("CClO[NH]", vocab) == (0, 1, 2, 3)
    assert decode((1, 0, 3), vocab) == "ClC[NH]"


def test_vocabulary_reserved_ids():
    v = Vocabulary(tuple("AB"), 4, eos=True)
    assert (v.eos_id, v.bos_id, v.pad_id, v.n_classes, v.n_inputs) == (2, 3, 4, 3, 5)
    assert DNA.eos_id is None and DNA.n_classes == 4
    with pytest.raises(ValueError):
        Vocabulary(("A", "A"), 3)


def test_validate_rejects_out_of_range():
    with pytest.raises(UnknownSymbol):
        validate((0, 1, 2, 3, 4, 0, 0, 0), DNA)
    assert validate([0] * 8, DNA) == (0,) * 8


def test_batch_tokens_variable_length():
    v = Vocabulary(tuple("AB"), 4, eos=True)
    inputs, targets, mask = batch_tokens([(0, 1), (1, 1, 1, 1)], v)
    assert inputs[0].tolist() == [v.bos_id, 0, 1, v.pad_id]
    assert targets[0].tolist() == [0, 1, v.eos_id, 0]
    assert mask[0].tolist() == [1, 1, 1, 0]
    # full-length sequence has no EOS target
    assert mask[1].tolist() == [1, 1, 1, 1]
    assert inputs[1].tolist() == [v.bos_id, 1, 1, 1]


# buffer merge ------------------------------------------------------------------

def _scores(buf):
    return [float(s) for s in buf.scores]


def test_merge_worked_example():
    # union {3,2,1} + {5,0} sorted by hand: 5,3,2 | 1,0
    buf = buffer_merge(ShiftingDataset(3), [sample("AAAAAAAA", 3), sample("CCCCCCCC", 2),
                                            sample("GGGGGGGG", 1)])
    assert buf.threshold == 1
    out = buffer_merge(buf, [sample("TTTTTTTT", 5), sample("ACACACAC", 0)])
    assert _scores(out) == [5, 3, 2]
    assert out.threshold == 2


def test_merge_duplicates_keep_best_copy():
    buf = buffer_merge(ShiftingDataset(3), [sample("AAAAAAAA", 1)])
    out = buffer_merge(buf, [sample("AAAAAAAA", 4), sample("AAAAAAAA", 2)])
    assert len(out) == 1 and _scores(out) == [4]


def test_merge_threshold_undefined_until_full():
    out = buffer_merge(ShiftingDataset(4), [sample("AAAAAAAA", 1), sample("CCCCCCCC", 2)])
    assert out.threshold == -np.inf and not out.full


def test_merge_rejects_unlabeled():
    p = LabeledSample(encode("AAAAAAAA", DNA), [1.0], y_is_oracle=False)
    with pytest.raises(UnlabeledProposal):
        buffer_merge(ShiftingDataset(2), [p])


def test_unbounded_buffer_keeps_everything():
    out = buffer_merge(ShiftingDataset(None), [sample("AAAAAAAA", i) for i in range(1)]
                       + [sample("CCCCCCCC", 0), sample("GGGGGGGG", -1)])
    assert len(out) == 3 and out.threshold == -np.inf


seq_st = st.tuples(*[st.integers(0, 3)] * 8)
batch_st = st.lists(st.tuples(seq_st, st.integers(-20, 20)), max_size=12)


def _labeled(batch):
    return [LabeledSample(x, [float(s)]) for x, s in batch]


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.lists(batch_st, min_size=1, max_size=5))
def test_threshold_never_decreases_and_capacity_holds(capacity, batches):
    buf = ShiftingDataset(capacity)
    for batch in batches:
        new = buffer_merge(buf, _labeled(batch))
        assert new.threshold >= buf.threshold
        assert len(new) <= capacity
        assert len(set(new.keys)) == len(new)
        assert new.scores == sorted(new.scores, reverse=True)
        buf = new


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), batch_st)
def test_merge_idempotent(capacity, batch):
    once = buffer_merge(ShiftingDataset(capacity), _labeled(batch))
    twice = buffer_merge(once, _labeled(batch))
    assert once.keys == twice.keys
    assert once.scores == twice.scores
    assert once.threshold == twice.threshold


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), batch_st)
def test_merge_holds_top_n_of_union(capacity, batch):
    out = buffer_merge(ShiftingDataset(capacity), _labeled(batch))
    best = {}
    for x, s in batch:
        best[x] = max(best.get(x, -np.inf), s)
    expect = sorted(best.values(), reverse=True)[:capacity]
    assert [float(v) for v in out.scores] == [float(v) for v in expect]


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="ACGT", min_size=8, max_size=8))
def test_roundtrip_fixed(text):
    assert decode(encode(text, DNA), DNA) == text


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["C", "Cl", "O", "N", "[nH]"]), min_size=1, max_size=10))
def test_roundtrip_multichar(glyphs):
    vocab = Vocabulary(("C", "Cl", "O", "N", "[nH]"), 10, eos=True)
    text = "".join(glyphs)
    assert decode(encode(text, vocab), vocab) == text


# files ------------------------------------------------------------------------------

def test_dataset_roundtrip(tmp_path):
    data = [sample("ACGTACGT", 1.5), LabeledSample(encode("TTTTAAAA", DNA), [-0.25, 3.0])]
    save_dataset(tmp_path / "d.tsv", data, DNA)
    back = load_dataset(tmp_path / "d.tsv", DNA)
    assert [s.x for s in back] == [s.x for s in data]
    assert back[1].y.tolist() == [-0.25, 3.0]


def test_dataset_parse_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("# header\nACGTACGT\n")
    with pytest.raises(ParseError):
        load_dataset(p, DNA)
    p.write_text("ACGTACGT\tabc\n")
    with pytest.raises(ParseError):
        load_dataset(p, DNA)


def test_buffer_snapshot_roundtrip(tmp_path):
    buf = buffer_merge(ShiftingDataset(2), [sample("AAAAAAAA", 3), sample("CCCCCCCC", 2),
                                            sample("GGGGGGGG", 1)])
    save_buffer(tmp_path / "b.tsv", buf, DNA, iteration=7)
    meta = json.loads((tmp_path / "b.tsv.json").read_text())
    assert meta == {"iteration": 7, "threshold": 2.0, "capacity": 2}
    back, it = load_buffer(tmp_path / "b.tsv", DNA)
    assert it == 7 and back.keys == buf.keys and back.threshold == 2.0
