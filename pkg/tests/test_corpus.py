import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protchat.corpus import (
    ProteinRecord,
    Tokenizer,
    build_tokenizer,
    dump_instructions,
    format_fasta,
    load_instruction_file,
    normalize,
    parse_fasta,
    parse_instructions,
    parse_pdb_chain,
    parse_ss8,
    split_dataset,
)
from protchat.corpus.tokenizer import RESERVED, UNK
from protchat.encoders import ALPHABET, AminoAcidSequence
from protchat.errors import ContractError, NotFoundError, ParseError, TokenizerError

from conftest import FIXTURES


# --- FASTA -------------------------------------------------------------------


def test_fasta_examples():
    assert parse_fasta(b">p1\nMKV\n") == [AminoAcidSequence("p1", "MKV")]
    recs = parse_fasta(">p1 desc\nMK\nV\n>p2\nGG\n")
    assert [(r.id, r.residues) for r in recs] == [("p1", "MKV"), ("p2", "GG")]
    with pytest.raises(ParseError) as exc:
        parse_fasta(b">p1\nMK1\n")
    assert exc.value.line == 2


def test_fasta_fixture_file():
    recs = parse_fasta((FIXTURES / "three.fasta").read_bytes())
    assert [(r.id, r.residues) for r in recs] == [("p1", "MKVLAGG"), ("p2", "ACDEF"), ("p3", "WXY")]


@pytest.mark.parametrize("name, line", [("bad_char.fasta", 3), ("empty_record.fasta", 1), ("no_header.fasta", 1)])
def test_fasta_malformed_fixtures_are_located(name, line):
    path = FIXTURES / name
    with pytest.raises(ParseError) as exc:
        parse_fasta(path.read_bytes(), source=str(path))
    assert exc.value.line == line
    assert name in str(exc.value)


def test_fasta_not_utf8():
    with pytest.raises(ParseError):
        parse_fasta(b">p\n\xff\xfe\n")


fasta_records = st.lists(
    st.tuples(st.text("abcdefghij0123456789_", min_size=1, max_size=8), st.text(ALPHABET, min_size=1, max_size=150)),
    max_size=5,
    unique_by=lambda r: r[0],
)


@settings(max_examples=60, deadline=None)
@given(fasta_records, st.integers(1, 80))
def test_fasta_round_trip_fixed_point(records, width):
    seqs = [AminoAcidSequence(i, r) for i, r in records]
    text = format_fasta(seqs, width)
    parsed = parse_fasta(text)
    assert parsed == seqs
    assert format_fasta(parsed, width) == text


# --- PDB ---------------------------------------------------------------------


def test_pdb_minimal_two_residues():
    assert parse_pdb_chain((FIXTURES / "minimal.pdb").read_bytes(), "A").residues == "MK"


def test_pdb_chain_extraction_matches_hand_built():
    data = (FIXTURES / "two_chain.pdb").read_bytes()
    # MET, LYS, VAL (altLoc A/B collapsed), GLY with insertion code A, unknown ABC -> X;
    # the second model is ignored
    assert parse_pdb_chain(data, "A").residues == "MKVGX"
    assert parse_pdb_chain(data, "B", protein_id="x_B") == AminoAcidSequence("x_B", "AC")


def test_pdb_missing_chain():
    with pytest.raises(NotFoundError):
        parse_pdb_chain((FIXTURES / "minimal.pdb").read_bytes(), "B")


@pytest.mark.parametrize("name", ["short_atom.pdb", "bad_resseq.pdb"])
def test_pdb_malformed_fixtures_are_located(name):
    with pytest.raises(ParseError) as exc:
        parse_pdb_chain((FIXTURES / name).read_bytes(), "A", source=name)
    assert exc.value.line == 2


# --- ss8 ---------------------------------------------------------------------


def test_ss8_examples():
    assert parse_ss8("HHEE") == "HHEE"
    assert parse_ss8("H-E") == "HCE"
    with pytest.raises(ParseError) as exc:
        parse_ss8("HXE")
    assert exc.value.index == 1


# --- instruction schema --------------------------------------------------------


def test_instruction_fixture():
    recs = load_instruction_file(FIXTURES / "instructions.jsonl")
    assert [r.id for r in recs] == ["q1", "q2"]
    assert recs[0].ss8 == "HHCEE" and recs[0].ter_path == "stub"
    assert recs[1].sequence.residues == "GG" and len(recs[1].qa) == 2


def test_instruction_single_pair_and_empty_file(tmp_path):
    line = json.dumps({"id": "a", "sequence": "MKV", "qa": [{"q": "why", "a": "because"}]})
    assert len(parse_instructions(line)) == 1
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert load_instruction_file(empty) == []


@pytest.mark.parametrize(
    "name, line, fieldname",
    [
        ("bad_ss8_length.jsonl", 2, "ss8"),
        ("bad_field.jsonl", 2, "sequence"),
        ("bad_json.jsonl", 2, None),
        ("bad_qa.jsonl", 1, "qa[0]"),
    ],
)
def test_instruction_errors_name_line_and_field(name, line, fieldname):
    with pytest.raises(ParseError) as exc:
        load_instruction_file(FIXTURES / name)
    assert exc.value.line == line
    if fieldname:
        assert repr(fieldname) in str(exc.value)


def test_record_invariants():
    with pytest.raises(ContractError):
        ProteinRecord("x", AminoAcidSequence("x", "MKV"), ss8="HH")
    with pytest.raises(ContractError):
        ProteinRecord("x", AminoAcidSequence("x", "MKV"), qa=[("", "a")])


text_st = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)
record_st = st.builds(
    lambda i, res, ss, desc, qa, ter: dict(
        id=i, sequence=res, ss8=ss[: len(res)].ljust(len(res), "C") if ss is not None else None, description=desc, qa=qa, ter_path=ter
    ),
    st.text("abcxyz0123_", min_size=1, max_size=6),
    st.text(ALPHABET, min_size=1, max_size=30),
    st.none() | st.text("HGIEBTSC", max_size=30),
    text_st,
    st.lists(st.tuples(text_st.filter(bool), text_st.filter(bool)), max_size=3),
    st.none() | st.just("stub"),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, max_size=4, unique_by=lambda r: r["id"]))
def test_instruction_round_trip_fixed_point(raw):
    recs = [
        ProteinRecord(r["id"], AminoAcidSequence(r["id"], r["sequence"]), r["ss8"], r["ter_path"], r["description"], r["qa"])
        for r in raw
    ]
    text = dump_instructions(recs)
    parsed = parse_instructions(text)
    assert parsed == recs
    assert dump_instructions(parsed) == text


# --- splits ------------------------------------------------------------------


def test_split_examples():
    ids = [f"p{i}" for i in range(10)]
    s0 = split_dataset(ids, 0, seed=1)
    assert s0.train == tuple(ids) and s0.eval == ()
    a, b = split_dataset(ids, 3, seed=4), split_dataset(ids, 3, seed=4)
    assert a == b
    assert (len(a.train), len(a.eval)) == (7, 3)
    assert set(a.train).isdisjoint(a.eval) and set(a.train) | set(a.eval) == set(ids)
    with pytest.raises(ContractError):
        split_dataset(ids, 10, seed=0)
    with pytest.raises(ContractError):
        split_dataset(ids, -1, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.data(), st.integers(0, 2**32 - 1))
def test_split_partition_property(n, data, seed):
    k = data.draw(st.integers(0, n - 1))
    s = split_dataset([f"x{i}" for i in range(n)], k, seed)
    assert len(s.eval) == k and len(s.train) == n - k
    assert set(s.train).isdisjoint(s.eval)


# --- tokenizer ---------------------------------------------------------------


def test_tokenizer_golden_vocabulary():
    golden = json.loads((FIXTURES / "tokenizer_golden.json").read_text())
    tok = build_tokenizer(golden["corpus"], golden["max_vocab"])
    assert tok.vocab == golden["vocab"]


def test_tokenizer_examples():
    tok = build_tokenizer(["The cat.", "a dog"])
    ids = tok.encode("The cat.")
    assert [tok.vocab[i] for i in ids] == ["the", "cat", "."]
    assert tok.decode(tok.encode("The cat.")) == "the cat ."
    assert tok.encode("zebra") == [tok.special(UNK)]
    assert normalize("Hello, World!") == ["hello", ",", "world", "!"]


def test_tokenizer_errors_and_serialization(tmp_path):
    with pytest.raises(TokenizerError):
        build_tokenizer([])
    tok = build_tokenizer(["alpha beta beta"])
    with pytest.raises(TokenizerError):
        tok.special("[NOPE]")
    tok.save(tmp_path / "t.json")
    assert Tokenizer.load(tmp_path / "t.json") == tok


@settings(max_examples=60, deadline=None)
@given(st.lists(st.text(max_size=30), min_size=1, max_size=5))
def test_tokenizer_round_trip_and_reserved_property(texts):
    tok = build_tokenizer(texts)
    for t in texts:
        ids = tok.encode(t)
        assert tok.decode(ids) == " ".join(normalize(t))
        assert all(i >= len(RESERVED) for i in ids)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.text(max_size=30), min_size=1, max_size=5), st.integers(9, 40))
def test_tokenizer_stable_ids(texts, max_vocab):
    assert build_tokenizer(texts, max_vocab).vocab == build_tokenizer(list(texts), max_vocab).vocab
