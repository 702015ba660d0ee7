import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgekit.conllu import (
    ConlluError,
    Sentence,
    Token,
    Treebank,
    Vocabulary,
    build_vocab,
    load_word_vectors,
    parse_conllu,
    read_treebank,
    write_conllu,
)
from edgekit.toy import toy_treebank


def row(i, form, head, rel):
    return f"{i}\t{form}\t_\t_\t_\t_\t{head}\t{rel}\t_\t_"


def test_minimal_sentence():
    tb = parse_conllu(row(1, "He", 2, "nsubj") + "\n" + row(2, "runs", 0, "root") + "\n")
    assert len(tb) == 1
    s = tb[0]
    assert len(s) == 2 and s.heads == [2, 0] and s.forms == ["He", "runs"]
    assert tb.labels == ["nsubj", "root"]


def test_range_and_empty_nodes_skipped():
    text = "\n".join([
        "# text = don't go",
        "1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_",
        row(1, "do", 3, "aux"),
        row(2, "n't", 3, "advmod"),
        row(3, "go", 0, "root"),
        "3.1\tgo\t_\t_\t_\t_\t_\t_\t_\t_",
    ])
    s = parse_conllu(text)[0]
    assert s.forms == ["do", "n't", "go"]


@pytest.mark.parametrize("bad,lineno", [
    (row(1, "a", 0, "root") + "\n" + "2\tb\t_\t_", 2),
    (row(1, "a", "x", "root"), 1),
    (row(1, "a", 0, "root") + "\n" + row(2, "b", 7, "dep"), 2),
    (row(1, "a", 1, "root"), 1),
])
def test_errors_name_line(bad, lineno):
    with pytest.raises(ConlluError) as e:
        parse_conllu(bad)
    assert e.value.lineno == lineno
    assert f"line {lineno}" in str(e.value)


def test_unannotated_input():
    text = "1\ta\t_\t_\t_\t_\t_\t_\t_\t_\n2\tb\t_\t_\t_\t_\t_\t_\t_\t_\n"
    with pytest.raises(ConlluError):
        parse_conllu(text)
    s = parse_conllu(text, require_annotation=False)[0]
    assert s.heads == [0, 0]


def test_write_empty_and_single():
    assert write_conllu(Treebank([], ["root"])) == ""
    tb = Treebank([Sentence((Token(1, "Hi", 0, "root"),))])
    out = write_conllu(tb)
    assert out.rstrip("\n").endswith("0\troot\t_\t_")
    assert out.count("\n") == 1


def test_blank_line_between_sentences():
    out = write_conllu(toy_treebank(3))
    assert out.count("\n\n") == 2


def test_round_trip_toy(tmp_path):
    tb = toy_treebank(100, seed=9)
    p = tmp_path / "t.conllu"
    p.write_text(write_conllu(tb))
    again = read_treebank(p)
    assert again.sentences == tb.sentences
    assert set(again.labels) == set(tb.labels)
    assert parse_conllu(write_conllu(again)) == again


@st.composite
def trees(draw):
    n = draw(st.integers(1, 7))
    forms = draw(st.lists(st.text(st.characters(blacklist_categories=("Cc", "Cs", "Zs", "Zl", "Zp"),
                                                 blacklist_characters="\t\n\r#"), min_size=1, max_size=6),
                          min_size=n, max_size=n))
    heads = [draw(st.sampled_from([h for h in range(n + 1) if h != i])) for i in range(1, n + 1)]
    rels = draw(st.lists(st.sampled_from(["root", "nsubj", "obj", "det", "x:y"]), min_size=n, max_size=n))
    return Sentence(tuple(Token(i + 1, f, h, r) for i, (f, h, r) in enumerate(zip(forms, heads, rels))))


@settings(max_examples=150, deadline=None)
@given(st.lists(trees(), min_size=0, max_size=4))
def test_round_trip_property(sents):
    tb = Treebank(sents)
    once = parse_conllu(write_conllu(tb))
    assert once.sentences == tb.sentences
    assert parse_conllu(write_conllu(once)) == once


def test_sentence_invariants():
    with pytest.raises(ValueError):
        Sentence((Token(1, "a", 1, "root"),))
    with pytest.raises(ValueError):
        Sentence((Token(2, "a", 0, "root"),))
    with pytest.raises(ValueError):
        Sentence((Token(1, "a", 5, "root"),))


def test_vocab_min_freq():
    text = "\n\n".join([row(1, "a", 0, "root"), row(1, "a", 0, "root"), row(1, "a", 0, "root"),
                        row(1, "b", 0, "root")])
    tb = parse_conllu(text)
    v1 = build_vocab(tb, min_freq=1)
    assert v1.word_id("a") != v1.unk_id and v1.word_id("b") != v1.unk_id
    v2 = build_vocab(tb, min_freq=2)
    assert v2.word_id("a") != v2.unk_id
    assert v2.word_id("b") == v2.unk_id
    assert v2.word_id("never-seen") == v2.unk_id


def test_vocab_labels_match_independent_scan(fixtures_dir):
    gold = fixtures_dir / "gold10.conllu"
    tb = read_treebank(gold)
    scanned = {line.split("\t")[7] for line in gold.read_text().splitlines() if line and not line.startswith("#")}
    v = build_vocab(tb)
    assert len(v.labels) == len(scanned)
    assert sorted(v.labels.values()) == list(range(len(scanned)))
    assert set(v.labels) == scanned


def test_vocab_chars_cover_words_and_ids_dense():
    tb = toy_treebank(20)
    v = build_vocab(tb)
    assert sorted(v.words.values()) == list(range(len(v.words)))
    assert sorted(v.chars.values()) == list(range(len(v.chars)))
    for w in v.words:
        if w.startswith("<"):
            continue
        assert all(c in v.chars for c in w)


def test_vocab_deterministic_and_json():
    tb = toy_treebank(30, seed=5)
    a, b = build_vocab(tb), build_vocab(tb)
    assert a.words == b.words and a.digest() == b.digest()
    c = Vocabulary.from_json(a.to_json())
    assert c.words == a.words and c.labels == a.labels and c.digest() == a.digest()


def test_vocab_empty_treebank():
    with pytest.raises(ValueError):
        build_vocab(Treebank([], ["root"]))


def test_vocab_lowercase_fallback():
    tb = parse_conllu(row(1, "dog", 0, "root"))
    v = build_vocab(tb)
    assert v.word_id("Dog") == v.word_id("dog") != v.unk_id


def test_load_word_vectors(tmp_path):
    p = tmp_path / "vec.txt"
    p.write_text("2 3\nthe 0.1 0.2 0.3\ndog 1 2 3\n")
    words, vecs = load_word_vectors(p)
    assert words == ["the", "dog"]
    np.testing.assert_allclose(vecs, [[0.1, 0.2, 0.3], [1, 2, 3]])
