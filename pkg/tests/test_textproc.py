from hypothesis import given, strategies as st

from emocap.textproc import tokenize, unique_vocab


def test_empty():
    assert tokenize("") == []
    assert tokenize("   \t\n") == []


def test_lowercase_and_edge_punctuation():
    assert tokenize("The cat, sat.") == ["the", "cat", "sat"]


def test_interior_punctuation_kept():
    assert tokenize("a high-pitched voice, the male's tone!") == [
        "a", "high-pitched", "voice", "the", "male's", "tone"]


def test_cjk_chunks_split_per_codepoint():
    assert tokenize("声音低沉") == ["声", "音", "低", "沉"]
    # full-width comma is punctuation and drops out after the split
    assert tokenize("语速，适中") == ["语", "速", "适", "中"]


def test_punctuation_only_chunks_vanish():
    assert tokenize("-- ... !!") == []


def test_unique_vocab():
    assert unique_vocab([]) == 0
    assert unique_vocab([["a", "b"], ["b", "c"]]) == 3
    assert unique_vocab([["x", "x", "x"]]) == 1


latin_text = st.text(alphabet=st.sampled_from(list("abcXYZ .,!'-\t")), max_size=40)
any_text = st.text(max_size=40)


@given(any_text)
def test_tokens_have_no_whitespace_and_are_nonempty(text):
    for tok in tokenize(text):
        assert tok
        assert not any(ch.isspace() for ch in tok)


@given(any_text)
def test_deterministic(text):
    assert tokenize(text) == tokenize(text)


@given(latin_text)
def test_idempotent_on_joined_output(text):
    once = tokenize(text)
    assert tokenize(" ".join(once)) == once


@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "d"]), max_size=5), max_size=6),
       st.randoms())
def test_unique_vocab_permutation_invariant(captions, rnd):
    shuffled = list(captions)
    rnd.shuffle(shuffled)
    assert unique_vocab(shuffled) == unique_vocab(captions)
