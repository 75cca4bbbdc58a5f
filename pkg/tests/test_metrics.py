
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqclr.metrics import dump_errors, edit_distance, evaluate


def _reachable(a: str, b: str, max_ops: int, alphabet: str) -> int | None:
    """Smallest number of single-character edits (<= max_ops) turning a into b."""
    frontier = {a}
    seen = {a}
    for k in range(max_ops + 1):
        if b in frontier:
            return k
        nxt = set()
        for s in frontier:
            for i in range(len(s) + 1):
                for c in alphabet:
                    nxt.add(s[:i] + c + s[i:])
                if i < len(s):
                    nxt.add(s[:i] + s[i + 1 :])
                    for c in alphabet:
                        nxt.add(s[:i] + c + s[i + 1 :])
        frontier = nxt - seen
        seen |= nxt
    return None


def test_edit_distance_examples():
    assert edit_distance("abc", "abc") == 0
    assert edit_distance("", "ab") == 2
    assert edit_distance("hello", "hallo") == 1
    assert _reachable("hello", "hallo", 2, "aehlo") == 1


@pytest.mark.parametrize("a,b", [("ab", "ba"), ("abc", "b"), ("", "ba"), ("aab", "abb"), ("kit", "sit")])
def test_edit_distance_matches_exhaustive_scripts(a, b):
    alphabet = "".join(sorted(set(a + b)))
    assert edit_distance(a, b) == _reachable(a, b, 3, alphabet)


words = st.text(alphabet="abc", max_size=8)


@given(words, words, words)
@settings(max_examples=300)
def test_edit_distance_is_a_metric(a, b, c):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_evaluate_perfect():
    r = evaluate(["ab", "cd"], ["ab", "cd"])
    assert (r.acc, r.ed1, r.cer, r.wer) == (1.0, 1.0, 0.0, 0.0)


def test_evaluate_hand_computed():
    r = evaluate(["hallo", "xyz"], ["hello", "abc"])
    assert r.acc == 0.0
    assert r.ed1 == 0.5
    assert r.cer == 0.5  # (1 + 3) / 8
    assert r.wer == 1.0


@given(st.lists(st.tuples(words, words), min_size=1, max_size=20))
def test_acc_le_ed1(pairs):
    preds, refs = zip(*pairs)
    r = evaluate(list(preds), list(refs))
    assert 0 <= r.acc <= r.ed1 <= 1
    assert r.wer + r.acc == pytest.approx(1.0)
    assert r.cer >= 0


def test_evaluate_errors_and_flags():
    with pytest.raises(ValueError):
        evaluate(["a"], ["a", "b"])
    with pytest.raises(ValueError):
        evaluate([], [])
    r = evaluate(["x", ""], ["", ""])
    assert r.n_empty_references == 2
    assert evaluate(["ABC"], ["abc"], case_sensitive=False).acc == 1.0
    assert evaluate(["ABC"], ["abc"]).acc == 0.0


def test_report_json_and_csv(tmp_path):
    r = evaluate(["ab"], ["ac"])
    text = r.to_json(tmp_path / "r.json")
    assert '"acc": 0.0' in text
    dump_errors(tmp_path / "e.csv", ["ab"], ["ac"])
    assert (tmp_path / "e.csv").read_text().splitlines()[1] == "0,ac,ab,1,0"
