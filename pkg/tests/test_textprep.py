import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adfuse.textprep import (
    CleaningRules,
    OcrParagraph,
    TextPrepError,
    clean_label,
    clean_labels_file,
    group_blocks,
    read_ocr_file,
    select_ground_truth,
)


def para(text, size, conf, idx):
    return OcrParagraph(text=text, font_size=size, confidence=conf, order_index=idx)


# -- block grouping -------------------------------------------------------------


def test_similar_fonts_merge():
    blocks = group_blocks([para("buy", 10.0, 0.9, 0), para("now", 10.5, 0.9, 1)])
    assert blocks == ["buy now"]


def test_low_confidence_dropped():
    assert group_blocks([para("blurry", 12.0, 0.5, 0)]) == []


def test_dissimilar_fonts_split():
    blocks = group_blocks([para("HEADLINE", 20.0, 0.95, 0), para("small print", 10.0, 0.95, 1)])
    assert blocks == ["HEADLINE", "small print"]


def test_threshold_exactly_twenty_percent():
    # 8 vs 10: gap 20% of the larger -> merged; 7.9 vs 10 -> split
    assert group_blocks([para("a", 8.0, 0.9, 0), para("b", 10.0, 0.9, 1)]) == ["a b"]
    assert group_blocks([para("a", 7.9, 0.9, 0), para("b", 10.0, 0.9, 1)]) == ["a", "b"]


def test_confidence_weighted_by_length():
    # long confident text outweighs a short bad paragraph
    blocks = group_blocks([para("x" * 40, 10.0, 0.75, 0), para("!", 10.0, 0.0, 1)])
    assert blocks == ["x" * 40 + " !"]
    # short confident text cannot rescue a long bad one
    assert group_blocks([para("x" * 40, 10.0, 0.4, 0), para("ok", 10.0, 1.0, 1)]) == []


def test_order_and_adjacency_preserved():
    blocks = group_blocks(
        [para("one", 10, 0.9, 0), para("two", 30, 0.9, 2), para("three", 10, 0.9, 5)]
    )
    assert blocks == ["one", "two", "three"]
    with pytest.raises(TextPrepError):
        group_blocks([para("a", 10, 0.9, 1), para("b", 10, 0.9, 1)])


def test_empty_input():
    assert group_blocks([]) == []


# -- label cleaning ---------------------------------------------------------------


def test_invalid_answers_rejected():
    rules = CleaningRules()
    assert clean_label("I don't know", rules) is None
    assert clean_label("  not an ad ", rules) is None
    assert clean_label("NOT SURE", rules) is None


def test_typo_repair():
    rules = CleaningRules()
    out = clean_label("I should buy X becasue it is fast", rules)
    assert out == "I should buy X because it is fast"
    assert clean_label("Becaues of this, I should buy X because great shoes", rules).startswith(
        "Because"
    )


def test_missing_because_rejected():
    rules = CleaningRules()
    assert clean_label("I should buy these shoes", rules) is None
    assert clean_label("I should buy these shoes because they last", rules) is not None


def test_noninformative_nouns_rejected():
    rules = CleaningRules()
    assert clean_label("I should buy this product because it works", rules) is None
    assert clean_label("I should buy this thing because it works", rules) is None
    assert clean_label("I should buy this camera because it works", rules) is not None


def test_whitespace_normalized():
    rules = CleaningRules()
    out = clean_label("  I   should\tbuy  shoes   because comfy ", rules)
    assert out == "I should buy shoes because comfy"


def test_clean_label_idempotent_fixed_cases():
    rules = CleaningRules()
    cases = [
        "I should buy X becasue it is fast",
        "I should drink Brand because it refreshes",
        "  spaced   out  because camera ",
    ]
    for text in cases:
        once = clean_label(text, rules)
        assert once is not None
        assert clean_label(once, rules) == once


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdefgh XY.,!because", max_size=50))
def test_clean_label_idempotent_property(text):
    rules = CleaningRules()
    once = clean_label(text, rules)
    if once is not None:
        assert clean_label(once, rules) == once


def test_typo_map_keys_must_be_lowercase():
    with pytest.raises(TextPrepError):
        CleaningRules(typo_map={"Becasue": "because"})


# -- ground truth selection -------------------------------------------------------


def test_select_ground_truth_basics():
    assert select_ground_truth(["only"], seed=0) == "only"
    texts = ["a", "b", "c", "d"]
    assert select_ground_truth(texts, seed=9) == select_ground_truth(texts, seed=9)
    with pytest.raises(TextPrepError):
        select_ground_truth([], seed=0)


def test_select_ground_truth_uniform_over_seeds():
    texts = ["a", "b", "c", "d"]
    counts = {t: 0 for t in texts}
    for seed in range(10_000):
        counts[select_ground_truth(texts, seed)] += 1
    for c in counts.values():
        assert abs(c / 10_000 - 0.25) < 0.02


# -- file plumbing ------------------------------------------------------------------


def test_ocr_file_round_trip(tmp_path):
    path = tmp_path / "ocr.jsonl"
    rows = [
        {
            "image_id": "img1",
            "paragraphs": [
                {"text": "BUY NOW", "font_size": 20.0, "confidence": 0.95, "order_index": 0},
                {"text": "limited", "font_size": 19.0, "confidence": 0.9, "order_index": 1},
            ],
        }
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    parsed = read_ocr_file(path)
    assert parsed[0][0] == "img1"
    assert group_blocks(parsed[0][1]) == ["BUY NOW limited"]
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"image_id": "x"}\n')
    with pytest.raises(TextPrepError):
        read_ocr_file(bad)


def test_clean_labels_file(tmp_path):
    rules = CleaningRules(seed=3)
    labels = {
        "img1": ["I should buy shoes because comfy", "not an ad"],
        "img2": ["no reason given here"],
    }
    out = tmp_path / "labels.jsonl"
    stats = clean_labels_file(labels, rules, out)
    assert stats == {"images": 2, "kept": 1, "all_rejected": 1}
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert lines[0]["image_id"] == "img1"
    assert lines[0]["ground_truth"] == "I should buy shoes because comfy"
    assert lines[0]["rejected"] == ["not an ad"]
    assert lines[1]["ground_truth"] is None
