import logging

import pytest

from src.errors import ParseError
from src.g2p import compile_rules, load_rules, phonemize
from src.langcode import LangCode

from conftest import FIXTURES


@pytest.fixture
def ca_rules(ca_rules_path):
    return load_rules(ca_rules_path)


@pytest.mark.parametrize("word, expected", [
    ("quatre", "kwatrə"),
    ("casa", "kazə"),
    ("xarxa", "ʃarksə"),
    ("gerro", "ʒeru"),
    ("hola", "olə"),
    ("nyap", "ɲap"),
    ("cel", "sel"),
])
def test_catalan_words(ca_rules, word, expected):
    assert phonemize(word, ca_rules) == expected


def test_sentence_is_phonemized_per_token(ca_rules):
    assert phonemize("la  casa\tquatre", ca_rules) == "lə kazə kwatrə"
    assert phonemize("", ca_rules) == ""


def test_header_sets_language(ca_rules):
    assert ca_rules.language == LangCode("ca")
    assert load_rules(FIXTURES / "sister_oc.rules").language == LangCode("oc")
    assert load_rules(FIXTURES / "sister_oc.rules", language="gl").language == LangCode("gl")


def test_first_matching_rule_wins():
    rules = compile_rules("a -> b\na -> c", language="xx")
    assert phonemize("aa", rules) == "bb"


def test_single_pass_does_not_reapply():
    rules = compile_rules("a -> b\nb -> c", language="xx")
    assert phonemize("ab", rules) == "bc"


def test_contexts_are_not_consumed():
    rules = compile_rules("s / a _ a -> z", language="xx")
    assert phonemize("casasa", rules) == "cazaza"


def test_word_boundaries():
    rules = compile_rules("x / # _ -> S\ne / _ # -> E\nx -> ks", language="xx")
    assert phonemize("xexe", rules) == "SeksE"
    assert phonemize("e", rules) == "E"


def test_deletion_rule():
    rules = compile_rules("h ->", language="xx")
    assert phonemize("hahah", rules) == "aa"


def test_case_folding_and_preservation():
    rules = compile_rules("c -> k", language="xx")
    assert phonemize("Cap Nit", rules) == "kap nit"
    assert phonemize("Cap Nit", rules, preserve_case=True) == "kap Nit"


def test_sister_language_rewrite():
    rules = load_rules(FIXTURES / "sister_oc.rules")
    assert phonemize("vell casa", rules) == "belh casa"


@pytest.mark.parametrize("text, line_no", [
    ("a -> b\nfoo", 2),
    ("a b -> c", 1),
    ("a -> b c", 1),
    ("a / x _ y _ z -> b", 1),
    ("# language: xx\n\n -> b", 3),
    ("a / x# _ -> b", 1),
])
def test_parse_errors_carry_line_numbers(text, line_no):
    with pytest.raises(ParseError) as excinfo:
        compile_rules(text, language="xx")
    assert excinfo.value.line_no == line_no


def test_rules_without_language_stay_unbound():
    rules = compile_rules("qu -> k")
    assert len(rules) == 1
    assert rules.language is None
    assert phonemize("quatre", rules) == "katre"
    assert rules.bind("ca").language == LangCode("ca")
    assert rules.bind("ca").rules == rules.rules


def test_context_rule_order_decides_the_match():
    assert phonemize("cec", compile_rules("c / _ e -> s\nc -> k", language="xx")) == "sek"
    assert phonemize("cec", compile_rules("c -> k\nc / _ e -> s", language="xx")) == "kek"


def test_duplicate_and_shadowed_rules_warn(caplog):
    with caplog.at_level(logging.WARNING, logger="src.g2p"):
        rules = compile_rules("a -> b\na -> b\nab -> c", language="xx")
    assert len(rules) == 2
    assert "Duplicate rule" in caplog.text
    assert "shadowed" in caplog.text


def test_missing_rule_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_rules(tmp_path / "none.rules")
