"""
Indicator features built from raw text and metadata.

Every indicator is a pure function of the texts (or labels) and comes with
the serialized rule that produced it, so a regression report can record
exactly what was regressed on.
"""

import json
import re
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ValidationError

_LIST_LINE = re.compile(r"^[ \t]*(?:[-*] |\d+[.)] )", re.MULTILINE)


@dataclass(frozen=True)
class IndicatorFeature:
    name: str
    values: np.ndarray
    definition: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=int).ravel()
        if not np.isin(values, (0, 1)).all():
            raise ValidationError(f"indicator {self.name!r} has values outside {{0, 1}}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.size


# ---------------------------------------------------------------- rules


@dataclass(frozen=True)
class LabelRule:
    targets: tuple
    kind = "label"

    def __post_init__(self):
        targets = (self.targets,) if isinstance(self.targets, str) else tuple(self.targets)
        if not targets:
            raise ValidationError("label rule needs at least one target label")
        object.__setattr__(self, "targets", targets)


@dataclass(frozen=True)
class PhraseRule:
    phrases: tuple
    min_hits: int = 1
    case_sensitive: bool = False
    count_lists_as_hit: bool = False
    kind = "phrase"

    def __post_init__(self):
        object.__setattr__(self, "phrases", tuple(self.phrases))
        if not self.phrases:
            raise ValidationError("phrase rule needs at least one phrase")
        if self.min_hits < 1:
            raise ValidationError(f"min_hits must be >= 1, got {self.min_hits}")


@dataclass(frozen=True)
class WordRule:
    words: tuple
    kind = "word"

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if not self.words:
            raise ValidationError("word rule needs at least one word")


@dataclass(frozen=True)
class CountRule:
    words: tuple
    min_count: int
    kind = "count"

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if not self.words:
            raise ValidationError("count rule needs at least one word")
        if self.min_count < 1:
            raise ValidationError(f"min_count must be >= 1, got {self.min_count}")


@dataclass(frozen=True)
class LengthRule:
    threshold_chars: int
    kind = "length"

    def __post_init__(self):
        if self.threshold_chars <= 0:
            raise ValidationError(f"threshold must be > 0, got {self.threshold_chars}")


@dataclass(frozen=True)
class SpecialCharRule:
    threshold_ratio: float
    kind = "special_char_ratio"

    def __post_init__(self):
        if not 0 < self.threshold_ratio < 1:
            raise ValidationError(f"threshold ratio must be in (0, 1), got {self.threshold_ratio}")


@dataclass(frozen=True)
class ListRule:
    kind = "list"


RULE_KINDS = {
    cls.kind: cls
    for cls in (LabelRule, PhraseRule, WordRule, CountRule, LengthRule, SpecialCharRule, ListRule)
}


def rule_to_dict(rule):
    out = {"kind": rule.kind}
    out.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(rule).items()})
    return out


def rule_from_dict(data):
    data = dict(data)
    try:
        cls = RULE_KINDS[data.pop("kind")]
    except KeyError as err:
        raise ValidationError(f"unknown or missing rule kind: {err}") from None
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unexpected fields for {cls.kind} rule: {sorted(unknown)}")
    return cls(**data)


def rule_to_json(rule):
    return json.dumps(rule_to_dict(rule), sort_keys=True)


def rule_from_json(text):
    return rule_from_dict(json.loads(text))


# -------------------------------------------------------------- presets

STACKEXCHANGE_PHRASES = PhraseRule(
    phrases=(
        "alternatively",
        "example",
        "helps",
        "if you have any questions",
        "worth mentioning",
        "additionally",
        "note",
        "in this case",
        "apologize",
        "you are correct",
        "ultimately",
        "this shows",
        "in conclusion",
        ":\n",
        "AI language model",
    ),
    min_hits=2,
    count_lists_as_hit=True,
)

STACKEXCHANGE_PHRASES_NO_AI_MODEL = PhraseRule(
    phrases=tuple(p for p in STACKEXCHANGE_PHRASES.phrases if p != "AI language model"),
    min_hits=2,
    count_lists_as_hit=True,
)

ARXIV_FIVE_WORDS = WordRule(
    words=(
        "significant",
        "important",
        "contribution",
        "innovation",
        "valuable",
        "insight",
        "demonstrates",
        "understanding",
    )
)

ARXIV_ECON_WORDS = WordRule(
    words=("innovation", "valuable", "insight", "demonstrates", "understanding", "implication")
)

# more than four occurrences
WE_OUR_COUNT = CountRule(words=("we", "our"), min_count=5)

LENGTH_1500 = LengthRule(threshold_chars=1500)

PRESETS = {
    "stackexchange_phrases": STACKEXCHANGE_PHRASES,
    "stackexchange_phrases_no_ai_model": STACKEXCHANGE_PHRASES_NO_AI_MODEL,
    "arxiv_five_words": ARXIV_FIVE_WORDS,
    "arxiv_econ_words": ARXIV_ECON_WORDS,
    "we_our_count": WE_OUR_COUNT,
    "length_1500": LENGTH_1500,
    "lists": ListRule(),
}


# ------------------------------------------------------------- matchers


def _word_pattern(words):
    alternatives = "|".join(re.escape(w) for w in words)
    return re.compile(rf"\b(?:{alternatives})\b", re.IGNORECASE)


def has_list(text):
    """True when at least two lines start like a list item."""
    return len(_LIST_LINE.findall(text or "")) >= 2


def phrase_hits(text, rule):
    """Number of distinct phrases found, plus one for a list if enabled."""
    text = text or ""
    haystack = text if rule.case_sensitive else text.lower()
    hits = 0
    for phrase in dict.fromkeys(rule.phrases):
        needle = phrase if rule.case_sensitive else phrase.lower()
        if needle in haystack:
            hits += 1
    if rule.count_lists_as_hit and has_list(text):
        hits += 1
    return hits


def special_char_ratio(text):
    text = text or ""
    special = sum(1 for c in text if not (c.isalnum() or c == " "))
    return special / max(1, len(text))


def normalized_length(text):
    """Character count after collapsing whitespace runs to single spaces."""
    return len(" ".join((text or "").split()))


# ----------------------------------------------------------- indicators


def label_indicator(d, target):
    """
    1 where the sample label is in ``target``.

    Parameters
    ----------
    d : LabeledDataset
    target : str or Iterable[str]

    Returns
    -------
    IndicatorFeature
    """
    rule = LabelRule(target)
    unknown = [t for t in rule.targets if t not in d.class_names]
    if unknown:
        raise ValidationError(f"unknown label(s) {unknown}; known: {list(d.class_names)}")
    wanted = set(rule.targets)
    values = [1 if label in wanted else 0 for label in d.labels]
    return IndicatorFeature(f"label in {list(rule.targets)}", values, rule_to_dict(rule))


def phrase_indicator(texts, rule):
    values = [1 if phrase_hits(t, rule) >= rule.min_hits else 0 for t in texts]
    return IndicatorFeature(f"phrases (>= {rule.min_hits})", values, rule_to_dict(rule))


def word_indicator(texts, words):
    rule = words if isinstance(words, WordRule) else WordRule(words)
    pattern = _word_pattern(rule.words)
    values = [1 if pattern.search(t or "") else 0 for t in texts]
    return IndicatorFeature("word appearance", values, rule_to_dict(rule))


def count_indicator(texts, word_set, min_count=None):
    if isinstance(word_set, CountRule):
        rule = word_set
    else:
        rule = CountRule(word_set, min_count)
    pattern = _word_pattern(rule.words)
    values = [1 if len(pattern.findall(t or "")) >= rule.min_count else 0 for t in texts]
    return IndicatorFeature(
        f"count of {list(rule.words)} >= {rule.min_count}", values, rule_to_dict(rule)
    )


def length_indicator(texts, threshold_chars):
    rule = LengthRule(threshold_chars)
    values = [1 if normalized_length(t) < rule.threshold_chars else 0 for t in texts]
    return IndicatorFeature(
        f"length < {rule.threshold_chars} chrs.", values, rule_to_dict(rule)
    )


def special_char_ratio_indicator(texts, threshold_ratio):
    rule = SpecialCharRule(threshold_ratio)
    values = [1 if special_char_ratio(t) > rule.threshold_ratio else 0 for t in texts]
    return IndicatorFeature("special char ratio", values, rule_to_dict(rule))


def list_indicator(texts):
    values = [1 if has_list(t) else 0 for t in texts]
    return IndicatorFeature("lists", values, rule_to_dict(ListRule()))


def build_indicator(rule, d):
    """Evaluate any rule against a LabeledDataset."""
    texts = d.texts
    if isinstance(rule, LabelRule):
        return label_indicator(d, rule.targets)
    if isinstance(rule, PhraseRule):
        return phrase_indicator(texts, rule)
    if isinstance(rule, WordRule):
        return word_indicator(texts, rule)
    if isinstance(rule, CountRule):
        return count_indicator(texts, rule)
    if isinstance(rule, LengthRule):
        return length_indicator(texts, rule.threshold_chars)
    if isinstance(rule, SpecialCharRule):
        return special_char_ratio_indicator(texts, rule.threshold_ratio)
    if isinstance(rule, ListRule):
        return list_indicator(texts)
    raise ValidationError(f"not an indicator rule: {rule!r}")
