"""Regulation-aware text front end: normalization, semantic-tuple
extraction, number protection, and BPE sub-word tokenization.

The BPE here keeps whitespace as its own atomic symbol and learns
merges strictly within words, so detokenization is a plain
concatenation of token surfaces. Numeric literals are protected: each
one is a single atomic token that merges can never split, and literals
unseen at vocabulary-build time map to [NUM] with the surface kept in
the sequence's protected spans.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from .errors import ContractError

__all__ = [
    "SemanticTuple",
    "NumericConstraint",
    "Vocab",
    "TokenSequence",
    "KnowledgeBase",
    "normalize",
    "protect_numbers",
    "parse_semantic_tuple",
    "build_vocab",
    "tokenize",
    "detokenize",
]

log = logging.getLogger(__name__)

KINDS = {"warning", "prohibition", "mandatory", "information", "unknown"}
SHAPES = {"circular", "triangular", "rectangular", "octagonal", "unknown"}
UNITS = {"km/h", "m", "t", "none"}

RESERVED = ("[CLS]", "[SEP]", "[PAD]", "[UNK]", "[NUM]")

_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")
_NUMBER_UNIT_RE = re.compile(r"(\d+(?:\.\d+)?)(?: (km/h|m|t)\b)?")
_DIGIT_LETTER_RE = re.compile(r"(\d)(?=[a-z])")
_LETTER_DIGIT_RE = re.compile(r"([a-z])(?=\d)")
_UNIT_CANON = [
    (re.compile(r"\bk(?:m[ /]?h|ph|mph)\b"), "km/h"),
    (re.compile(r"\btonnes?\b|\btons?\b"), "t"),
    (re.compile(r"\bmeters?\b|\bmetres?\b"), "m"),
]


# -- normalization and number protection ------------------------------------


def normalize(text: str) -> str:
    """Lowercase, detach glued number/unit pairs, canonicalize unit
    spellings, and collapse whitespace. Idempotent."""
    t = text.lower()
    t = _DIGIT_LETTER_RE.sub(r"\1 ", t)
    t = _LETTER_DIGIT_RE.sub(r"\1 ", t)
    t = " ".join(t.split())
    for rx, canon in _UNIT_CANON:
        t = rx.sub(canon, t)
    return t


def protect_numbers(text: str) -> tuple[str, list[tuple[int, int, str]]]:
    """Mark every maximal decimal literal as an atomic span.

    Returns the text unchanged plus spans of (start, end, literal);
    downstream BPE never places a token boundary inside a span.
    """
    spans = [(m.start(), m.end(), m.group(0)) for m in _NUMBER_RE.finditer(text)]
    return text, spans


# -- semantic tuples ---------------------------------------------------------


@dataclass(frozen=True)
class NumericConstraint:
    value: float
    unit: str = "none"

    def __post_init__(self):
        if not (self.value >= 0.0 and self.value == self.value):
            raise ContractError(f"numeric constraint must be finite and nonnegative: {self.value}")
        if self.unit not in UNITS:
            raise ContractError(f"unknown unit {self.unit!r}")


@dataclass(frozen=True)
class SemanticTuple:
    """Structured parse of a sign description."""

    kind: str = "unknown"
    shape: str = "unknown"
    color: str = "unknown"
    action: str | None = None
    numeric: NumericConstraint | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind {self.kind!r} outside {sorted(KINDS)}")
        if self.shape not in SHAPES:
            raise ContractError(f"shape {self.shape!r} outside {sorted(SHAPES)}")


@dataclass(frozen=True)
class _Rule:
    pattern: str
    field: str
    value: str
    priority: int
    regex: re.Pattern = None

    def __post_init__(self):
        object.__setattr__(self, "regex", re.compile(self.pattern))


class KnowledgeBase:
    """Priority-ordered regex rules for descriptions and category codes.

    Loaded from a JSON array of {pattern, field, value, priority}.
    Text-parsing rules use fields kind/shape/color/action; category-code
    expansion rules use code.* fields with backreference templates.
    """

    def __init__(self, rules):
        self.rules = sorted(rules, key=lambda r: (r.priority, r.pattern))
        self._by_field: dict[str, list[_Rule]] = {}
        for r in self.rules:
            self._by_field.setdefault(r.field, []).append(r)

    @classmethod
    def load(cls, path=None) -> "KnowledgeBase":
        if path is None:
            raw = resources.files("tsrmcl").joinpath("data/knowledge_base.json").read_text("utf-8")
        else:
            with open(path, encoding="utf-8") as fh:
                raw = fh.read()
        entries = json.loads(raw)
        rules = [
            _Rule(e["pattern"], e["field"], e["value"], int(e["priority"]))
            for e in entries
        ]
        return cls(rules)

    def first_match(self, fieldname: str, text: str) -> str | None:
        for rule in self._by_field.get(fieldname, ()):
            m = rule.regex.search(text)
            if m:
                return m.expand(rule.value)
        return None


def _parse_numeric(text: str) -> NumericConstraint | None:
    m = _NUMBER_UNIT_RE.search(text)
    if not m:
        return None
    return NumericConstraint(float(m.group(1)), m.group(2) or "none")


def parse_semantic_tuple(text: str, kb: KnowledgeBase) -> SemanticTuple:
    """Fill tuple fields by first-match priority rules; unmatched fields
    stay unknown/absent. Total: never raises on description text."""
    norm = normalize(text)
    return SemanticTuple(
        kind=kb.first_match("kind", norm) or "unknown",
        shape=kb.first_match("shape", norm) or "unknown",
        color=kb.first_match("color", norm) or "unknown",
        action=kb.first_match("action", norm),
        numeric=_parse_numeric(norm),
    )


# -- vocabulary --------------------------------------------------------------


@dataclass
class Vocab:
    tokens: list[str]
    merges: list[tuple[str, str]]
    reserved: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        missing = [t for t in RESERVED if t not in self.reserved]
        if missing:
            raise ContractError(f"vocab missing reserved tokens: {missing}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def cls_id(self) -> int:
        return self.reserved["[CLS]"]

    @property
    def sep_id(self) -> int:
        return self.reserved["[SEP]"]

    @property
    def pad_id(self) -> int:
        return self.reserved["[PAD]"]

    @property
    def unk_id(self) -> int:
        return self.reserved["[UNK]"]

    @property
    def num_id(self) -> int:
        return self.reserved["[NUM]"]

    def save(self, path) -> None:
        doc = {
            "tokens": self.tokens,
            "merges": [list(m) for m in self.merges],
            "reserved": self.reserved,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            tokens=list(doc["tokens"]),
            merges=[tuple(m) for m in doc["merges"]],
            reserved={k: int(v) for k, v in doc["reserved"].items()},
        )


@dataclass(frozen=True)
class TokenSequence:
    """[CLS] ... [SEP] token ids plus the protected numeric spans."""

    ids: tuple[int, ...]
    protected_spans: tuple[tuple[int, int, str], ...] = ()


def _word_symbols(word: str, word_start: int, spans) -> tuple[tuple[str, ...], tuple[bool, ...]]:
    """Split one word into (symbols, protected flags) respecting spans."""
    cuts = []
    for s, e, _ in spans:
        s -= word_start
        e -= word_start
        if 0 <= s and e <= len(word):
            cuts.append((s, e))
    syms: list[str] = []
    flags: list[bool] = []
    pos = 0
    for s, e in sorted(cuts):
        for ch in word[pos:s]:
            syms.append(ch)
            flags.append(False)
        syms.append(word[s:e])
        flags.append(True)
        pos = e
    for ch in word[pos:]:
        syms.append(ch)
        flags.append(False)
    return tuple(syms), tuple(flags)


def _pretokenize(norm: str, spans) -> list[tuple[tuple[str, ...], tuple[bool, ...]]]:
    """Words of a normalized text as symbol sequences with protection flags."""
    words = []
    pos = 0
    for word in norm.split(" "):
        if word:
            rel = [sp for sp in spans if pos <= sp[0] and sp[1] <= pos + len(word)]
            words.append(_word_symbols(word, pos, rel))
        pos += len(word) + 1
    return words


def _apply_merges(syms, flags, merges) -> list[str]:
    syms = list(syms)
    flags = list(flags)
    for a, b in merges:
        i = 0
        out_s: list[str] = []
        out_f: list[bool] = []
        while i < len(syms):
            if (
                i + 1 < len(syms)
                and syms[i] == a
                and syms[i + 1] == b
                and not flags[i]
                and not flags[i + 1]
            ):
                out_s.append(a + b)
                out_f.append(False)
                i += 2
            else:
                out_s.append(syms[i])
                out_f.append(flags[i])
                i += 1
        syms, flags = out_s, out_f
    return syms, flags


def build_vocab(corpus, target_size: int = 2048, number_protection: bool = True) -> Vocab:
    """Learn a BPE vocabulary over whitespace-pretokenized, number-protected
    text.

    Deterministic given the corpus: pair counts drive merge order, ties
    break lexicographically, merges stop below pair frequency 2, and the
    base symbol inventory is sorted. ``target_size`` caps the total token
    count (reserved + base symbols + merges); when it leaves no budget,
    zero merges are learned.
    """
    corpus = list(corpus)
    if not corpus:
        raise ContractError("build_vocab requires a non-empty corpus")
    if target_size <= len(RESERVED):
        raise ContractError(
            f"target_size {target_size} must exceed the reserved count {len(RESERVED)}"
        )

    word_freq: Counter = Counter()
    saw_space = False
    for line in corpus:
        norm = normalize(line)
        spans = protect_numbers(norm)[1] if number_protection else []
        if " " in norm:
            saw_space = True
        for seq in _pretokenize(norm, spans):
            word_freq[seq] += 1

    base: set[str] = {" "} if saw_space else set()
    for (syms, flags) in word_freq:
        base.update(syms)
    base_tokens = sorted(base)

    budget = target_size - len(RESERVED) - len(base_tokens)
    seqs = dict(word_freq)
    merges: list[tuple[str, str]] = []
    while budget > 0:
        pair_counts: Counter = Counter()
        for (syms, flags), f in seqs.items():
            for i in range(len(syms) - 1):
                if flags[i] or flags[i + 1]:
                    continue
                pair_counts[(syms[i], syms[i + 1])] += f
        if not pair_counts:
            break
        top = max(pair_counts.values())
        if top < 2:
            break
        best = min(p for p, c in pair_counts.items() if c == top)
        merges.append(best)
        budget -= 1
        new_seqs: dict = {}
        for (syms, flags), f in seqs.items():
            ns, nf = _apply_merges(syms, flags, [best])
            key = (tuple(ns), tuple(nf))
            new_seqs[key] = new_seqs.get(key, 0) + f
        seqs = new_seqs

    tokens = list(RESERVED) + base_tokens + [a + b for a, b in merges]
    reserved = {t: i for i, t in enumerate(RESERVED)}
    return Vocab(tokens=tokens, merges=merges, reserved=reserved)


def tokenize(text: str, vocab: Vocab, number_protection: bool = True) -> TokenSequence:
    """[CLS] + BPE tokens + [SEP]. Protected numeric spans come out as
    their literal token when in vocab, else [NUM]; the literal always
    survives in ``protected_spans``."""
    norm = normalize(text)
    spans = tuple(protect_numbers(norm)[1]) if number_protection else ()
    ids: list[int] = [vocab.cls_id]
    space_id = vocab.token_to_id.get(" ", vocab.unk_id)
    first = True
    pos = 0
    for word in norm.split(" "):
        if not first:
            ids.append(space_id)
        first = False
        if word:
            rel = [sp for sp in spans if pos <= sp[0] and sp[1] <= pos + len(word)]
            syms, flags = _word_symbols(word, pos, rel)
            syms, flags = _apply_merges(syms, flags, vocab.merges)
            for sym, protected in zip(syms, flags):
                if protected:
                    ids.append(vocab.token_to_id.get(sym, vocab.num_id))
                else:
                    ids.append(vocab.token_to_id.get(sym, vocab.unk_id))
        pos += len(word) + 1
    if norm == "":
        ids = [vocab.cls_id]
    ids.append(vocab.sep_id)
    return TokenSequence(ids=tuple(ids), protected_spans=spans)


def detokenize(seq: TokenSequence, vocab: Vocab) -> str:
    """Reproduce the normalized text; [NUM] placeholders resolve from the
    protected spans in order."""
    unknown_literals = [
        lit for (_, _, lit) in seq.protected_spans if lit not in vocab.token_to_id
    ]
    parts: list[str] = []
    k = 0
    skip = {vocab.cls_id, vocab.sep_id, vocab.pad_id}
    for tid in seq.ids:
        if tid in skip:
            continue
        if tid == vocab.num_id:
            parts.append(unknown_literals[k])
            k += 1
        else:
            parts.append(vocab.tokens[tid])
    return "".join(parts)
