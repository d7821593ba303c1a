"""Review ingestion: XML parsing, tokenization, BIO tagging, feature annotation.

Everything here is pure: the same bytes always produce the same examples.
"""

from __future__ import annotations

import json
import re
import string
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    AlignmentError,
    ContractError,
    CorpusParseError,
    EmptyInputError,
    SchemaError,
)

POLARITIES = ("positive", "negative", "neutral")

POS_TAGS = ("DET", "ADP", "CONJ", "PRON", "VERB", "ADJ", "ADV", "NOUN", "NUM", "PUNCT", "OTHER")
POS_INDEX = {t: i for i, t in enumerate(POS_TAGS)}

DEP_RELATIONS = (
    "root", "det", "nsubj", "dobj", "amod", "advmod", "prep", "pobj",
    "conj", "cc", "compound", "punct", "aux", "cop", "dep",
)
DEP_REL_INDEX = {r: i for i, r in enumerate(DEP_RELATIONS)}
DEP_OFFSET_CLIP = 4
DEP_DIM = len(DEP_RELATIONS) + (2 * DEP_OFFSET_CLIP + 1)  # 15 relations + 9 offset buckets


@dataclass
class AspectAnnotation:
    """One aspect term with character offsets into its sentence."""

    term: str
    char_from: int
    char_to: int
    polarity: str
    token_span: tuple[int, int] | None = None  # inclusive token indices once projected


@dataclass
class TokenizedExample:
    """A tokenized, BIO-tagged, feature-annotated review sentence."""

    tokens: list[str]
    char_spans: list[tuple[int, int]]
    pos_ids: list[int]
    dep_features: np.ndarray  # (n, DEP_DIM) float64
    bio_tags: list[str]
    aspects: list[AspectAnnotation] = field(default_factory=list)
    text: str = ""

    def __len__(self) -> int:
        return len(self.tokens)

    def validate(self) -> None:
        n = len(self.tokens)
        if n < 1:
            raise ContractError("example must contain at least one token")
        if not (len(self.char_spans) == len(self.pos_ids) == len(self.bio_tags) == n
                and self.dep_features.shape == (n, DEP_DIM)):
            raise ContractError("per-token sequences disagree in length")
        prev = "O"
        for tag in self.bio_tags:
            if tag not in ("B", "I", "O"):
                raise ContractError(f"invalid BIO tag {tag!r}")
            if tag == "I" and prev == "O":
                raise ContractError("I tag follows O: invalid BIO sequence")
            prev = tag
        for asp in self.aspects:
            if asp.token_span is None:
                raise ContractError(f"aspect {asp.term!r} lacks a token-span projection")
            s, e = asp.token_span
            if not (0 <= s <= e < n):
                raise ContractError(f"aspect {asp.term!r} projects outside the sentence")


@dataclass
class DatasetSummary:
    """Counts printed after ingestion; mirrors the reviews/aspect-polarity table."""

    review_count: int = 0
    aspect_counts: dict[str, int] = field(default_factory=lambda: {p: 0 for p in POLARITIES})
    skipped: int = 0

    def __add__(self, other: "DatasetSummary") -> "DatasetSummary":
        merged = DatasetSummary(self.review_count + other.review_count, skipped=self.skipped + other.skipped)
        for p in POLARITIES:
            merged.aspect_counts[p] = self.aspect_counts[p] + other.aspect_counts[p]
        return merged


# -- tokenization ------------------------------------------------------------

_PUNCT = set(string.punctuation)
_NUM_RE = re.compile(r"^\d+([.,/]\d+)*%?$")


def tokenize(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Whitespace split, then detach edge punctuation and split words on hyphens.

    Tokens come back lowercased for vocabulary lookup; spans index the
    original text, so surfaces can always be recovered.
    """
    if not text.strip():
        raise EmptyInputError("cannot tokenize whitespace-only text")
    tokens: list[str] = []
    spans: list[tuple[int, int]] = []

    def emit(start: int, end: int) -> None:
        tokens.append(text[start:end].lower())
        spans.append((start, end))

    for m in re.finditer(r"\S+", text):
        lo, hi = m.start(), m.end()
        while lo < hi and text[lo] in _PUNCT and text[lo] != "-":
            emit(lo, lo + 1)
            lo += 1
        trailing: list[tuple[int, int]] = []
        while hi > lo and text[hi - 1] in _PUNCT and text[hi - 1] != "-":
            trailing.append((hi - 1, hi))
            hi -= 1
        # split the remaining core on hyphens, keeping them as tokens
        pos = lo
        while pos < hi:
            nxt = text.find("-", pos, hi)
            if nxt == -1:
                emit(pos, hi)
                break
            if nxt > pos:
                emit(pos, nxt)
            emit(nxt, nxt + 1)
            pos = nxt + 1
        for s, e in reversed(trailing):
            emit(s, e)
    return tokens, spans


# -- BIO projection -----------------------------------------------------------


def project_aspect(spans: list[tuple[int, int]], aspect: AspectAnnotation) -> tuple[int, int]:
    """Inclusive token-index span of the tokens overlapping the aspect's characters."""
    hit = [i for i, (lo, hi) in enumerate(spans)
           if lo < aspect.char_to and hi > aspect.char_from]
    if not hit:
        raise AlignmentError(
            f"aspect {aspect.term!r} at [{aspect.char_from},{aspect.char_to}) overlaps no token"
        )
    return hit[0], hit[-1]


def char_span_to_bio(spans: list[tuple[int, int]], aspects: list[AspectAnnotation]) -> list[str]:
    """Project aspect character spans onto tokens as B/I/O tags.

    Earlier-starting aspects win overlaps; an aspect whose tokens were all
    claimed already is dropped from the tagging.
    """
    tags = ["O"] * len(spans)
    for asp in sorted(aspects, key=lambda a: (a.char_from, a.char_to)):
        first, last = project_aspect(spans, asp)
        start = first
        while start <= last and tags[start] != "O":
            start += 1
        if start > last:
            continue
        tags[start] = "B"
        for i in range(start + 1, last + 1):
            if tags[i] != "O":
                break
            tags[i] = "I"
    return tags


# -- part-of-speech tagging -----------------------------------------------------

_LEXICON = {
    "DET": {"the", "a", "an", "this", "that", "these", "those", "every", "each",
            "some", "any", "no", "all", "both", "its", "their", "my", "your", "our", "his", "her"},
    "ADP": {"in", "on", "at", "of", "to", "for", "with", "from", "by", "about",
            "into", "over", "under", "after", "before", "between", "during", "without"},
    "CONJ": {"and", "but", "or", "nor", "so", "yet", "because", "although", "while", "if"},
    "PRON": {"i", "you", "he", "she", "it", "we", "they", "me", "him", "them",
             "us", "who", "what", "which", "myself", "itself"},
    "VERB": {"is", "was", "are", "were", "be", "been", "being", "am", "do", "does",
             "did", "have", "has", "had", "will", "would", "can", "could", "should",
             "may", "might", "must", "get", "got", "go", "went", "gave", "give",
             "ordered", "came", "come", "sat", "tried", "enjoyed", "like", "liked", "love", "loved"},
    "ADV": {"not", "very", "too", "quite", "really", "never", "always", "often",
            "here", "there", "just", "still", "also", "again", "incredibly"},
    "ADJ": {"good", "bad", "great", "nice", "new", "old", "hot", "cold", "fresh",
            "slow", "fast", "cheap", "friendly", "rude", "tasty", "bland", "okay",
            "average", "tender", "excellent", "fantastic", "terrible", "awful",
            "wonderful", "disappointing", "ordinary", "acceptable", "delicious", "stale", "noisy", "cozy"},
}

_SUFFIX_RULES = (
    ("ly", "ADV"),
    ("ing", "VERB"), ("ed", "VERB"), ("ize", "VERB"), ("ise", "VERB"), ("ify", "VERB"),
    ("ous", "ADJ"), ("ful", "ADJ"), ("able", "ADJ"), ("ible", "ADJ"), ("ive", "ADJ"),
    ("less", "ADJ"), ("ish", "ADJ"),
    ("ness", "NOUN"), ("ment", "NOUN"), ("tion", "NOUN"), ("sion", "NOUN"),
    ("ity", "NOUN"), ("ance", "NOUN"), ("ence", "NOUN"), ("ship", "NOUN"), ("hood", "NOUN"),
)


def pos_tag_word(token: str) -> str:
    """Coarse tag for one lowercased token; unknown words default to NOUN."""
    if all(c in _PUNCT for c in token):
        return "PUNCT"
    if _NUM_RE.match(token):
        return "NUM"
    for tag, words in _LEXICON.items():
        if token in words:
            return tag
    if not token.isalpha():
        return "OTHER"
    for suffix, tag in _SUFFIX_RULES:
        if len(token) > len(suffix) + 1 and token.endswith(suffix):
            return tag
    return "NOUN"


def pos_tag(tokens: list[str]) -> list[int]:
    if not tokens:
        raise EmptyInputError("cannot tag an empty token sequence")
    return [POS_INDEX[pos_tag_word(t)] for t in tokens]


# -- dependency features ----------------------------------------------------------


def encode_dep_row(head_offset: int, relation: str) -> np.ndarray:
    vec = np.zeros(DEP_DIM)
    vec[DEP_REL_INDEX.get(relation, DEP_REL_INDEX["dep"])] = 1.0
    bucket = int(np.clip(head_offset, -DEP_OFFSET_CLIP, DEP_OFFSET_CLIP))
    vec[len(DEP_RELATIONS) + bucket + DEP_OFFSET_CLIP] = 1.0
    return vec


def load_dep_features(tokens: list[str], rows: list[tuple[str, int, str]] | None) -> np.ndarray:
    """Per-token syntactic feature vectors; zero-filled when no parse is supplied."""
    n = len(tokens)
    if rows is None:
        return np.zeros((n, DEP_DIM))
    if len(rows) != n:
        raise AlignmentError(f"dependency rows ({len(rows)}) do not match token count ({n})")
    return np.stack([encode_dep_row(off, rel) for _, off, rel in rows])


def read_dep_file(path: str) -> list[list[tuple[str, int, str]]]:
    """Companion parse file: tab-separated token/head_offset/relation rows,
    blank line between sentences."""
    sentences: list[list[tuple[str, int, str]]] = []
    current: list[tuple[str, int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                if current:
                    sentences.append(current)
                    current = []
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise CorpusParseError(f"expected 3 tab-separated columns, got {len(cols)}", line=lineno, column=1)
            try:
                offset = int(cols[1])
            except ValueError as exc:
                raise CorpusParseError(f"head offset {cols[1]!r} is not an integer", line=lineno, column=2) from exc
            current.append((cols[0], offset, cols[2]))
    if current:
        sentences.append(current)
    return sentences


# -- SemEval XML -------------------------------------------------------------------


def _require_attr(el: ET.Element, name: str) -> str:
    value = el.get(name)
    if value is None:
        raise SchemaError(f"element <{el.tag}> is missing required attribute {name!r}")
    return value


def _aspect_from_element(el: ET.Element, term_attr: str, text: str,
                         summary: DatasetSummary) -> AspectAnnotation | None:
    term = _require_attr(el, term_attr)
    polarity = _require_attr(el, "polarity")
    if term == "NULL" or not term.strip():
        return None
    if polarity not in POLARITIES:
        summary.skipped += 1
        return None
    char_from = int(_require_attr(el, "from"))
    char_to = int(_require_attr(el, "to"))
    if not (0 <= char_from < char_to <= len(text)):
        raise SchemaError(
            f"aspect {term!r} has offsets [{char_from},{char_to}) outside its sentence"
        )
    sliced = " ".join(text[char_from:char_to].split())
    if sliced.lower() != " ".join(term.split()).lower():
        raise AlignmentError(
            f"aspect {term!r} does not match its sentence slice {text[char_from:char_to]!r}"
        )
    summary.aspect_counts[polarity] += 1
    return AspectAnnotation(term, char_from, char_to, polarity)


def parse_semeval_xml(data: bytes | str, schema: str):
    """Parse review XML into (sentence text, aspect annotations) entries.

    `schema` is "sem14" (aspectTerm elements) or "sem16" (Opinion targets,
    also used for the 2015 layout). Annotations with a polarity outside
    positive/negative/neutral are dropped and counted in the summary's
    `skipped` tally; NULL or empty targets are dropped silently.
    """
    if schema not in ("sem14", "sem16"):
        raise ContractError(f"unknown schema {schema!r}; expected sem14 or sem16")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, column = exc.position
        raise CorpusParseError(f"malformed XML: {exc.msg.split(':')[0]}", line=line, column=column) from exc

    entries: list[tuple[str, list[AspectAnnotation]]] = []
    summary = DatasetSummary()

    def handle_sentence(sent: ET.Element, container: str, element: str, term_attr: str) -> None:
        text_el = sent.find("text")
        if text_el is None or text_el.text is None:
            raise SchemaError("element <sentence> is missing required child <text>")
        text = text_el.text
        aspects: list[AspectAnnotation] = []
        block = sent.find(container)
        if block is not None:
            for el in block.findall(element):
                asp = _aspect_from_element(el, term_attr, text, summary)
                if asp is not None:
                    aspects.append(asp)
        entries.append((text, aspects))

    if schema == "sem14":
        if root.tag != "sentences":
            raise SchemaError(f"expected <sentences> root, found <{root.tag}>")
        for sent in root.findall("sentence"):
            handle_sentence(sent, "aspectTerms", "aspectTerm", "term")
            summary.review_count += 1
    else:
        if root.tag != "Reviews":
            raise SchemaError(f"expected <Reviews> root, found <{root.tag}>")
        for review in root.findall("Review"):
            summary.review_count += 1
            for sent in review.iter("sentence"):
                handle_sentence(sent, "Opinions", "Opinion", "target")
    return entries, summary


# -- example assembly ---------------------------------------------------------------


def make_example(text: str, aspects: list[AspectAnnotation],
                 dep_rows: list[tuple[str, int, str]] | None = None) -> TokenizedExample:
    """Tokenize a sentence and project its annotations into a TokenizedExample."""
    tokens, spans = tokenize(text)
    projected = []
    for asp in aspects:
        span = project_aspect(spans, asp)
        projected.append(AspectAnnotation(asp.term, asp.char_from, asp.char_to, asp.polarity, span))
    ex = TokenizedExample(
        tokens=tokens,
        char_spans=spans,
        pos_ids=pos_tag(tokens),
        dep_features=load_dep_features(tokens, dep_rows),
        bio_tags=char_span_to_bio(spans, aspects),
        aspects=projected,
        text=text,
    )
    ex.validate()
    return ex


# -- synthetic corpus ----------------------------------------------------------------

ASPECT_NOUNS = (
    "steak", "service", "pasta", "waiter", "keyboard", "dessert",
    "battery life", "wine list", "screen resolution", "boot time",
    "side dishes", "customer support",
)

SENTIMENT_ADJECTIVES = {
    "positive": ("great", "excellent", "fantastic", "tasty", "friendly", "wonderful"),
    "negative": ("terrible", "awful", "slow", "rude", "bland", "disappointing"),
    "neutral": ("okay", "average", "ordinary", "acceptable"),
}

_INTENSIFIERS = ("really", "quite", "very", "incredibly")
_TWO_ASPECT_RATE = 0.5
_INTENSIFIER_RATE = 0.3


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def synth_corpus(seed: int, size: int) -> list[TokenizedExample]:
    """Deterministic template corpus with planted aspects and polarities.

    At least 30% of sentences carry two aspects with differing polarities,
    which is the regime adaptive masking is meant to help with.
    """
    if size < 1:
        raise ContractError(f"corpus size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(size):
        two = rng.random() < _TWO_ASPECT_RATE
        if two:
            noun_a = _pick(rng, ASPECT_NOUNS)
            noun_b = _pick(rng, tuple(n for n in ASPECT_NOUNS if n != noun_a))
            pol_a = _pick(rng, POLARITIES)
            pol_b = _pick(rng, tuple(p for p in POLARITIES if p != pol_a))
            clauses = [(noun_a, pol_a), (noun_b, pol_b)]
        else:
            clauses = [(_pick(rng, ASPECT_NOUNS), _pick(rng, POLARITIES))]

        parts: list[str] = []
        cursor = 0
        aspects: list[AspectAnnotation] = []

        def append(fragment: str) -> int:
            nonlocal cursor
            start = cursor
            parts.append(fragment)
            cursor += len(fragment)
            return start

        for idx, (noun, pol) in enumerate(clauses):
            if idx > 0:
                append(" but ")
            append("the ")
            start = append(noun)
            aspects.append(AspectAnnotation(noun, start, start + len(noun), pol))
            append(" was ")
            if rng.random() < _INTENSIFIER_RATE:
                append(_pick(rng, _INTENSIFIERS) + " ")
            append(_pick(rng, SENTIMENT_ADJECTIVES[pol]))
        append(".")
        examples.append(make_example("".join(parts), aspects))
    return examples


# -- line-delimited JSON ----------------------------------------------------------------


def example_to_record(ex: TokenizedExample) -> dict:
    return {
        "tokens": ex.tokens,
        "spans": [list(s) for s in ex.char_spans],
        "pos": ex.pos_ids,
        "dep": ex.dep_features.tolist(),
        "bio": ex.bio_tags,
        "aspects": [
            {
                "term": a.term,
                "from": a.char_from,
                "to": a.char_to,
                "polarity": a.polarity,
                "token_span": list(a.token_span) if a.token_span else None,
            }
            for a in ex.aspects
        ],
    }


def record_to_example(rec: dict) -> TokenizedExample:
    aspects = [
        AspectAnnotation(a["term"], a["from"], a["to"], a["polarity"],
                         tuple(a["token_span"]) if a.get("token_span") else None)
        for a in rec["aspects"]
    ]
    return TokenizedExample(
        tokens=list(rec["tokens"]),
        char_spans=[tuple(s) for s in rec["spans"]],
        pos_ids=list(rec["pos"]),
        dep_features=np.asarray(rec["dep"], dtype=np.float64),
        bio_tags=list(rec["bio"]),
        aspects=aspects,
    )


def write_examples(path: str, examples: list[TokenizedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), ensure_ascii=False) + "\n")


def read_examples(path: str) -> list[TokenizedExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(record_to_example(json.loads(line)))
    return out
