"""Referring-expression parsing and synonym mutation.

The builtin parser is a small rule system: lexicon tagging with context
disambiguation, greedy noun-phrase chunking, and attachment of attribute
phrases ("in a blue sweatshirt") to the entity they describe.
"""
from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from anyword.errors import BackendUnavailable, EmptyExpression, InsufficientSynonyms, NoEntityFound


class PosTag(str, Enum):
    NOUN = "NOUN"
    ADJ = "ADJ"
    VERB = "VERB"
    OTHER = "OTHER"


@dataclass(frozen=True)
class Token:
    surface: str
    index: int
    pos_tag: PosTag


@dataclass(frozen=True)
class Entity:
    root: Token
    adjectives: tuple[Token, ...] = ()
    attribute_nouns: tuple[Token, ...] = ()
    phrase_span: tuple[int, int] = (0, 0)  # [start, end)
    # (adjective index, index of the noun it modifies)
    adjective_heads: tuple[tuple[int, int], ...] = ()

    @property
    def label(self) -> str:
        return self.root.surface

    @property
    def concept_tokens(self) -> tuple[Token, ...]:
        """Root first, then attribute nouns and adjectives in sentence order."""
        rest = sorted(self.attribute_nouns + self.adjectives, key=lambda t: t.index)
        return (self.root, *rest)

    @property
    def token_indices(self) -> tuple[int, ...]:
        return tuple(t.index for t in self.concept_tokens)


@dataclass(frozen=True)
class ParsedExpression:
    text: str
    tokens: tuple[Token, ...]
    entities: tuple[Entity, ...]
    predicates: tuple[Token, ...] = ()
    exclusion_sets: tuple[frozenset[int], ...] = ()
    offsets: tuple[tuple[int, int], ...] = field(default=(), compare=False, repr=False)

    def phrase(self, entity_id: int) -> str:
        start, end = self.entities[entity_id].phrase_span
        if not self.offsets:
            return " ".join(t.surface for t in self.tokens[start:end])
        return self.text[self.offsets[start][0]:self.offsets[end - 1][1]]

    @property
    def concept_indices(self) -> tuple[int, ...]:
        idx = {i for e in self.entities for i in e.token_indices}
        return tuple(sorted(idx))


class BackendKind(str, Enum):
    BUILTIN_RULES = "builtin"
    EXTERNAL_TAGGER = "external"
    LLM_PROMPTED = "llm"


PARSE_PROMPT = (
    "As a NLP expert, you will be provided a caption describing an image. Please do pos tag "
    "the caption and identify the only one referred subject object and all adjective "
    "attributes. Your response should be in the format of "
    '"[(attribute1, attribute2, attribute3, ...), object1]"\n'
    "Conditions:\n"
    "(1) If the attribute is long, short it by picking one original word.\n"
    "(2) Please include one original word possessive source into the attributes for the subject."
)

SYNONYM_PROMPT = (
    "As a NLP expert, please genrate a list of n synonyms of the noun phrases in the "
    "following [sentence] and output the list separated by '&'"
)


@dataclass
class ParserBackend:
    """Parser selection.

    ``transport`` (LLM) maps a prompt string to the model's reply; ``tagger``
    (external) maps a token list to universal POS tags, e.g. a spaCy wrapper.
    """

    kind: BackendKind = BackendKind.BUILTIN_RULES
    prompt_template: str = PARSE_PROMPT
    synonym_template: str = SYNONYM_PROMPT
    transport: Callable[[str], str] | None = None
    tagger: Callable[[list[str]], list[str]] | None = None
    synonyms: dict[str, list[str]] | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def ask(self, prompt: str) -> str:
        if self.transport is None:
            raise BackendUnavailable("LLM backend has no transport")
        with self._lock:
            try:
                reply = self.transport(prompt)
            except Exception as exc:  # transport errors of any kind
                raise BackendUnavailable(f"LLM transport failed: {exc}") from exc
        if not isinstance(reply, str):
            raise BackendUnavailable("LLM transport returned a non-string reply", raw_reply=repr(reply))
        return reply


BUILTIN = ParserBackend()

# ---------------------------------------------------------------------------
# lexicon

DETERMINERS = frozenset(
    "a an the this that these those his her its their my your our some any each every no "
    "both all either neither".split()
)
CONNECTORS = frozenset("and or , but".split())
OTHER_WORDS = DETERMINERS | CONNECTORS | frozenset(
    """in on at of to from with without by for into onto over under above below behind beside
    besides between among near next against along across around through toward towards inside
    outside beneath underneath upon via up down off out away about like than as while who which
    whose whom where when what there here is are was were be been being am has have had having
    do does did not it he she they them him we i you me us one two three four five six seven
    eight nine ten also very just only too really then so almost partially 's""".split()
)
ATTACH_WORDS = frozenset("in with wearing wears wore has having".split())

_ADJ_SUFFIXES = ("ous", "ful", "ive", "able", "ible", "less", "ish", "ic", "ical", "al", "ese", "ary")


@lru_cache(maxsize=1)
def lexicon() -> tuple[dict[str, frozenset[PosTag]], frozenset[str]]:
    text = resources.files("anyword").joinpath("data/lexicon.txt").read_text(encoding="utf-8")
    tags: dict[str, set[PosTag]] = {}
    attr: set[str] = set()
    section = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            section = line[1:]
            continue
        for word in line.split():
            if section == "ATTR":
                attr.add(word)
                tags.setdefault(word, set()).add(PosTag.NOUN)
            else:
                tags.setdefault(word, set()).add(PosTag(section))
    for word in OTHER_WORDS:
        tags.setdefault(word, set()).add(PosTag.OTHER)
    return {w: frozenset(t) for w, t in tags.items()}, frozenset(attr)


@lru_cache(maxsize=1)
def default_synonyms() -> dict[str, list[str]]:
    text = resources.files("anyword").joinpath("data/synonyms.json").read_text(encoding="utf-8")
    return json.loads(text)


def _candidates(word: str) -> frozenset[PosTag]:
    tags, _ = lexicon()
    w = word.lower()
    if w in tags:
        return tags[w]
    if w.isdigit():
        return frozenset({PosTag.OTHER})
    for stem in (w[:-2] if w.endswith("es") else None, w[:-1] if w.endswith("s") else None):
        if stem and PosTag.NOUN in tags.get(stem, ()):
            return frozenset({PosTag.NOUN})
    if w.endswith("ly"):
        return frozenset({PosTag.OTHER})
    if w.endswith("ing") and len(w) > 4:
        return frozenset({PosTag.VERB, PosTag.ADJ})
    if w.endswith("ed") and len(w) > 3:
        return frozenset({PosTag.VERB, PosTag.ADJ})
    if w.endswith(_ADJ_SUFFIXES) and len(w) > 4:
        return frozenset({PosTag.ADJ})
    return frozenset({PosTag.NOUN})


def is_attribute_noun(word: str) -> bool:
    return word.lower() in lexicon()[1]


# ---------------------------------------------------------------------------
# tokenizing and tagging

_TOKEN_RE = re.compile(r"'s\b|[^\W_]+(?:[-'][^\W_]+)*", re.UNICODE)


def tokenize(text: str) -> list[tuple[str, int, int]]:
    out = []
    for m in _TOKEN_RE.finditer(text):
        word = m.group(0)
        if word.lower().endswith("'s") and len(word) > 2:
            out.append((word[:-2], m.start(), m.end() - 2))
            out.append((word[-2:], m.end() - 2, m.end()))
        else:
            out.append((word, m.start(), m.end()))
    return out


def tag_words(words: Sequence[str]) -> list[PosTag]:
    """Resolve each word to one tag using its neighbours."""
    cands = [_candidates(w) for w in words]
    tags: list[PosTag] = []
    n = len(words)

    def nominal_ahead(i: int) -> bool:
        # a noun follows, possibly after more modifiers
        j = i + 1
        while j < n:
            c = cands[j]
            if PosTag.NOUN in c and not (PosTag.OTHER in c and len(c) == 1):
                return True
            if PosTag.ADJ in c or words[j].lower() in (",", "and") and j + 1 < n and PosTag.ADJ in cands[j + 1]:
                j += 1
                continue
            return False
        return False

    for i, (w, c) in enumerate(zip(words, cands)):
        low = w.lower()
        prev = tags[i - 1] if i else None
        prev_word = words[i - 1].lower() if i else ""
        nxt = words[i + 1].lower() if i + 1 < n else ""
        if len(c) == 1:
            tags.append(next(iter(c)))
            continue
        if PosTag.OTHER in c:
            adjectival = PosTag.ADJ in c and nxt not in DETERMINERS and nxt not in ("to", "of")
            tags.append(PosTag.ADJ if adjectival and nominal_ahead(i) else PosTag.OTHER)
            continue
        after_det = prev_word in DETERMINERS or prev in (PosTag.ADJ,) or prev_word == "'s"
        if PosTag.ADJ in c and nominal_ahead(i):
            tags.append(PosTag.ADJ)
        elif PosTag.NOUN in c and PosTag.VERB in c:
            if after_det:
                tags.append(PosTag.NOUN)
            elif prev == PosTag.NOUN or nxt in DETERMINERS:
                tags.append(PosTag.VERB)
            else:
                tags.append(PosTag.NOUN)
        elif PosTag.NOUN in c and after_det:
            tags.append(PosTag.NOUN)
        elif PosTag.VERB in c:
            tags.append(PosTag.ADJ if after_det and PosTag.ADJ in c else PosTag.VERB)
        elif PosTag.ADJ in c:
            tags.append(PosTag.ADJ)
        elif PosTag.NOUN in c:
            tags.append(PosTag.NOUN)
        else:
            tags.append(PosTag.OTHER)
    return tags


_UPOS = {"NOUN": PosTag.NOUN, "PROPN": PosTag.NOUN, "ADJ": PosTag.ADJ, "VERB": PosTag.VERB}


# ---------------------------------------------------------------------------
# chunking


@dataclass
class _Chunk:
    start: int
    end: int  # exclusive
    head: int
    modifiers: list[int]  # adjectives (and possessors) modifying head
    compounds: list[int]


def _chunk(words: Sequence[str], tags: list[PosTag]) -> list[_Chunk]:
    chunks = []
    i, n = 0, len(words)
    while i < n:
        low = words[i].lower()
        if not (low in DETERMINERS or tags[i] in (PosTag.ADJ, PosTag.NOUN) or low.isdigit()):
            i += 1
            continue
        j = i
        while j < n and (words[j].lower() in DETERMINERS or words[j].isdigit()) and tags[j] == PosTag.OTHER:
            j += 1
        body_start = j
        last_noun = None
        while j < n:
            low = words[j].lower()
            if tags[j] in (PosTag.ADJ, PosTag.NOUN):
                if tags[j] == PosTag.NOUN:
                    last_noun = j
                j += 1
            elif low == "'s" and last_noun is not None:
                j += 1
            elif (
                low in ("and", ",")
                and j > body_start
                and tags[j - 1] == PosTag.ADJ
                and j + 1 < n
                and tags[j + 1] == PosTag.ADJ
            ):
                j += 1
            else:
                break
        if last_noun is None:
            i = max(j, i + 1)
            continue
        # leftmost-longest: the chunk ends at its last noun
        end = last_noun + 1
        modifiers, compounds = [], []
        for k in range(body_start, last_noun):
            if tags[k] == PosTag.ADJ:
                modifiers.append(k)
            elif tags[k] == PosTag.NOUN:
                if k + 1 < end and words[k + 1].lower() == "'s":
                    modifiers.append(k)  # possessor
                else:
                    compounds.append(k)
        chunks.append(_Chunk(i, end, last_noun, modifiers, compounds))
        i = end
    return chunks


def _build(text: str, spans, tags: list[PosTag], chunks: list[_Chunk]) -> ParsedExpression:
    words = [s[0] for s in spans]
    tags = list(tags)
    for ch in chunks:
        for k in ch.modifiers:
            tags[k] = PosTag.ADJ  # possessors become attributes
    records: list[dict] = []
    for ch in chunks:
        prev = records[-1] if records else None
        if prev is not None and is_attribute_noun(words[ch.head]):
            between = [w.lower() for w in words[prev["end"]:ch.start]]
            if between and all(w in ATTACH_WORDS for w in between):
                prev["attrs"].append(ch.head)
                prev["amods"].extend((k, ch.head) for k in ch.modifiers)
                prev["end"] = ch.end
                continue
        records.append(
            {"start": ch.start, "end": ch.end, "root": ch.head, "attrs": [], "amods": [(k, ch.head) for k in ch.modifiers]}
        )
    if not records:
        raise NoEntityFound(f"no noun found in {text!r}")

    # adjectives outside any phrase attach to the closest preceding entity
    covered = {k for r in records for k, _ in r["amods"]}
    for i, t in enumerate(tags):
        if t != PosTag.ADJ or i in covered:
            continue
        owner = None
        for r in records:
            if r["start"] <= i:
                owner = r
        if owner is None:
            owner = records[0]
        owner["amods"].append((i, owner["root"]))

    tokens = tuple(Token(w, i, tags[i]) for i, w in enumerate(words))
    entities = []
    for r in records:
        amods = tuple(sorted(r["amods"]))
        entities.append(
            Entity(
                root=tokens[r["root"]],
                adjectives=tuple(tokens[k] for k, _ in amods),
                attribute_nouns=tuple(tokens[k] for k in r["attrs"]),
                phrase_span=(r["start"], r["end"]),
                adjective_heads=amods,
            )
        )
    k = len(entities)
    return ParsedExpression(
        text=text,
        tokens=tokens,
        entities=tuple(entities),
        predicates=tuple(t for t in tokens if t.pos_tag == PosTag.VERB),
        exclusion_sets=tuple(frozenset(j for j in range(k) if j != i) for i in range(k)),
        offsets=tuple((s[1], s[2]) for s in spans),
    )


def _normalize(text: str) -> str:
    return " ".join(text.split())


def parse_expression(text: str, backend: ParserBackend = BUILTIN) -> ParsedExpression:
    """Parse ``text`` into entities, their modifiers and the predicates.

    Raises:
        EmptyExpression: nothing tokenizable in ``text``.
        NoEntityFound: no noun; the caller should not attempt grounding.
        BackendUnavailable: the LLM transport failed or replied malformed.
    """
    text = _normalize(text)
    spans = tokenize(text)
    if not spans:
        raise EmptyExpression("expression has no tokens")
    words = [s[0] for s in spans]
    if backend.kind == BackendKind.LLM_PROMPTED:
        return _parse_llm(text, spans, backend)
    if backend.kind == BackendKind.EXTERNAL_TAGGER:
        if backend.tagger is None:
            raise BackendUnavailable("external tagger backend has no tagger")
        try:
            upos = list(backend.tagger(list(words)))
        except Exception as exc:
            raise BackendUnavailable(f"external tagger failed: {exc}") from exc
        if len(upos) != len(words):
            raise BackendUnavailable("external tagger returned a tag count that does not match the tokens")
        tags = [_UPOS.get(u.upper(), PosTag.OTHER) for u in upos]
    else:
        tags = tag_words(words)
    return _build(text, spans, tags, _chunk(words, tags))


_REPLY_RE = re.compile(r"^\s*\[\s*\(\s*(?P<attrs>[^()\[\]]*)\)\s*,\s*(?P<obj>[^()\[\],]+?)\s*\]\s*$")


def parse_llm_reply(reply: str) -> tuple[list[str], str]:
    """Strict grammar for ``[(attr1, attr2, ...), object]`` replies."""
    m = _REPLY_RE.match(reply)
    if m is None:
        raise BackendUnavailable("malformed parser reply", raw_reply=reply)
    strip = lambda s: s.strip().strip("'\"").strip()  # noqa: E731
    attrs = [strip(a) for a in m.group("attrs").split(",") if strip(a) and strip(a) != "..."]
    obj = strip(m.group("obj"))
    if not obj:
        raise BackendUnavailable("parser reply names no object", raw_reply=reply)
    return attrs, obj


def _parse_llm(text: str, spans, backend: ParserBackend) -> ParsedExpression:
    prompt = f'{backend.prompt_template}\nCaption: "{text}"'
    reply = backend.ask(prompt)
    attrs, obj = parse_llm_reply(reply)
    words = [s[0] for s in spans]
    lowered = [w.lower() for w in words]
    tags = tag_words(words)

    def locate(word: str) -> int:
        last = word.split()[-1].lower()
        if last not in lowered:
            raise BackendUnavailable(f"reply word {word!r} not in caption", raw_reply=reply)
        return lowered.index(last)

    root = locate(obj)
    tags[root] = PosTag.NOUN
    adj_idx, attr_idx = [], []
    for a in attrs:
        k = locate(a)
        if k == root or k in adj_idx or k in attr_idx:
            continue
        if tags[k] == PosTag.NOUN and is_attribute_noun(words[k]):
            attr_idx.append(k)
        else:
            tags[k] = PosTag.ADJ
            adj_idx.append(k)
    tokens = tuple(Token(w, i, tags[i]) for i, w in enumerate(words))
    span_idx = [root, *adj_idx, *attr_idx]
    amods = tuple(sorted((k, root) for k in adj_idx))
    entity = Entity(
        root=tokens[root],
        adjectives=tuple(tokens[k] for k, _ in amods),
        attribute_nouns=tuple(tokens[k] for k in sorted(attr_idx)),
        phrase_span=(min(span_idx), max(span_idx) + 1),
        adjective_heads=amods,
    )
    return ParsedExpression(
        text=text,
        tokens=tokens,
        entities=(entity,),
        predicates=tuple(t for t in tokens if t.pos_tag == PosTag.VERB),
        exclusion_sets=(frozenset(),),
        offsets=tuple((s[1], s[2]) for s in spans),
    )


def parse_labels(labels: Sequence[str], template: str = "a photo of {labels}") -> ParsedExpression:
    """Concatenate class labels into one expression; each label is one entity.

    Used for open-vocabulary evaluation where the label list, not a caption,
    names the targets. The last word of each label is its root.
    """
    if not labels:
        raise EmptyExpression("no labels")
    prefix, _, suffix = template.partition("{labels}")
    pieces, label_ranges = [prefix], []
    cursor = len(prefix)
    for i, lab in enumerate(labels):
        lab = _normalize(lab)
        if i:
            pieces.append(", ")
            cursor += 2
        label_ranges.append((cursor, cursor + len(lab)))
        pieces.append(lab)
        cursor += len(lab)
    pieces.append(suffix)
    text = "".join(pieces)
    spans = tokenize(text)
    words = [s[0] for s in spans]
    tags = [PosTag.OTHER] * len(words)
    groups = []
    for lo, hi in label_ranges:
        idx = [k for k, s in enumerate(spans) if s[1] >= lo and s[2] <= hi]
        if not idx:
            raise EmptyExpression(f"label at {lo}:{hi} has no tokens")
        groups.append(idx)
        for k in idx:
            tags[k] = PosTag.NOUN
    tokens = tuple(Token(w, i, tags[i]) for i, w in enumerate(words))
    entities = tuple(Entity(root=tokens[g[-1]], phrase_span=(g[0], g[-1] + 1)) for g in groups)
    k = len(entities)
    return ParsedExpression(
        text=text,
        tokens=tokens,
        entities=entities,
        predicates=(),
        exclusion_sets=tuple(frozenset(j for j in range(k) if j != i) for i in range(k)),
        offsets=tuple((s[1], s[2]) for s in spans),
    )


# ---------------------------------------------------------------------------
# mutation


def _subject_core(parsed: ParsedExpression) -> tuple[int, int]:
    """Token range of the subject's compound nouns plus root."""
    ent = parsed.entities[0]
    start = ent.root.index
    while start - 1 >= ent.phrase_span[0] and parsed.tokens[start - 1].pos_tag == PosTag.NOUN:
        start -= 1
    return start, ent.root.index + 1


def _substitute(parsed: ParsedExpression, span: tuple[int, int], replacement: str) -> str:
    lo = parsed.offsets[span[0]][0]
    hi = parsed.offsets[span[1] - 1][1]
    return parsed.text[:lo] + replacement + parsed.text[hi:]


def mutate_expression(
    text: str,
    n: int | None,
    backend: ParserBackend = BUILTIN,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Rewrite the subject noun phrase of ``text`` with ``n`` synonyms.

    ``n=None`` draws the count uniformly from 2..5 with ``rng`` (study mode).
    Raises InsufficientSynonyms rather than returning fewer than ``n``.
    """
    if n is None:
        if rng is None:
            raise ValueError("study mode needs an rng")
        n = int(rng.integers(2, 6))
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    parsed = parse_expression(text, BUILTIN if backend.kind != BackendKind.EXTERNAL_TAGGER else backend)
    span = _subject_core(parsed)
    core = " ".join(t.surface for t in parsed.tokens[span[0]:span[1]])
    root = parsed.entities[0].root

    if backend.kind == BackendKind.LLM_PROMPTED:
        prompt = backend.synonym_template.replace(" n ", f" {n} ").replace("[sentence]", f"[{parsed.text}]")
        reply = backend.ask(prompt)
        phrases = [p.strip() for p in reply.split("&")]
        candidates = [(span, p) for p in phrases if p]
    else:
        table = backend.synonyms if backend.synonyms is not None else default_synonyms()
        if core.lower() in table:
            candidates = [(span, p) for p in table[core.lower()]]
        elif root.surface.lower() in table:
            candidates = [((root.index, root.index + 1), p) for p in table[root.surface.lower()]]
        else:
            candidates = []

    variants: list[str] = []
    for sp, phrase in candidates:
        v = _substitute(parsed, sp, phrase)
        if v.lower() != parsed.text.lower() and v not in variants:
            variants.append(v)
    if len(variants) < n:
        raise InsufficientSynonyms(f"{len(variants)} synonym variants available for {core!r}, {n} requested")
    return variants[:n]
