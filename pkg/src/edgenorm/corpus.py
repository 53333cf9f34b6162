"""Corpus loading, validation, and synthetic corpus generation.

Two kinds of input feed the pipeline: concept corpora (entity mentions
annotated with one or more concept identifiers, plus a concept
dictionary that enumerates the target entities) and pair corpora
(labeled entity pairs for the matching task).  Everything round-trips
through plain TSV so that inputs stay inspectable with shell tools.

TSV layouts:

* concept corpus: ``surface<TAB>concept_id[|concept_id...]``, lines
  starting with ``#`` are comments
* dictionary: ``concept_id[|concept_id...]<TAB>surface``
* pairs: ``entity_a<TAB>entity_b<TAB>label`` with an optional fourth
  ``group_id`` column; labels are ``0`` or ``1``

Identifiers may not contain tabs, newlines, or ``|`` (the composite-ID
separator).  A surface starting with ``#`` cannot be written to a
concept corpus because it would read back as a comment; the writer
rejects it instead of corrupting the file silently.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import DataError

LOGGER = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
ID_SEPARATOR = "|"

_WS_RUN = re.compile(r"\s+")
_PUNCT = re.compile(r"[^\w\s]")


def normalize_surface(raw: str, *, strip_punctuation: bool = False) -> str:
    """Canonicalize a surface form.

    Lowercases, collapses whitespace runs to single spaces, and trims.
    No other characters are touched unless ``strip_punctuation`` is set,
    in which case non-alphanumeric characters become spaces first.

    >>> normalize_surface("Coca-Cola  ®")
    'coca-cola ®'
    """
    text = raw.lower()
    if strip_punctuation:
        text = _PUNCT.sub(" ", text)
    return _WS_RUN.sub(" ", text).strip()


def _check_concept_id(concept_id: str, where: str) -> str:
    if not concept_id:
        raise DataError(f"{where}: empty concept id")
    if any(ch in concept_id for ch in ("\t", "\n", ID_SEPARATOR)):
        raise DataError(f"{where}: concept id {concept_id!r} contains a reserved character")
    return concept_id


def _parse_id_field(value: str, where: str) -> frozenset[str]:
    ids = frozenset(_check_concept_id(part, where) for part in value.split(ID_SEPARATOR))
    if not ids:
        raise DataError(f"{where}: no concept ids")
    return ids


@dataclass(frozen=True)
class EntityRecord:
    """One mention: a surface form plus the concept ids it links to."""

    surface: str
    concept_ids: frozenset[str]
    source_split: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "concept_ids", frozenset(self.concept_ids))
        if not self.surface:
            raise DataError("entity record has an empty surface")
        if not self.concept_ids:
            raise DataError(f"record {self.surface!r} has no concept ids")
        for cid in self.concept_ids:
            _check_concept_id(cid, f"record {self.surface!r}")
        if self.source_split not in SPLITS:
            raise DataError(
                f"record {self.surface!r}: unknown split {self.source_split!r}, expected one of {SPLITS}"
            )


@dataclass(frozen=True)
class PairRecord:
    """A labeled entity pair; label True means the two names co-refer."""

    entity_a: str
    entity_b: str
    label: bool
    group_id: str | None = None

    def __post_init__(self) -> None:
        if not self.entity_a or not self.entity_b:
            raise DataError("pair record has an empty entity")


@dataclass(frozen=True)
class DictionaryEntry:
    index: int
    surface: str
    concept_ids: frozenset[str]


class ConceptDictionary:
    """Ordered list of target entities with dense indices 0..N-1.

    The index order is load order and is part of the contract: graph
    rows, candidate sets, and tie-breaking all refer to these indices.
    """

    def __init__(self, entries: Iterable[tuple[str, Iterable[str]]]):
        built: list[DictionaryEntry] = []
        for surface, ids in entries:
            idset = frozenset(ids)
            if not surface:
                raise DataError(f"dictionary entry {len(built)} has an empty surface")
            if not idset:
                raise DataError(f"dictionary entry {surface!r} has no concept ids")
            for cid in idset:
                _check_concept_id(cid, f"dictionary entry {surface!r}")
            built.append(DictionaryEntry(len(built), surface, idset))
        if not built:
            raise DataError("dictionary is empty")
        self._entries = tuple(built)
        self._universe = frozenset(cid for e in built for cid in e.concept_ids)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[DictionaryEntry]:
        return iter(self._entries)

    def __getitem__(self, index: int) -> DictionaryEntry:
        return self._entries[index]

    @property
    def entries(self) -> tuple[DictionaryEntry, ...]:
        return self._entries

    @property
    def concept_universe(self) -> frozenset[str]:
        return self._universe

    def surfaces(self) -> list[str]:
        return [e.surface for e in self._entries]

    def fingerprint(self) -> str:
        """Content hash; used for stale-embedding detection."""
        h = hashlib.sha256()
        for e in self._entries:
            line = f"{e.index}\t{e.surface}\t{ID_SEPARATOR.join(sorted(e.concept_ids))}\n"
            h.update(line.encode("utf-8"))
        return h.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ConceptDictionary):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"ConceptDictionary({len(self._entries)} entries, {len(self._universe)} concepts)"


@dataclass(frozen=True)
class CorpusStats:
    """Per-split mention counts and, for pair corpora, label counts."""

    mentions: Mapping[str, int] = field(default_factory=dict)
    positive_pairs: int = 0
    negative_pairs: int = 0

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.mentions.values()):
            raise DataError("negative mention count")
        if self.positive_pairs < 0 or self.negative_pairs < 0:
            raise DataError("negative pair count")

    @property
    def total_mentions(self) -> int:
        return sum(self.mentions.values())

    @property
    def total_pairs(self) -> int:
        return self.positive_pairs + self.negative_pairs


def concept_stats(records_by_split: Mapping[str, Sequence[EntityRecord]]) -> CorpusStats:
    return CorpusStats(mentions={split: len(records) for split, records in records_by_split.items()})


def pair_stats(pairs: Sequence[PairRecord]) -> CorpusStats:
    positives = sum(1 for p in pairs if p.label)
    return CorpusStats(positive_pairs=positives, negative_pairs=len(pairs) - positives)


def _data_lines(path: str | Path) -> Iterator[tuple[int, str]]:
    """Yield (1-based line number, raw line) skipping blanks."""
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            yield lineno, line


def load_concept_corpus(
    path: str | Path,
    split: str,
    *,
    strip_punctuation: bool = False,
) -> list[EntityRecord]:
    """Load mentions from a concept-corpus TSV, tagging them with ``split``.

    Surfaces are normalized on the way in; composite annotations like
    ``D030342|D008607`` become one record carrying the whole id set.
    A malformed line raises :class:`DataError` naming the line number.
    """
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}, expected one of {SPLITS}")
    records: list[EntityRecord] = []
    for lineno, line in _data_lines(path):
        if line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        surface = normalize_surface(fields[0], strip_punctuation=strip_punctuation)
        if not surface:
            raise DataError(f"{path}:{lineno}: surface is empty after normalization")
        ids = _parse_id_field(fields[1].strip(), f"{path}:{lineno}")
        records.append(EntityRecord(surface, ids, split))
    return records


def write_concept_corpus(path: str | Path, records: Sequence[EntityRecord]) -> None:
    lines = []
    for rec in records:
        if rec.surface.startswith("#"):
            raise DataError(
                f"surface {rec.surface!r} starts with '#' and would read back as a comment"
            )
        lines.append(f"{rec.surface}\t{ID_SEPARATOR.join(sorted(rec.concept_ids))}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_dictionary(path: str | Path, *, strip_punctuation: bool = False) -> ConceptDictionary:
    """Load the target entity list; entry order in the file fixes the indices."""
    entries: list[tuple[str, frozenset[str]]] = []
    for lineno, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 2 tab-separated fields, got {len(fields)}")
        ids = _parse_id_field(fields[0].strip(), f"{path}:{lineno}")
        surface = normalize_surface(fields[1], strip_punctuation=strip_punctuation)
        if not surface:
            raise DataError(f"{path}:{lineno}: surface is empty after normalization")
        entries.append((surface, ids))
    return ConceptDictionary(entries)


def write_dictionary(path: str | Path, dictionary: ConceptDictionary) -> None:
    lines = [
        f"{ID_SEPARATOR.join(sorted(e.concept_ids))}\t{e.surface}\n" for e in dictionary
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_pair_corpus(path: str | Path, *, strip_punctuation: bool = False) -> list[PairRecord]:
    """Load labeled pairs; labels must be literally ``0`` or ``1``.

    Entity surfaces get the same normalization as concept mentions so
    case or spacing differences never leak into the features.
    """
    pairs: list[PairRecord] = []
    for lineno, line in _data_lines(path):
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise DataError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        label_text = fields[2].strip()
        if label_text not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {label_text!r}")
        group = fields[3].strip() if len(fields) == 4 and fields[3].strip() else None
        entity_a = normalize_surface(fields[0], strip_punctuation=strip_punctuation)
        entity_b = normalize_surface(fields[1], strip_punctuation=strip_punctuation)
        if not entity_a or not entity_b:
            raise DataError(f"{path}:{lineno}: empty entity field")
        pairs.append(PairRecord(entity_a, entity_b, label_text == "1", group))
    return pairs


def write_pair_corpus(path: str | Path, pairs: Sequence[PairRecord]) -> None:
    lines = []
    for p in pairs:
        tail = f"\t{p.group_id}" if p.group_id is not None else ""
        lines.append(f"{p.entity_a}\t{p.entity_b}\t{int(p.label)}{tail}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def filter_unlinkable(
    records: Sequence[EntityRecord], dictionary: ConceptDictionary
) -> list[EntityRecord]:
    """Drop mentions whose concept ids never appear in the dictionary.

    Mentions that cannot resolve to any target entity are excluded from
    both training and scoring.  Order is preserved and the operation is
    idempotent.
    """
    universe = dictionary.concept_universe
    kept = [rec for rec in records if rec.concept_ids & universe]
    dropped = len(records) - len(kept)
    if dropped:
        LOGGER.info("filtered %d unlinkable mentions (%d kept)", dropped, len(kept))
    return kept


# --- synthetic corpus ---------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_LONG_SUFFIXES = ("corporation", "incorporated", "limited", "company")
_SHORT_SUFFIX = {
    "corporation": "corp.",
    "incorporated": "inc.",
    "limited": "ltd.",
    "company": "co.",
}
_MARKS = ("®", "™")


def _token(rng: random.Random) -> str:
    syllables = rng.randint(2, 3)
    word = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(syllables))
    if rng.random() < 0.4:
        word += rng.choice(_CONSONANTS)
    return word


def _fresh_tokens(rng: random.Random, used: set[str]) -> tuple[str, str]:
    # Both name tokens are globally unique so every variant keeps at
    # least one token that identifies its concept unambiguously.
    while True:
        a, b = _token(rng), _token(rng)
        if a != b and a not in used and b not in used:
            used.update((a, b))
            return a, b


def _variant_menu(a: str, b: str, suffix: str, mark: str) -> list[str]:
    short = _SHORT_SUFFIX[suffix]
    return [
        f"{a} {b} {short}",
        f"{a} {b}, {short}",
        f"{a}-{b} {suffix}",
        f"{a} {b}",
        f"{a} {b} {suffix} {mark}",
        f"{a} {b} {mark}",
        f"{a} {b} {short} {mark}",
        f"{a}-{b} {short}",
        f"{a} {b}, {suffix}",
        f"{a}-{b}",
    ]


def generate_synthetic_corpus(
    n_concepts: int,
    variants_per_concept: int,
    seed: int,
) -> tuple[ConceptDictionary, list[EntityRecord], list[EntityRecord]]:
    """Build a deterministic toy normalization task.

    Each concept gets an invented two-token name plus a corporate
    suffix as its dictionary entry, and ``variants_per_concept`` query
    variants produced by programmatic transforms: suffix abbreviation,
    punctuation swaps, trademark-style suffix appends, and token drops.
    Concepts are split group-disjointly, so no concept contributes
    queries to both train and test.

    Returns ``(dictionary, train_records, test_records)``.
    """
    if n_concepts < 1:
        raise DataError("n_concepts must be >= 1")
    if variants_per_concept < 2:
        raise DataError("variants_per_concept must be >= 2")
    rng = random.Random(seed)
    used_tokens: set[str] = set()

    order = list(range(n_concepts))
    rng.shuffle(order)
    n_test = 0 if n_concepts < 2 else max(1, n_concepts // 5)
    test_concepts = set(order[:n_test])

    dict_entries: list[tuple[str, frozenset[str]]] = []
    train_records: list[EntityRecord] = []
    test_records: list[EntityRecord] = []

    for idx in range(n_concepts):
        cid = f"C{idx:04d}"
        a, b = _fresh_tokens(rng, used_tokens)
        suffix = rng.choice(_LONG_SUFFIXES)
        mark = rng.choice(_MARKS)
        canonical = f"{a} {b} {suffix}"
        dict_entries.append((normalize_surface(canonical), frozenset([cid])))
        if rng.random() < 0.5:
            dict_entries.append(
                (normalize_surface(f"{a} {b} {_SHORT_SUFFIX[suffix]}"), frozenset([cid]))
            )

        menu = _variant_menu(a, b, suffix, mark)
        rng.shuffle(menu)
        seen: set[str] = set()
        variants: list[str] = []
        for candidate in menu:
            if len(variants) == variants_per_concept:
                break
            surface = normalize_surface(candidate)
            if surface and surface not in seen:
                seen.add(surface)
                variants.append(surface)
        filler = 2
        while len(variants) < variants_per_concept:
            surface = normalize_surface(f"{a} {b} {suffix} {filler}")
            if surface not in seen:
                seen.add(surface)
                variants.append(surface)
            filler += 1

        split = "test" if idx in test_concepts else "train"
        bucket = test_records if idx in test_concepts else train_records
        for surface in variants:
            bucket.append(EntityRecord(surface, frozenset([cid]), split))

    return ConceptDictionary(dict_entries), train_records, test_records


def derive_pairs(
    records: Sequence[EntityRecord],
    seed: int,
    *,
    negative_ratio: float = 1.0,
) -> list[PairRecord]:
    """Turn a concept corpus into a labeled pair corpus.

    Positives are all within-concept surface pairs and inherit the
    concept id as their group id; negatives are sampled uniformly from
    cross-concept surface pairs until ``negative_ratio`` times the
    positive count is reached.
    """
    if negative_ratio < 0:
        raise DataError("negative_ratio must be >= 0")
    rng = random.Random(seed)
    by_concept: dict[str, list[str]] = {}
    for rec in records:
        key = ID_SEPARATOR.join(sorted(rec.concept_ids))
        by_concept.setdefault(key, []).append(rec.surface)

    pairs: list[PairRecord] = []
    for key in sorted(by_concept):
        surfaces = by_concept[key]
        for i in range(len(surfaces)):
            for j in range(i + 1, len(surfaces)):
                pairs.append(PairRecord(surfaces[i], surfaces[j], True, key))

    concepts = sorted(by_concept)
    n_negative = int(round(len(pairs) * negative_ratio))
    seen: set[tuple[str, str]] = set()
    attempts = 0
    while len(seen) < n_negative and len(concepts) > 1 and attempts < n_negative * 50:
        attempts += 1
        ca, cb = rng.sample(concepts, 2)
        pair = (rng.choice(by_concept[ca]), rng.choice(by_concept[cb]))
        if pair not in seen:
            seen.add(pair)
    negatives = [PairRecord(x, y, False) for x, y in sorted(seen)]
    rng.shuffle(negatives)
    return pairs + negatives


def file_fingerprint(path: str | Path) -> str:
    """sha256 of a file's bytes; recorded in run manifests."""
    h = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
