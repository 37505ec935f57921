"""Description database: parse annotations, canonicalize names, dedupe texts.

Input are two newline-delimited UTF-8 JSON streams:

    attributes:    {"object": str, "attributes": [str], "image_id": int, "region_id": int}
    relationships: {"subject": str, "predicate": str, "object": str, "image_id": int}

Attribute records render one text per attribute ("red car"); relationship
records render one "subject predicate object" text. Object/subject names go
through lexicon canonicalization; predicates are only lowercased and
whitespace-collapsed. Rendered texts are merged with exact-string dedup per
kind and assigned dense ids by ascending (text, kind) order, so the database
is byte-identical regardless of input order.

Canonicalization is alias lookup over a normalized surface form; there is no
external linguistic resource. The one fallback rule strips a trailing "s"
when the shorter form is known to the lexicon and the original form is not,
which keeps the function idempotent.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

from retrocap.errors import ConfigError, DataError, ParseError

KIND_ATTRIBUTE = "attribute"
KIND_RELATIONSHIP = "relationship"

# provenance record id used for relationships, which carry no region id
NO_RECORD_ID = -1

_WS = re.compile(r"\s+")
_CANON_OK = re.compile(r"^[a-z0-9 ]+$")


@dataclass(frozen=True)
class RawAttribute:
    object_name: str
    attributes: tuple[str, ...]
    source_image_id: int
    source_region_id: int


@dataclass(frozen=True)
class RawRelationship:
    subject_name: str
    predicate: str
    object_name: str
    source_image_id: int


@dataclass
class Description:
    id: int
    text: str
    kind: str
    provenance: list[tuple[int, int]]


class CanonLexicon:
    """Alias map plus ordered fallback rules standing in for synset lookup."""

    RULES = ("strip_plural_s",)

    def __init__(self, aliases: dict[str, str] | None = None,
                 rules: Iterable[str] = RULES):
        self.aliases = dict(aliases or {})
        self.rules = tuple(rules)
        for r in self.rules:
            if r not in self.RULES:
                raise ConfigError(f"unknown lexicon rule {r!r}")
        for surface, canon in self.aliases.items():
            if not _CANON_OK.match(canon):
                raise ConfigError(
                    f"canonical form {canon!r} must be lowercase letters, "
                    "digits and spaces"
                )
            if canon in self.aliases and self.aliases[canon] != canon:
                raise ConfigError(
                    f"canonical form {canon!r} is itself aliased to "
                    f"{self.aliases[canon]!r}; canonicalization would not be "
                    "idempotent"
                )
        self._known = set(self.aliases) | set(self.aliases.values())

    @classmethod
    def empty(cls) -> "CanonLexicon":
        return cls({})

    @classmethod
    def from_json(cls, data: dict) -> "CanonLexicon":
        if not isinstance(data, dict) or not isinstance(data.get("aliases", {}), dict):
            raise DataError("lexicon file must be a JSON object with an 'aliases' map")
        return cls(data.get("aliases", {}))

    @classmethod
    def load(cls, path) -> "CanonLexicon":
        with open(path, "r", encoding="utf-8") as f:
            try:
                return cls.from_json(json.load(f))
            except json.JSONDecodeError as e:
                raise DataError(f"lexicon {path}: invalid JSON ({e})") from e

    def knows(self, form: str) -> bool:
        return form in self._known


def normalize_surface(name: str) -> str:
    return _WS.sub(" ", name.strip()).lower()


def canonicalize(name: str, lex: CanonLexicon) -> str:
    s = normalize_surface(name)
    for rule in lex.rules:
        if rule == "strip_plural_s":
            if (
                s.endswith("s")
                and len(s) > 1
                and not lex.knows(s)
                and lex.knows(s[:-1])
            ):
                s = s[:-1]
    return lex.aliases.get(s, s)


def render(raw: RawAttribute | RawRelationship, lex: CanonLexicon) -> list[str]:
    if isinstance(raw, RawAttribute):
        obj = canonicalize(raw.object_name, lex)
        return [f"{normalize_surface(a)} {obj}" for a in raw.attributes]
    subj = canonicalize(raw.subject_name, lex)
    obj = canonicalize(raw.object_name, lex)
    return [f"{subj} {normalize_surface(raw.predicate)} {obj}"]


@dataclass
class ParseIssue:
    source: str
    line: int
    message: str


@dataclass
class ParseResult:
    attributes: list[RawAttribute] = field(default_factory=list)
    relationships: list[RawRelationship] = field(default_factory=list)
    errors: list[ParseIssue] = field(default_factory=list)


def _iter_lines(stream: BinaryIO | Iterable[bytes]):
    for i, line in enumerate(stream, start=1):
        yield i, line


def _record(line: bytes, lineno: int, source: str) -> dict:
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"invalid UTF-8: {e}", line=lineno, source=source)
    if not text.strip():
        return {}
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed JSON: {e.msg}", line=lineno, source=source)
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", line=lineno, source=source)
    return obj


def _req(obj: dict, key: str, typ, lineno: int, source: str):
    if key not in obj:
        raise ParseError(f"missing field {key!r}", line=lineno, source=source)
    val = obj[key]
    if typ is int and isinstance(val, bool) or not isinstance(val, typ):
        raise ParseError(
            f"field {key!r} must be {typ.__name__}", line=lineno, source=source
        )
    return val


def _name(obj: dict, key: str, lineno: int, source: str) -> str:
    val = _req(obj, key, str, lineno, source)
    if not val.strip():
        raise ParseError(f"field {key!r} is empty", line=lineno, source=source)
    return val


def _parse_attr(obj: dict, lineno: int, source: str) -> RawAttribute:
    name = _name(obj, "object", lineno, source)
    attrs = _req(obj, "attributes", list, lineno, source)
    for a in attrs:
        if not isinstance(a, str) or not a.strip():
            raise ParseError(
                "field 'attributes' must hold non-empty strings",
                line=lineno, source=source,
            )
    return RawAttribute(
        object_name=name,
        attributes=tuple(attrs),
        source_image_id=_req(obj, "image_id", int, lineno, source),
        source_region_id=_req(obj, "region_id", int, lineno, source),
    )


def _parse_rel(obj: dict, lineno: int, source: str) -> RawRelationship:
    return RawRelationship(
        subject_name=_name(obj, "subject", lineno, source),
        predicate=_name(obj, "predicate", lineno, source),
        object_name=_name(obj, "object", lineno, source),
        source_image_id=_req(obj, "image_id", int, lineno, source),
    )


def parse_annotations(
    attr_stream: BinaryIO | Iterable[bytes],
    rel_stream: BinaryIO | Iterable[bytes],
    strict: bool = False,
) -> ParseResult:
    """Parse both streams. Lenient mode collects issues; strict mode raises."""
    result = ParseResult()
    for source, stream, parse, out in (
        ("attributes", attr_stream, _parse_attr, result.attributes),
        ("relationships", rel_stream, _parse_rel, result.relationships),
    ):
        for lineno, line in _iter_lines(stream):
            try:
                obj = _record(line, lineno, source)
                if not obj:
                    continue
                out.append(parse(obj, lineno, source))
            except ParseError as e:
                if strict:
                    raise
                result.errors.append(
                    ParseIssue(source=source, line=lineno, message=str(e))
                )
    return result


@dataclass
class DescriptionDb:
    descriptions: list[Description]

    def __len__(self) -> int:
        return len(self.descriptions)

    def texts(self) -> list[str]:
        return [d.text for d in self.descriptions]

    def to_jsonl(self) -> bytes:
        lines = [
            json.dumps(
                {
                    "id": d.id,
                    "kind": d.kind,
                    "provenance": [list(p) for p in d.provenance],
                    "text": d.text,
                },
                sort_keys=True,
                separators=(",", ":"),
                ensure_ascii=False,
            )
            for d in self.descriptions
        ]
        return ("\n".join(lines) + "\n" if lines else "").encode("utf-8")

    @classmethod
    def from_jsonl(cls, data: bytes) -> "DescriptionDb":
        descriptions = []
        for lineno, line in enumerate(data.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"malformed JSON: {e.msg}", line=lineno,
                                 source="descdb")
            descriptions.append(
                Description(
                    id=obj["id"],
                    text=obj["text"],
                    kind=obj["kind"],
                    provenance=[tuple(p) for p in obj["provenance"]],
                )
            )
        expected = list(range(len(descriptions)))
        if [d.id for d in descriptions] != expected:
            raise DataError("description ids must be dense and sorted")
        return cls(descriptions)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "DescriptionDb":
        with open(path, "rb") as f:
            return cls.from_jsonl(f.read())


def build_database(
    attrs: Iterable[RawAttribute],
    rels: Iterable[RawRelationship],
    lex: CanonLexicon | None = None,
) -> DescriptionDb:
    """Render, merge and dedupe all records into a canonical database.

    Identity is (text, kind): the same string arising as an attribute and as
    a relationship stays two records. Provenance pairs are merged sorted, a
    relationship contributing (image_id, NO_RECORD_ID).
    """
    lex = lex or CanonLexicon.empty()
    merged: dict[tuple[str, str], set[tuple[int, int]]] = {}
    for raw in attrs:
        prov = (raw.source_image_id, raw.source_region_id)
        for text in render(raw, lex):
            merged.setdefault((text, KIND_ATTRIBUTE), set()).add(prov)
    for raw in rels:
        prov = (raw.source_image_id, NO_RECORD_ID)
        for text in render(raw, lex):
            merged.setdefault((text, KIND_RELATIONSHIP), set()).add(prov)
    descriptions = [
        Description(id=i, text=text, kind=kind, provenance=sorted(provs))
        for i, ((text, kind), provs) in enumerate(sorted(merged.items()))
    ]
    return DescriptionDb(descriptions)
