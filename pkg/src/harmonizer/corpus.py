"""Corpus ingestion: NIH CDE JSON exports, SDOH screening CSVs, generic tables.

Every parser returns an immutable :class:`Corpus` whose records carry the text
that is later sent to the embedder (``composed_text``).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Literal, Mapping, Union

logger = logging.getLogger(__name__)

PREFERRED_TAG = "Preferred Question Text"

SourceKind = Literal["nih_json", "sdoh_csv", "generic_tabular"]

_WS = re.compile(r"\s+")


class CorpusError(Exception):
    """Base class for ingestion failures."""


class CorpusParseError(CorpusError):
    """Source bytes could not be decoded or parsed.

    ``offset`` is the byte offset into the file where parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class SchemaError(CorpusError):
    """A required column or field is missing."""

    def __init__(self, column: str):
        super().__init__(f"missing required column: {column!r}")
        self.column = column


@dataclass(frozen=True)
class CdeRecord:
    tiny_id: str
    steward_org: str
    designation: str
    definition: str
    permissible_values: str
    composed_text: str
    ground_truth: str | None = None

    @property
    def id(self) -> str:
        return self.tiny_id

    def to_json(self) -> dict:
        return {
            "id": self.tiny_id,
            "steward_org": self.steward_org,
            "designation": self.designation,
            "definition": self.definition,
            "permissible_values": self.permissible_values,
            "composed_text": self.composed_text,
            "ground_truth": self.ground_truth,
        }


@dataclass(frozen=True)
class SdohRecord:
    record_id: str
    domain_name: str
    screening_tool: str
    question_concept: str
    answer_concept: str
    composed_text: str

    @property
    def id(self) -> str:
        return self.record_id

    @property
    def ground_truth(self) -> str:
        return self.domain_name

    def to_json(self) -> dict:
        # Question/answer are stored in the CDE-shaped slots so every stage
        # downstream of corpus.jsonl sees one record layout.
        return {
            "id": self.record_id,
            "steward_org": self.screening_tool,
            "designation": self.question_concept,
            "definition": "",
            "permissible_values": self.answer_concept,
            "composed_text": self.composed_text,
            "ground_truth": self.domain_name,
        }


Record = Union[CdeRecord, SdohRecord]


@dataclass(frozen=True)
class Corpus:
    records: tuple[Record, ...]
    source_kind: SourceKind
    skipped: int = 0
    errors: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def texts(self) -> list[str]:
        return [r.composed_text for r in self.records]

    @property
    def ground_truth(self) -> list[str | None]:
        return [r.ground_truth for r in self.records]

    def by_id(self) -> dict[str, Record]:
        return {r.id: r for r in self.records}


# ---------------------------------------------------------------------------
# text composition


def _clean(value) -> str:
    if value is None:
        return ""
    return value if isinstance(value, str) else str(value)


def compose_embedding_text(designation: str, definition: str, permissible_values: str) -> str:
    """Join the three fields with single spaces, collapsing all whitespace runs."""
    return _WS.sub(" ", " ".join((designation, definition, permissible_values))).strip()


def flatten_permissible_values(
    values: Iterable[Mapping] | None,
    value_key: str = "valueMeaningName",
    code_key: str = "permissibleValue",
) -> str:
    """Render permissible values as ``"code: value"`` (or ``"value"``) joined by ``", "``.

    An entry with only one of the two keys, or with code equal to the value,
    renders the single string. Entries with neither are dropped.
    """
    parts = []
    for entry in values or ():
        if not isinstance(entry, Mapping):
            text = _clean(entry).strip()
            if text:
                parts.append(text)
            continue
        value = _clean(entry.get(value_key)).strip()
        code = _clean(entry.get(code_key)).strip()
        if value and code and code != value:
            parts.append(f"{code}: {value}")
        elif value or code:
            parts.append(value or code)
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# NIH CDE export


def _read_utf8(path: str | Path) -> str:
    data = Path(path).read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusParseError(f"{path}: invalid UTF-8", offset=exc.start) from exc


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


def _load_json_objects(text: str, path) -> list:
    stripped = text.lstrip()
    if stripped.startswith("["):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CorpusParseError(f"{path}: {exc.msg}", offset=_byte_offset(text, exc.pos)) from exc
        return data
    # JSON-lines stream
    objects = []
    pos = 0
    for line in text.splitlines(keepends=True):
        if line.strip():
            try:
                objects.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusParseError(
                    f"{path}: {exc.msg}", offset=_byte_offset(text, pos + exc.pos)
                ) from exc
        pos += len(line)
    return objects


def select_designation(designations) -> str:
    """Pick the designation tagged as preferred question text, else the first one."""
    entries = [d for d in designations or () if isinstance(d, Mapping)]
    for d in entries:
        if PREFERRED_TAG in (d.get("tags") or ()):
            return _clean(d.get("designation"))
    return _clean(entries[0].get("designation")) if entries else ""


def _first_definition(definitions) -> str:
    for d in definitions or ():
        if isinstance(d, Mapping) and d.get("definition"):
            return _clean(d["definition"])
    return ""


def parse_nih_json(
    path: str | Path,
    *,
    explode_designations: bool = False,
    value_key: str = "valueMeaningName",
    code_key: str = "permissibleValue",
) -> Corpus:
    """Parse an NIH CDE repository export (JSON array or JSON lines).

    In the default mode each CDE yields one record. With
    ``explode_designations`` every designation becomes its own record with id
    ``"<tinyId>.<k>"``.
    """
    text = _read_utf8(path)
    objects = _load_json_objects(text, path)
    if not isinstance(objects, list):
        raise CorpusParseError(f"{path}: expected a JSON array or JSON-lines stream")

    records: list[CdeRecord] = []
    errors: list[str] = []
    seen: set[str] = set()
    for n, obj in enumerate(objects):
        tiny_id = _clean(obj.get("tinyId")).strip() if isinstance(obj, Mapping) else ""
        if not tiny_id:
            errors.append(f"record {n}: missing tinyId")
            continue
        if tiny_id in seen:
            errors.append(f"record {n}: duplicate tinyId {tiny_id!r}")
            continue
        seen.add(tiny_id)

        steward = obj.get("stewardOrg") or {}
        steward_org = _clean(steward.get("name") if isinstance(steward, Mapping) else steward)
        definition = _first_definition(obj.get("definitions"))
        value_domain = obj.get("valueDomain") or {}
        pvs = flatten_permissible_values(
            value_domain.get("permissibleValues"), value_key=value_key, code_key=code_key
        )

        if explode_designations:
            designations = [
                _clean(d.get("designation"))
                for d in obj.get("designations") or ()
                if isinstance(d, Mapping)
            ] or [""]
            for k, designation in enumerate(designations):
                records.append(
                    CdeRecord(
                        f"{tiny_id}.{k}", steward_org, designation, definition, pvs,
                        compose_embedding_text(designation, definition, pvs),
                    )
                )
        else:
            designation = select_designation(obj.get("designations"))
            records.append(
                CdeRecord(
                    tiny_id, steward_org, designation, definition, pvs,
                    compose_embedding_text(designation, definition, pvs),
                )
            )

    _log_skips(path, errors)
    return Corpus(tuple(records), "nih_json", skipped=len(errors), errors=tuple(errors))


def _log_skips(path, errors: list[str]) -> None:
    if errors:
        logger.warning("%s: skipped %d record(s); first: %s", path, len(errors), errors[0])


# ---------------------------------------------------------------------------
# tabular sources

SDOH_COLUMNS = {
    "domain": "SDOH Domain Name",
    "tool": "Screening Tool Name",
    "question": "Question Concept (from the screening tool)",
    "answer": "Answer Concept (from screening tool)",
}

GENERIC_COLUMNS = ("id", "designation", "definition", "permissible_values", "steward_org")


def _read_table(path: str | Path, delimiter: str | None = None) -> tuple[list[str], list[list[str]]]:
    text = _read_utf8(path)
    if delimiter is None:
        delimiter = "\t" if str(path).lower().endswith((".tsv", ".tab")) else ","
    rows = list(csv.reader(io.StringIO(text, newline=""), delimiter=delimiter))
    rows = [r for r in rows if r]  # blank lines
    if not rows:
        raise CorpusParseError(f"{path}: empty table")
    header = [h.strip().lstrip("﻿") for h in rows[0]]
    return header, rows[1:]


def _column_index(header: list[str], name: str, required: bool = True) -> int | None:
    try:
        return header.index(name)
    except ValueError:
        if required:
            raise SchemaError(name) from None
        return None


def parse_sdoh_csv(
    path: str | Path,
    *,
    columns: Mapping[str, str] | None = None,
    delimiter: str | None = None,
) -> Corpus:
    """Parse a Gravity-style SDOH screening table.

    ``columns`` overrides the header names; keys are ``domain``, ``tool``,
    ``question`` and ``answer``. The tool column is optional.
    """
    names = {**SDOH_COLUMNS, **(columns or {})}
    header, rows = _read_table(path, delimiter)
    i_domain = _column_index(header, names["domain"])
    i_question = _column_index(header, names["question"])
    i_answer = _column_index(header, names["answer"])
    i_tool = _column_index(header, names["tool"], required=False)

    records: list[SdohRecord] = []
    errors: list[str] = []
    for n, row in enumerate(rows, start=1):
        if len(row) != len(header):
            errors.append(f"row {n}: expected {len(header)} cells, got {len(row)}")
            continue
        question = row[i_question].strip()
        answer = row[i_answer].strip()
        records.append(
            SdohRecord(
                record_id=f"sdoh-{n}",
                domain_name=row[i_domain].strip(),
                screening_tool=row[i_tool].strip() if i_tool is not None else "",
                question_concept=question,
                answer_concept=answer,
                composed_text=compose_embedding_text(question, "", answer),
            )
        )
    _log_skips(path, errors)
    return Corpus(tuple(records), "sdoh_csv", skipped=len(errors), errors=tuple(errors))


def parse_generic_tabular(
    path: str | Path,
    *,
    ground_truth_column: str | None = None,
    delimiter: str | None = None,
) -> Corpus:
    """Parse a CSV/TSV with columns id, designation, definition, permissible_values, steward_org.

    Only ``id`` is mandatory; other missing columns read as empty strings.
    """
    header, rows = _read_table(path, delimiter)
    idx = {c: _column_index(header, c, required=(c == "id")) for c in GENERIC_COLUMNS}
    i_truth = _column_index(header, ground_truth_column) if ground_truth_column else None

    def cell(row, i):
        return row[i].strip() if i is not None else ""

    records: list[CdeRecord] = []
    errors: list[str] = []
    seen: set[str] = set()
    for n, row in enumerate(rows, start=1):
        if len(row) != len(header):
            errors.append(f"row {n}: expected {len(header)} cells, got {len(row)}")
            continue
        rid = cell(row, idx["id"])
        if not rid or rid in seen:
            errors.append(f"row {n}: missing or duplicate id {rid!r}")
            continue
        seen.add(rid)
        designation = cell(row, idx["designation"])
        definition = cell(row, idx["definition"])
        pvs = cell(row, idx["permissible_values"])
        records.append(
            CdeRecord(
                rid, cell(row, idx["steward_org"]), designation, definition, pvs,
                compose_embedding_text(designation, definition, pvs),
                ground_truth=cell(row, i_truth) if i_truth is not None else None,
            )
        )
    _log_skips(path, errors)
    return Corpus(tuple(records), "generic_tabular", skipped=len(errors), errors=tuple(errors))


def load_corpus(path: str | Path, source_kind: SourceKind, **kwargs) -> Corpus:
    parsers = {
        "nih_json": parse_nih_json,
        "sdoh_csv": parse_sdoh_csv,
        "generic_tabular": parse_generic_tabular,
    }
    try:
        parser = parsers[source_kind]
    except KeyError:
        raise ValueError(f"unknown source kind {source_kind!r}") from None
    return parser(path, **kwargs)


# ---------------------------------------------------------------------------
# corpus.jsonl


def dump_jsonl(corpus: Corpus) -> str:
    return "".join(
        json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in corpus.records
    )


def read_jsonl(path: str | Path) -> Corpus:
    """Reload a ``corpus.jsonl`` artifact as CDE-shaped records."""
    records = []
    for line in _read_utf8(path).splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            CdeRecord(
                tiny_id=obj["id"],
                steward_org=obj.get("steward_org", ""),
                designation=obj.get("designation", ""),
                definition=obj.get("definition", ""),
                permissible_values=obj.get("permissible_values", ""),
                composed_text=obj.get("composed_text", ""),
                ground_truth=obj.get("ground_truth"),
            )
        )
    return Corpus(tuple(records), "generic_tabular")
