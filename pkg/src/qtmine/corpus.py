"""Ingestion of literature documents, clinical-trial records, approvals, and analogy sets.

File formats:
  corpus     JSON-lines, one document per line; required fields id, title,
             abstract, body; publish_year optional (undated documents are kept
             for training but excluded from year-limited views)
  trials     CSV header trial_id,year,drugs,condition; drugs semicolon-separated
  aliases    CSV header trade_name,scientific_name
  approvals  CSV header drug,approval_year
  analogies  TSV columns category, subcategory, a, b, c, d
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataFormatError
from .util import get_logger, kv

log = get_logger(__name__)

YEAR_MIN, YEAR_MAX = 1900, 2100
SUBCATEGORIES = ("antiviral", "grammar")


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    abstract: str
    body: str
    publish_year: int | None = None
    source: str = ""
    license: str = ""

    def text(self) -> str:
        """Document text used for tokenizer and model training."""
        return "\n".join(part for part in (self.title, self.abstract, self.body) if part)


@dataclass
class DocumentSet:
    documents: list[Document]
    test_fraction: float = 0.20
    malformed_count: int = 0

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def split(self, seed: int, test_fraction: float | None = None) -> tuple["DocumentSet", "DocumentSet"]:
        """Deterministic train/test split by hashing document id with the seed.

        Membership depends only on (seed, id), so it is byte-identical across
        runs and stable under corpus reordering or insertion of new documents.
        """
        frac = self.test_fraction if test_fraction is None else test_fraction
        train, test = [], []
        for doc in self.documents:
            digest = hashlib.sha256(f"{seed}:{doc.id}".encode("utf-8")).digest()
            u = int.from_bytes(digest[:8], "big") / 2**64
            (test if u < frac else train).append(doc)
        return DocumentSet(train, frac), DocumentSet(test, frac)


@dataclass(frozen=True)
class TrialRecord:
    trial_id: str
    year: int
    drugs: tuple[str, ...]
    condition: str


@dataclass
class AliasMap:
    """Trade-name to scientific-name map; scientific names are fixed points."""

    pairs: dict[str, str] = field(default_factory=dict)

    def canonical(self, name: str) -> str:
        key = name.strip().lower()
        return self.pairs.get(key, key)

    def validate(self) -> None:
        for trade, sci in self.pairs.items():
            if sci in self.pairs and self.pairs[sci] != sci:
                raise DataFormatError(
                    f"alias map not idempotent: {trade!r} -> {sci!r} -> {self.pairs[sci]!r}"
                )


@dataclass(frozen=True)
class ApprovalRecord:
    drug: str
    approval_year: int


@dataclass(frozen=True)
class AnalogyItem:
    item_id: str
    category: str
    subcategory: str
    a: str
    b: str
    c: str
    d: str


def _parse_document(obj: dict) -> Document:
    for key in ("id", "title", "abstract", "body"):
        if key not in obj or obj[key] is None:
            raise ValueError(f"missing required field {key!r}")
    year = obj.get("publish_year")
    if year is not None:
        if not isinstance(year, int) or isinstance(year, bool):
            raise ValueError(f"publish_year must be an integer, got {year!r}")
        if not YEAR_MIN <= year <= YEAR_MAX:
            raise ValueError(f"publish_year {year} outside [{YEAR_MIN}, {YEAR_MAX}]")
    return Document(
        id=str(obj["id"]),
        title=str(obj["title"]),
        abstract=str(obj["abstract"]),
        body=str(obj["body"]),
        publish_year=year,
        source=str(obj.get("source", "")),
        license=str(obj.get("license", "")),
    )


def load_corpus(path: str | Path) -> DocumentSet:
    """Load a JSON-lines corpus in file order, skipping malformed lines with a count."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"corpus file not found: {path}")
    documents: list[Document] = []
    seen_ids: set[str] = set()
    malformed = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                doc = _parse_document(obj)
                if doc.id in seen_ids:
                    raise ValueError(f"duplicate document id {doc.id!r}")
            except ValueError as exc:
                malformed += 1
                log.warning(kv(event="malformed_document", line=lineno, reason=str(exc)))
                continue
            seen_ids.add(doc.id)
            documents.append(doc)
    log.info(kv(event="corpus_loaded", path=path, documents=len(documents), malformed=malformed))
    return DocumentSet(documents, malformed_count=malformed)


def filter_by_year(docs: DocumentSet, cutoff: int) -> DocumentSet:
    """Documents with publish_year <= cutoff, original order; undated ones drop out."""
    kept = [d for d in docs.documents if d.publish_year is not None and d.publish_year <= cutoff]
    return DocumentSet(kept, docs.test_fraction)


def load_aliases(path: str | Path) -> AliasMap:
    rows = _read_csv(path, ("trade_name", "scientific_name"))
    pairs = {}
    for row in rows:
        trade = row["trade_name"].strip().lower()
        sci = row["scientific_name"].strip().lower()
        if trade and sci:
            pairs[trade] = sci
    aliases = AliasMap(pairs)
    aliases.validate()
    return aliases


def load_trials(path: str | Path, aliases: AliasMap | None = None) -> list[TrialRecord]:
    """Load trial rows; drug names are lower-cased, alias-collapsed, de-duplicated."""
    aliases = aliases if aliases is not None else AliasMap()
    records: list[TrialRecord] = []
    for lineno, row in enumerate(_read_csv(path, ("trial_id", "year", "drugs", "condition")), start=2):
        try:
            year = int(row["year"].strip())
        except ValueError:
            log.warning(kv(event="trial_skipped", line=lineno, reason="unparseable_year", value=row["year"]))
            continue
        drugs: list[str] = []
        for raw in row["drugs"].split(";"):
            name = aliases.canonical(raw)
            if name and name not in drugs:
                drugs.append(name)
        if not drugs:
            log.warning(kv(event="trial_skipped", line=lineno, reason="empty_drugs"))
            continue
        records.append(
            TrialRecord(
                trial_id=row["trial_id"].strip(),
                year=year,
                drugs=tuple(drugs),
                condition=row["condition"].strip(),
            )
        )
    log.info(kv(event="trials_loaded", path=path, records=len(records)))
    return records


def candidates_at_year(trials: list[TrialRecord], year: int) -> list[str]:
    """Unique canonical drugs over records dated at or before `year`, sorted."""
    names = {drug for rec in trials if rec.year <= year for drug in rec.drugs}
    return sorted(names)


def load_approvals(path: str | Path, aliases: AliasMap | None = None) -> list[ApprovalRecord]:
    aliases = aliases if aliases is not None else AliasMap()
    records = []
    for lineno, row in enumerate(_read_csv(path, ("drug", "approval_year")), start=2):
        try:
            year = int(row["approval_year"].strip())
        except ValueError:
            log.warning(kv(event="approval_skipped", line=lineno, reason="unparseable_year"))
            continue
        records.append(ApprovalRecord(drug=aliases.canonical(row["drug"]), approval_year=year))
    return records


def load_analogies(path: str | Path) -> list[AnalogyItem]:
    """Load the analogy TSV; item ids are `category#ordinal` within each category."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"analogies file not found: {path}")
    items: list[AnalogyItem] = []
    per_category: dict[str, int] = {}
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 tab-separated columns, got {len(cols)}")
            category, subcategory, a, b, c, d = (col.strip() for col in cols)
            if subcategory not in SUBCATEGORIES:
                raise DataFormatError(
                    f"{path}:{lineno}: subcategory must be one of {SUBCATEGORIES}, got {subcategory!r}"
                )
            if not all((a, b, c, d)):
                raise DataFormatError(f"{path}:{lineno}: analogy terms must be nonempty")
            ordinal = per_category.get(category, 0)
            per_category[category] = ordinal + 1
            items.append(AnalogyItem(f"{category}#{ordinal}", category, subcategory, a, b, c, d))
    for category, count in per_category.items():
        log.info(kv(event="analogy_category", category=category, items=count))
    return items


def group_by_category(items: list[AnalogyItem]) -> dict[tuple[str, str], list[AnalogyItem]]:
    groups: dict[tuple[str, str], list[AnalogyItem]] = {}
    for item in items:
        groups.setdefault((item.category, item.subcategory), []).append(item)
    return groups


def _read_csv(path: str | Path, required: tuple[str, ...]) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"file not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise DataFormatError(f"{path}: missing required column {column!r}")
        return [{k: (v or "") for k, v in row.items()} for row in reader]
