"""NFT collection data model: records, trait frequencies, rarity scores, price tiers.

An item's rarity is the sum over its properties of the inverse within-collection
frequency. Items are ranked by descending rarity (ties broken by ascending
token_id) and bucketed into High / Medium / Low price tiers by rank percentile,
with ceiling boundaries so the High tier is never empty.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping

__all__ = [
    "MediaType",
    "PropertyKey",
    "NftRecord",
    "Collection",
    "FrequencyTable",
    "Tier",
    "RarityRow",
    "RarityReport",
    "build_frequency_table",
    "rarity_score",
    "rank_collection",
    "assign_tiers",
    "group_by_collection",
    "record_to_json",
    "record_from_json",
    "read_records_jsonl",
    "write_records_jsonl",
    "write_rarity_csv",
    "rarity_report_to_dict",
]


class MediaType(Enum):
    IMAGE = "image"
    VIDEO = "video"
    ANIMATION = "animation"
    OTHER = "other"


class Tier(Enum):
    HIGH = "High"
    MEDIUM = "Medium"
    LOW = "Low"


@dataclass(frozen=True, order=True)
class PropertyKey:
    """One (trait_type, value) label; equality is case-sensitive exact match."""

    trait_type: str
    value: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "trait_type", self.trait_type.strip())
        object.__setattr__(self, "value", self.value.strip())
        if not self.trait_type or not self.value:
            raise ValueError("PropertyKey fields must be non-empty")

    def token(self) -> str:
        """Flat string form used as an attribute-vocabulary token."""
        return f"{self.trait_type}:{self.value}"

    @classmethod
    def from_token(cls, token: str) -> "PropertyKey":
        """Inverse of token(); splits on the first colon."""
        trait_type, sep, value = token.partition(":")
        if not sep:
            raise ValueError(f"not an attribute token: {token!r}")
        return cls(trait_type, value)


@dataclass(frozen=True)
class NftRecord:
    """A single tokenized asset with its trait set and media metadata."""

    collection_id: str
    token_id: str
    properties: frozenset[PropertyKey]
    width: int
    height: int
    media_type: MediaType = MediaType.IMAGE
    last_price_eth: float | None = None

    def __post_init__(self) -> None:
        if not self.collection_id or not self.token_id:
            raise ValueError("collection_id and token_id must be non-empty")
        object.__setattr__(self, "properties", frozenset(self.properties))
        if self.width < 0 or self.height < 0:
            raise ValueError("width and height must be non-negative")
        if self.last_price_eth is not None and self.last_price_eth < 0:
            raise ValueError("last_price_eth must be non-negative")

    def sorted_properties(self) -> list[PropertyKey]:
        return sorted(self.properties)


@dataclass(frozen=True)
class Collection:
    """A set of records sharing one collection id; token_ids unique within it."""

    collection_id: str
    records: tuple[NftRecord, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for record in self.records:
            if record.collection_id != self.collection_id:
                raise ValueError(
                    f"record {record.token_id} belongs to {record.collection_id!r}, "
                    f"not {self.collection_id!r}"
                )
            if record.token_id in seen:
                raise ValueError(f"duplicate token_id {record.token_id!r}")
            seen.add(record.token_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[NftRecord]:
        return iter(self.records)


@dataclass(frozen=True)
class FrequencyTable:
    """Exact per-property counts over a collection; frequency = count / total."""

    counts: Mapping[PropertyKey, int]
    total_items: int

    def __post_init__(self) -> None:
        if self.total_items <= 0:
            raise ValueError("total_items must be positive")
        for key, count in self.counts.items():
            if not 1 <= count <= self.total_items:
                raise ValueError(f"count for {key.token()} outside 1..{self.total_items}")

    def __contains__(self, key: PropertyKey) -> bool:
        return key in self.counts

    def frequency(self, key: PropertyKey) -> float:
        """Fraction of items holding `key`, in (0, 1]."""
        return self.counts[key] / self.total_items


def build_frequency_table(collection: Collection) -> FrequencyTable:
    """Count, per property, how many of the collection's items carry it."""
    if len(collection) == 0:
        raise ValueError("empty collection")
    counter: Counter[PropertyKey] = Counter()
    for record in collection:
        counter.update(record.properties)
    return FrequencyTable(dict(counter), len(collection))


def rarity_score(record: NftRecord, table: FrequencyTable) -> float:
    """Sum of inverse property frequencies; properties are summed in sorted
    order so the result is independent of set iteration order."""
    total = 0.0
    for key in record.sorted_properties():
        if key not in table:
            raise KeyError(f"unknown property {key.token()!r}")
        total += table.total_items / table.counts[key]
    return total


@dataclass(frozen=True)
class RarityRow:
    token_id: str
    rarity: float
    rank: int
    percentile: float
    tier: Tier


@dataclass(frozen=True)
class RarityReport:
    """Per-item rarity, rank, percentile, and tier; rows sorted by rank."""

    collection_id: str
    rows: tuple[RarityRow, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))
        ranks = [row.rank for row in self.rows]
        if sorted(ranks) != list(range(1, len(self.rows) + 1)):
            raise ValueError("ranks must be a permutation of 1..N")

    def __len__(self) -> int:
        return len(self.rows)

    def tier_counts(self) -> dict[Tier, int]:
        counts = {tier: 0 for tier in Tier}
        for row in self.rows:
            counts[row.tier] += 1
        return counts


def rank_collection(
    collection: Collection,
    high_cut: float = 0.05,
    med_cut: float = 0.60,
) -> RarityReport:
    """Score and rank every item, rarest first; ties break on ascending token_id.

    Tiers are assigned with the given percentile cuts (see assign_tiers).
    """
    if len(collection) == 0:
        raise ValueError("empty collection")
    table = build_frequency_table(collection)
    scored = sorted(
        ((rarity_score(record, table), record.token_id) for record in collection),
        key=lambda pair: (-pair[0], pair[1]),
    )
    n = len(scored)
    rows = tuple(
        RarityRow(
            token_id=token_id,
            rarity=score,
            rank=rank,
            percentile=rank / n,
            tier=Tier.LOW,
        )
        for rank, (score, token_id) in enumerate(scored, start=1)
    )
    return assign_tiers(RarityReport(collection.collection_id, rows), high_cut, med_cut)


def assign_tiers(
    report: RarityReport,
    high_cut: float = 0.05,
    med_cut: float = 0.60,
) -> RarityReport:
    """Re-bucket a report into tiers by rank.

    Boundary counts use ceiling(cut * N), so the High tier holds at least one
    item even for tiny collections.
    """
    if not 0 < high_cut < med_cut < 1:
        raise ValueError(f"need 0 < high_cut < med_cut < 1, got {high_cut}, {med_cut}")
    n = len(report)
    n_high = math.ceil(high_cut * n)
    n_medium = math.ceil(med_cut * n)
    rows = []
    for row in report.rows:
        if row.rank <= n_high:
            tier = Tier.HIGH
        elif row.rank <= n_medium:
            tier = Tier.MEDIUM
        else:
            tier = Tier.LOW
        rows.append(RarityRow(row.token_id, row.rarity, row.rank, row.percentile, tier))
    return RarityReport(report.collection_id, tuple(rows))


def group_by_collection(records: Iterable[NftRecord]) -> dict[str, Collection]:
    """Group records into Collections, keyed by collection_id, input order kept."""
    grouped: dict[str, list[NftRecord]] = {}
    for record in records:
        grouped.setdefault(record.collection_id, []).append(record)
    return {cid: Collection(cid, tuple(items)) for cid, items in grouped.items()}


# --- serialization -----------------------------------------------------------

def record_to_json(record: NftRecord) -> dict:
    return {
        "collection_id": record.collection_id,
        "token_id": record.token_id,
        "properties": [
            {"trait_type": key.trait_type, "value": key.value}
            for key in record.sorted_properties()
        ],
        "width": record.width,
        "height": record.height,
        "media_type": record.media_type.value,
        "last_price_eth": record.last_price_eth,
    }


def record_from_json(obj: dict) -> NftRecord:
    """Build a record from one parsed JSONL object; raises ValueError with a
    short reason on any malformed field."""
    if not isinstance(obj, dict):
        raise ValueError("not an object")
    for field in ("collection_id", "token_id"):
        if field not in obj or obj[field] in (None, ""):
            raise ValueError(f"missing {field}")
        if not isinstance(obj[field], str):
            raise ValueError(f"{field} must be a string")
    raw_props = obj.get("properties", [])
    if not isinstance(raw_props, list):
        raise ValueError("properties must be a list")
    properties = set()
    for entry in raw_props:
        if not isinstance(entry, dict) or "trait_type" not in entry or "value" not in entry:
            raise ValueError("bad property entry")
        try:
            properties.add(PropertyKey(str(entry["trait_type"]), str(entry["value"])))
        except ValueError as exc:
            raise ValueError(f"bad property entry: {exc}") from exc
    width = obj.get("width", 0)
    height = obj.get("height", 0)
    if not isinstance(width, int) or not isinstance(height, int) or isinstance(width, bool):
        raise ValueError("width and height must be integers")
    media_raw = obj.get("media_type", "image")
    try:
        media_type = MediaType(media_raw)
    except ValueError:
        raise ValueError(f"unknown media_type {media_raw!r}") from None
    price = obj.get("last_price_eth")
    if price is not None and not isinstance(price, (int, float)):
        raise ValueError("last_price_eth must be a number or null")
    try:
        return NftRecord(
            collection_id=obj["collection_id"],
            token_id=obj["token_id"],
            properties=frozenset(properties),
            width=width,
            height=height,
            media_type=media_type,
            last_price_eth=float(price) if price is not None else None,
        )
    except ValueError as exc:
        raise ValueError(str(exc)) from exc


def write_records_jsonl(records: Iterable[NftRecord], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record_to_json(record), sort_keys=True))
            handle.write("\n")


def read_records_jsonl(path: Path | str) -> list[NftRecord]:
    """Strict reader: any malformed line raises. Use pipeline.parse_records for
    the lenient variant that collects rejects."""
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (json.JSONDecodeError, ValueError) as exc:
                raise ValueError(f"line {line_no}: {exc}") from exc
    return records


def write_rarity_csv(report: RarityReport, path: Path | str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["token_id", "rarity", "rank", "percentile", "tier"])
        for row in report.rows:
            writer.writerow(
                [row.token_id, repr(row.rarity), row.rank, repr(row.percentile), row.tier.value]
            )


def rarity_report_to_dict(report: RarityReport) -> dict:
    return {
        "collection_id": report.collection_id,
        "total_items": len(report),
        "tier_counts": {tier.value: count for tier, count in report.tier_counts().items()},
        "rows": [
            {
                "token_id": row.token_id,
                "rarity": row.rarity,
                "rank": row.rank,
                "percentile": row.percentile,
                "tier": row.tier.value,
            }
            for row in report.rows
        ],
    }
