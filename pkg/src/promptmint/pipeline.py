"""Metadata ingest: lenient parsing, the five staged cleaning filters with
conservation-checked statistics, and the sampling utilities used by training.

Filters run in a fixed order: non_image, resolution, min_properties, content,
duplicates. Each is a pure function over record batches returning
(kept, removed); collection-level stages drop whole collections.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .collection import (
    Collection,
    MediaType,
    NftRecord,
    PropertyKey,
    group_by_collection,
    record_from_json,
)

__all__ = [
    "Reject",
    "parse_records",
    "filter_non_image",
    "filter_resolution",
    "filter_min_properties",
    "filter_content",
    "filter_duplicates",
    "DEFAULT_BLOCKLIST",
    "STAGE_ORDER",
    "CleanOptions",
    "StageStats",
    "CleanStats",
    "run_clean_pipeline",
    "SamplerSpec",
    "Sampler",
    "collection_weighted_sampler",
    "category_balanced_sampler",
    "uniform_sampler",
    "make_sampler",
    "synth_collection",
]

T = TypeVar("T")

DEFAULT_BLOCKLIST: tuple[str, ...] = ("http", "0x", "www")

STAGE_ORDER: tuple[str, ...] = (
    "non_image",
    "resolution",
    "min_properties",
    "content",
    "duplicates",
)


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str


def parse_records(lines: Iterable[str]) -> tuple[list[NftRecord], list[Reject]]:
    """Parse line-delimited JSON records; malformed lines become Rejects with
    their line number instead of aborting the run."""
    records: list[NftRecord] = []
    rejects: list[Reject] = []
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError:
            rejects.append(Reject(line_no, "invalid json"))
            continue
        try:
            records.append(record_from_json(obj))
        except ValueError as exc:
            rejects.append(Reject(line_no, str(exc)))
    return records, rejects


# --- record-level filters ----------------------------------------------------

def filter_non_image(records: Sequence[NftRecord]) -> tuple[list[NftRecord], list[NftRecord]]:
    kept = [r for r in records if r.media_type is MediaType.IMAGE]
    removed = [r for r in records if r.media_type is not MediaType.IMAGE]
    return kept, removed


def filter_resolution(
    records: Sequence[NftRecord], min_side: int = 512
) -> tuple[list[NftRecord], list[NftRecord]]:
    """Drop records below min_side on either dimension or with non-square shape."""
    kept, removed = [], []
    for record in records:
        if min(record.width, record.height) < min_side or record.width != record.height:
            removed.append(record)
        else:
            kept.append(record)
    return kept, removed


def filter_content(
    records: Sequence[NftRecord],
    blocklist: Sequence[str] = DEFAULT_BLOCKLIST,
    predicate: Callable[[NftRecord], bool] | None = None,
) -> tuple[list[NftRecord], list[NftRecord]]:
    """Drop records whose property values match the blocklist.

    `predicate` replaces the substring check entirely (returns True to remove),
    so a richer content classifier can be plugged in.
    """
    if predicate is None:
        entries = tuple(blocklist)

        def predicate(record: NftRecord) -> bool:
            return any(
                entry in key.value for key in record.properties for entry in entries
            )

    kept = [r for r in records if not predicate(r)]
    removed = [r for r in records if predicate(r)]
    return kept, removed


# --- collection-level filters ------------------------------------------------

def filter_min_properties(
    records: Sequence[NftRecord], min_props: int = 3
) -> tuple[list[NftRecord], list[NftRecord]]:
    """Drop whole collections whose per-item median property count is below
    min_props."""
    dropped_ids = set()
    for cid, collection in group_by_collection(records).items():
        counts = [len(r.properties) for r in collection]
        if statistics.median(counts) < min_props:
            dropped_ids.add(cid)
    kept = [r for r in records if r.collection_id not in dropped_ids]
    removed = [r for r in records if r.collection_id in dropped_ids]
    return kept, removed


def duplicate_ratio(collection: Collection) -> float:
    """Fraction of items whose full property set duplicates another item's."""
    counts: dict[frozenset[PropertyKey], int] = {}
    for record in collection:
        counts[record.properties] = counts.get(record.properties, 0) + 1
    duplicated = sum(count for count in counts.values() if count >= 2)
    return duplicated / len(collection)


def filter_duplicates(
    records: Sequence[NftRecord], dup_ratio_max: float = 0.5
) -> tuple[list[NftRecord], list[NftRecord]]:
    """Drop whole collections whose duplicate ratio exceeds dup_ratio_max."""
    dropped_ids = set()
    for cid, collection in group_by_collection(records).items():
        if duplicate_ratio(collection) > dup_ratio_max:
            dropped_ids.add(cid)
    kept = [r for r in records if r.collection_id not in dropped_ids]
    removed = [r for r in records if r.collection_id in dropped_ids]
    return kept, removed


# --- pipeline driver ---------------------------------------------------------

@dataclass(frozen=True)
class CleanOptions:
    min_side: int = 512
    min_props: int = 3
    dup_ratio_max: float = 0.5
    blocklist: tuple[str, ...] = DEFAULT_BLOCKLIST


@dataclass(frozen=True)
class StageStats:
    stage: str
    records_in: int
    records_removed: int
    fraction_removed: float
    collections_removed: int | None = None


@dataclass(frozen=True)
class CleanStats:
    stages: tuple[StageStats, ...]
    records_out: int

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "stage": s.stage,
                    "records_in": s.records_in,
                    "records_removed": s.records_removed,
                    "fraction_removed": s.fraction_removed,
                    "collections_removed": s.collections_removed,
                }
                for s in self.stages
            ],
            "records_out": self.records_out,
        }

    def to_text(self) -> str:
        header = f"{'stage':<16}{'in':>8}{'removed':>9}{'fraction':>10}{'colls':>7}"
        lines = [header, "-" * len(header)]
        for s in self.stages:
            colls = "" if s.collections_removed is None else str(s.collections_removed)
            lines.append(
                f"{s.stage:<16}{s.records_in:>8}{s.records_removed:>9}"
                f"{s.fraction_removed:>10.4f}{colls:>7}"
            )
        lines.append(f"{'kept':<16}{self.records_out:>8}")
        return "\n".join(lines)


def run_clean_pipeline(
    records: Sequence[NftRecord],
    options: CleanOptions = CleanOptions(),
    stages: Sequence[str] = STAGE_ORDER,
) -> tuple[list[NftRecord], CleanStats, dict[str, list[NftRecord]]]:
    """Run the cleaning stages in order; returns kept records, stats, and the
    removed records per stage."""
    unknown = set(stages) - set(STAGE_ORDER)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    ordered = [name for name in STAGE_ORDER if name in set(stages)]

    runners: dict[str, Callable[[Sequence[NftRecord]], tuple[list, list]]] = {
        "non_image": filter_non_image,
        "resolution": lambda recs: filter_resolution(recs, options.min_side),
        "min_properties": lambda recs: filter_min_properties(recs, options.min_props),
        "content": lambda recs: filter_content(recs, options.blocklist),
        "duplicates": lambda recs: filter_duplicates(recs, options.dup_ratio_max),
    }
    collection_level = {"min_properties", "duplicates"}

    current = list(records)
    stats_rows: list[StageStats] = []
    removed_by_stage: dict[str, list[NftRecord]] = {}
    for name in ordered:
        records_in = len(current)
        kept, removed = runners[name](current)
        removed_by_stage[name] = removed
        collections_removed = (
            len({r.collection_id for r in removed}) if name in collection_level else None
        )
        stats_rows.append(
            StageStats(
                stage=name,
                records_in=records_in,
                records_removed=len(removed),
                fraction_removed=len(removed) / records_in if records_in else 0.0,
                collections_removed=collections_removed,
            )
        )
        current = kept
    return current, CleanStats(tuple(stats_rows), len(current)), removed_by_stage


# --- samplers ----------------------------------------------------------------

@dataclass(frozen=True)
class SamplerSpec:
    """Configuration carrier for the sampling strategies."""

    mode: str = "uniform"  # collection_weighted | category_balanced | uniform
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("collection_weighted", "category_balanced", "uniform"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")


class Sampler:
    """Seeded two-stage sampler: pick a group by weight, then an item uniformly
    within it. Single consumer; draws are reproducible for a given seed."""

    def __init__(
        self,
        groups: Sequence[Sequence[T]],
        weights: Sequence[float],
        seed: int,
    ) -> None:
        if len(groups) != len(weights):
            raise ValueError("groups and weights must align")
        total = float(sum(weights))
        if total <= 0:
            raise ValueError("weights must sum to a positive value")
        self._groups = [list(g) for g in groups]
        self._weights = np.asarray(weights, dtype=float) / total
        self._rng = np.random.default_rng(seed)

    @property
    def weights(self) -> np.ndarray:
        return self._weights.copy()

    def draw(self) -> T:
        index = int(self._rng.choice(len(self._groups), p=self._weights))
        group = self._groups[index]
        return group[int(self._rng.integers(len(group)))]

    def draw_many(self, n: int) -> list[T]:
        return [self.draw() for _ in range(n)]


def collection_weighted_sampler(
    collections: Sequence[Collection], alpha: float = 0.5, seed: int = 0
) -> Sampler:
    """Sample items with collection weight proportional to size**alpha, damping
    the pull of very large collections."""
    if not collections:
        raise ValueError("no collections to sample from")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    groups = [list(c.records) for c in collections]
    weights = [len(c) ** alpha for c in collections]
    return Sampler(groups, weights, seed)


def category_balanced_sampler(
    categories: Mapping[T, Sequence], seed: int = 0
) -> Sampler:
    """Sample each category with equal probability, then uniformly within it."""
    if not categories:
        raise ValueError("no categories to sample from")
    for label, items in categories.items():
        if len(items) == 0:
            raise ValueError(f"empty category {label!r}")
    groups = [list(items) for items in categories.values()]
    return Sampler(groups, [1.0] * len(groups), seed)


def uniform_sampler(items: Sequence[T], seed: int = 0) -> Sampler:
    if len(items) == 0:
        raise ValueError("no items to sample from")
    return Sampler([list(items)], [1.0], seed)


def make_sampler(
    spec: SamplerSpec,
    collections: Sequence[Collection] | None = None,
    categories: Mapping | None = None,
    items: Sequence | None = None,
) -> Sampler:
    """Build the sampler a SamplerSpec describes from the matching data source."""
    if spec.mode == "collection_weighted":
        if collections is None:
            raise ValueError("collection_weighted sampling needs collections")
        return collection_weighted_sampler(collections, spec.alpha, spec.seed)
    if spec.mode == "category_balanced":
        if categories is None:
            raise ValueError("category_balanced sampling needs categories")
        return category_balanced_sampler(categories, spec.seed)
    if items is None:
        raise ValueError("uniform sampling needs items")
    return uniform_sampler(items, spec.seed)


# --- synthetic data ----------------------------------------------------------

def synth_collection(
    n_items: int,
    n_trait_types: int,
    values_per_type: int,
    zipf_skew: float = 1.0,
    seed: int = 0,
    collection_id: str = "synth",
) -> Collection:
    """Seeded synthetic collection: each item gets one value per trait type,
    with value probabilities following a Zipf-style power law so rarity tiers
    come out non-trivial. zipf_skew=0 yields near-uniform frequencies."""
    if n_items <= 0 or n_trait_types <= 0 or values_per_type <= 0:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, values_per_type + 1, dtype=float)
    probs = ranks ** (-zipf_skew)
    probs /= probs.sum()
    width = len(str(n_items - 1))
    records = []
    choices = rng.choice(values_per_type, size=(n_items, n_trait_types), p=probs)
    for i in range(n_items):
        properties = frozenset(
            PropertyKey(f"t{t:02d}", f"v{choices[i, t]:02d}")
            for t in range(n_trait_types)
        )
        records.append(
            NftRecord(
                collection_id=collection_id,
                token_id=f"{i:0{width}d}",
                properties=properties,
                width=512,
                height=512,
                media_type=MediaType.IMAGE,
            )
        )
    return Collection(collection_id, tuple(records))
