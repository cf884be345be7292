"""Simulated prompt-to-artifact generator closing the RL loop.

An artifact is a realized attribute set: each prompted attribute survives
independently with keep_prob, and extra attributes arrive at a Poisson rate,
drawn from a configured frequency distribution. All randomness derives from
hashed (seed, draw_index, ...) keys, so a draw index acts as a shared random
seed: generating from two different prompts with the same draw index yields
paired draws whose differences isolate the prompt change.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .rewards import (
    RewardBundle,
    ScorerSuite,
    aesthetic_reward,
    market_reward,
    relevance_reward,
    total_reward,
)

__all__ = [
    "GeneratorSpec",
    "GeneratedArtifact",
    "realize",
    "episode",
    "EpisodeDetail",
    "episode_detail",
    "PromptEnvironment",
]


@dataclass(frozen=True)
class GeneratorSpec:
    """Attribute vocabulary plus realization behaviour. keep_prob=1 and
    extra_attr_rate=0 make the generator an identity function of the prompt."""

    attributes: tuple[str, ...]
    keep_prob: float = 0.9
    extra_attr_rate: float = 1.0
    frequencies: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not 0 <= self.keep_prob <= 1:
            raise ValueError("keep_prob must be in [0, 1]")
        if self.extra_attr_rate < 0:
            raise ValueError("extra_attr_rate must be non-negative")
        if self.frequencies is not None:
            freqs = tuple(float(f) for f in self.frequencies)
            if len(freqs) != len(self.attributes):
                raise ValueError("frequencies must align with attributes")
            if any(f < 0 for f in freqs) or sum(freqs) <= 0:
                raise ValueError("frequencies must be non-negative with positive sum")
            object.__setattr__(self, "frequencies", freqs)

    def extra_probs(self) -> np.ndarray:
        if self.frequencies is None:
            return np.full(len(self.attributes), 1.0 / len(self.attributes))
        probs = np.asarray(self.frequencies, dtype=float)
        return probs / probs.sum()


@dataclass(frozen=True)
class GeneratedArtifact:
    """Realized attribute set; reproducible from its provenance."""

    attributes: frozenset[str]
    prompt: tuple[str, ...]
    draw_index: int

    def to_dict(self) -> dict:
        """JSON-ready form for episode replay logs."""
        return {
            "attributes": sorted(self.attributes),
            "prompt": list(self.prompt),
            "draw_index": self.draw_index,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratedArtifact":
        return cls(
            frozenset(obj["attributes"]),
            tuple(obj["prompt"]),
            int(obj["draw_index"]),
        )


def _derived_rng(spec_seed: int, draw_index: int, *parts: str) -> np.random.Generator:
    key = "|".join((str(spec_seed), str(draw_index), *parts)).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def realize(
    spec: GeneratorSpec, prompt_tokens: Sequence[str], draw_index: int
) -> GeneratedArtifact:
    """Realize a prompt into an attribute set.

    Keep decisions are keyed per attribute, so paired draws with overlapping
    prompts make identical decisions on the shared attributes.
    """
    known = set(spec.attributes)
    for token in prompt_tokens:
        if token not in known:
            raise KeyError(f"unknown token {token!r}")
    realized = set()
    for token in prompt_tokens:
        coin = _derived_rng(spec.seed, draw_index, "keep", token).random()
        if coin < spec.keep_prob:
            realized.add(token)
    if spec.extra_attr_rate > 0:
        rng = _derived_rng(spec.seed, draw_index, "extra")
        count = int(rng.poisson(spec.extra_attr_rate))
        if count:
            picks = rng.choice(len(spec.attributes), size=count, p=spec.extra_probs())
            realized.update(spec.attributes[i] for i in picks)
    return GeneratedArtifact(frozenset(realized), tuple(prompt_tokens), draw_index)


@dataclass(frozen=True)
class EpisodeDetail:
    """Episode rewards plus the absolute after-scores used by evaluation."""

    bundle: RewardBundle
    mean_market_score: float
    mean_aesthetic_score: float
    mean_relevance: float


def episode_detail(
    spec: GeneratorSpec,
    scorers: ScorerSuite,
    user_tokens: Sequence[str],
    adapted_tokens: Sequence[str],
    samples: int = 3,
    episode_index: int = 0,
) -> EpisodeDetail:
    """Generate paired before/after artifacts `samples` times and average.

    The "before" artifact comes from the raw user prompt, the "after" from the
    adapted prompt with the same draw index; relevance always measures the
    after-artifact against the user prompt.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    n_classes = scorers.market.n_classes
    markets, aesthetics, relevances, totals = [], [], [], []
    market_scores, aesthetic_scores, similarities = [], [], []
    for i in range(samples):
        draw_index = episode_index * samples + i
        before = realize(spec, user_tokens, draw_index)
        after = realize(spec, adapted_tokens, draw_index)
        probs_before = scorers.market.class_probs(before.attributes)
        probs_after = scorers.market.class_probs(after.attributes)
        r_mkt = market_reward(probs_before, probs_after, n_classes)
        score_before = scorers.aesthetic.score(before.attributes)
        score_after = scorers.aesthetic.score(after.attributes)
        r_aes = aesthetic_reward(score_after, score_before)
        similarity = scorers.relevance.similarity(after.attributes, user_tokens)
        r_clip = relevance_reward(similarity, scorers.weights)
        bundle = total_reward(r_mkt, r_aes, r_clip, scorers.weights)
        markets.append(bundle.market)
        aesthetics.append(bundle.aesthetic)
        relevances.append(bundle.relevance)
        totals.append(bundle.total)
        market_scores.append(int(probs_after.argmax()) / (n_classes - 1))
        aesthetic_scores.append(score_after)
        similarities.append(similarity)
    averaged = RewardBundle(
        market=float(np.mean(markets)),
        aesthetic=float(np.mean(aesthetics)),
        relevance=float(np.mean(relevances)),
        total=float(np.mean(totals)),
    )
    return EpisodeDetail(
        bundle=averaged,
        mean_market_score=float(np.mean(market_scores)),
        mean_aesthetic_score=float(np.mean(aesthetic_scores)),
        mean_relevance=float(np.mean(similarities)),
    )


def episode(
    spec: GeneratorSpec,
    scorers: ScorerSuite,
    user_tokens: Sequence[str],
    adapted_tokens: Sequence[str],
    samples: int = 3,
    episode_index: int = 0,
) -> RewardBundle:
    """Averaged reward bundle over `samples` paired draws."""
    return episode_detail(
        spec, scorers, user_tokens, adapted_tokens, samples, episode_index
    ).bundle


class PromptEnvironment:
    """Adapter between the token-id world of the policy and the attribute-token
    world of the generator and scorers."""

    def __init__(self, spec: GeneratorSpec, scorers: ScorerSuite, vocab, samples: int = 3):
        self.spec = spec
        self.scorers = scorers
        self.vocab = vocab
        self.samples = samples

    def _decode(self, ids: Iterable[int]) -> list[str]:
        # only attribute tokens reach the generator; EOS and any stray control
        # tokens contribute nothing to the artifact
        return [self.vocab.decode(i) for i in ids if self.vocab.is_attribute(i)]

    def adapted_tokens(self, user_ids: Sequence[int], action_ids: Sequence[int]) -> list[str]:
        return self._decode(user_ids) + self._decode(action_ids)

    def episode(
        self, user_ids: Sequence[int], action_ids: Sequence[int], episode_index: int
    ) -> RewardBundle:
        return self.detail(user_ids, action_ids, episode_index).bundle

    def detail(
        self, user_ids: Sequence[int], action_ids: Sequence[int], episode_index: int
    ) -> EpisodeDetail:
        user_tokens = self._decode(user_ids)
        adapted = self.adapted_tokens(user_ids, action_ids)
        return episode_detail(
            self.spec, self.scorers, user_tokens, adapted, self.samples, episode_index
        )
