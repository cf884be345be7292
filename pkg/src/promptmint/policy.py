"""Token-level actor-critic prompt policy.

The backbone is a small context encoder: mean-pooled embeddings of the context,
the last token's embedding, and a position embedding feed one tanh hidden
layer; an actor head yields next-token logits and a critic head a scalar state
value. Forward and backward passes are explicit so gradients can be checked
against finite differences.

The action space is the attribute tokens plus EOS; the two structural control
tokens (BOS and the ". Add details:" separator) are masked out of the actor's
distribution, which therefore normalizes over vocabulary size minus two.

Supervised fine-tuning maximizes next-token likelihood over the output segment
of constructed pairs; PPO then optimizes a clipped surrogate with per-token KL
shaping against the frozen SFT policy and a mean-squared-error critic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .collection import Collection
from .optim import Adam
from .rewards import RewardBundle

__all__ = [
    "BOS_TOKEN",
    "SEP_TOKEN",
    "EOS_TOKEN",
    "Vocabulary",
    "ActorCritic",
    "Completion",
    "sample_completion",
    "action_log_probs",
    "SftExample",
    "build_sft_pairs",
    "SftConfig",
    "sft_train",
    "policy_nll",
    "policy_gradcheck",
    "write_sft_dataset",
    "read_sft_dataset",
    "Trajectory",
    "PpoConfig",
    "PpoMetricsRow",
    "compute_returns",
    "advantage",
    "ppo_surrogate",
    "critic_loss",
    "kl_step",
    "exact_kl",
    "sample_prompt",
    "PolicyDivergenceError",
    "ppo_train_loop",
]

BOS_TOKEN = "<bos>"
SEP_TOKEN = ". Add details:"
EOS_TOKEN = "<eos>"


@dataclass(frozen=True)
class Vocabulary:
    """Attribute tokens plus the three control tokens, densely indexed with
    attributes first so attribute ids double as feature indices."""

    attributes: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if len(set(self.attributes)) != len(self.attributes):
            raise ValueError("duplicate attribute tokens")
        for control in (BOS_TOKEN, SEP_TOKEN, EOS_TOKEN):
            if control in self.attributes:
                raise ValueError(f"attribute collides with control token {control!r}")

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    @property
    def size(self) -> int:
        return len(self.attributes) + 3

    @property
    def bos_id(self) -> int:
        return len(self.attributes)

    @property
    def sep_id(self) -> int:
        return len(self.attributes) + 1

    @property
    def eos_id(self) -> int:
        return len(self.attributes) + 2

    @property
    def tokens(self) -> tuple[str, ...]:
        return (*self.attributes, BOS_TOKEN, SEP_TOKEN, EOS_TOKEN)

    @property
    def n_actions(self) -> int:
        return self.n_attributes + 1  # attributes plus EOS

    def encode(self, token: str) -> int:
        index = self._index()
        if token not in index:
            raise KeyError(f"unknown token {token!r}")
        return index[token]

    def _index(self) -> dict[str, int]:
        cached = getattr(self, "_index_cache", None)
        if cached is None:
            cached = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise KeyError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def is_attribute(self, token_id: int) -> bool:
        return 0 <= token_id < self.n_attributes

    @classmethod
    def from_collection(cls, collection: Collection) -> "Vocabulary":
        tokens = sorted({key.token() for record in collection for key in record.properties})
        return cls(tuple(tokens))

    def to_dict(self) -> dict:
        return {
            "attributes": list(self.attributes),
            "bos": BOS_TOKEN,
            "sep": SEP_TOKEN,
            "eos": EOS_TOKEN,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["attributes"]))

    def save(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, sort_keys=True)

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


class ActorCritic:
    """Shared-backbone policy: actor head over the vocabulary, critic head to a
    scalar value. Heads start at zero, so the untrained actor is exactly
    uniform over the action space."""

    def __init__(
        self,
        vocab: Vocabulary,
        embed_dim: int = 24,
        hidden_dim: int = 48,
        max_positions: int = 32,
        seed: int = 0,
    ) -> None:
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.max_positions = max_positions
        rng = np.random.default_rng(seed)
        d, h, v = embed_dim, hidden_dim, vocab.size
        self.params: dict[str, np.ndarray] = {
            "emb": rng.normal(0.0, 0.1, (v, d)),
            "pos": rng.normal(0.0, 0.1, (max_positions, d)),
            "w1": rng.normal(0.0, np.sqrt(2.0 / (3 * d + h)), (3 * d, h)),
            "b1": np.zeros(h),
            "wa": np.zeros((h, v)),
            "ba": np.zeros(v),
            "wv": np.zeros(h),
            "bv": np.zeros(()),
        }
        self._mask = np.zeros(v)
        self._mask[vocab.bos_id] = -np.inf
        self._mask[vocab.sep_id] = -np.inf

    def copy(self) -> "ActorCritic":
        clone = ActorCritic(
            self.vocab, self.embed_dim, self.hidden_dim, self.max_positions
        )
        clone.params = {name: value.copy() for name, value in self.params.items()}
        return clone

    def _check_ids(self, ids: Sequence[int]) -> None:
        for token_id in ids:
            if not 0 <= token_id < self.vocab.size:
                raise KeyError(f"token id {token_id} out of range")

    # --- full-sequence pass ---------------------------------------------

    def sequence_pass(self, tokens: Sequence[int]) -> dict:
        """Forward pass producing, for every position j, the masked next-token
        log-probabilities and state value conditioned on [BOS] + tokens[:j].

        Returns a cache consumed by sequence_backward.
        """
        self._check_ids(tokens)
        length = len(tokens)
        if length == 0:
            raise ValueError("empty sequence")
        p = self.params
        context = np.array([self.vocab.bos_id, *tokens[:-1]], dtype=int)
        emb_rows = p["emb"][context]                      # (L, d)
        counts = np.arange(1, length + 1, dtype=float)[:, None]
        bag = np.cumsum(emb_rows, axis=0) / counts        # (L, d)
        last = emb_rows                                   # (L, d)
        pos_idx = np.minimum(np.arange(1, length + 1), self.max_positions - 1)
        pos = p["pos"][pos_idx]                           # (L, d)
        features = np.concatenate([bag, last, pos], axis=1)
        hidden = np.tanh(features @ p["w1"] + p["b1"])    # (L, h)
        logits = hidden @ p["wa"] + p["ba"] + self._mask  # (L, V)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z                       # (L, V)
        values = hidden @ p["wv"] + p["bv"]               # (L,)
        return {
            "tokens": np.asarray(tokens, dtype=int),
            "context": context,
            "counts": counts,
            "pos_idx": pos_idx,
            "features": features,
            "hidden": hidden,
            "log_probs": log_probs,
            "probs": np.exp(log_probs),
            "values": values,
        }

    def sequence_backward(
        self, cache: dict, dlogits: np.ndarray, dvalues: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients from upstream logit/value gradients."""
        p = self.params
        grads = {name: np.zeros_like(value) for name, value in p.items()}
        hidden = cache["hidden"]
        grads["wa"] = hidden.T @ dlogits
        grads["ba"] = dlogits.sum(axis=0)
        grads["wv"] = hidden.T @ dvalues
        grads["bv"] = np.asarray(dvalues.sum())
        dhidden = dlogits @ p["wa"].T + np.outer(dvalues, p["wv"])
        dz = dhidden * (1.0 - hidden**2)
        grads["w1"] = cache["features"].T @ dz
        grads["b1"] = dz.sum(axis=0)
        dfeatures = dz @ p["w1"].T
        d = self.embed_dim
        dbag = dfeatures[:, :d]
        dlast = dfeatures[:, d : 2 * d]
        dpos = dfeatures[:, 2 * d :]
        # bag_j averages context rows 0..j, so row i receives the suffix sum of
        # dbag_j / (j + 1) over j >= i
        weighted = dbag / cache["counts"]
        suffix = np.cumsum(weighted[::-1], axis=0)[::-1]
        np.add.at(grads["emb"], cache["context"], suffix + dlast)
        np.add.at(grads["pos"], cache["pos_idx"], dpos)
        return grads

    # --- single-step API (sampling) --------------------------------------

    def step(self, context_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray, float]:
        """Masked logits, probabilities, and value for one context
        ([BOS] is prepended internally)."""
        self._check_ids(context_ids)
        p = self.params
        context = np.array([self.vocab.bos_id, *context_ids], dtype=int)
        emb_rows = p["emb"][context]
        bag = emb_rows.mean(axis=0)
        last = emb_rows[-1]
        pos = p["pos"][min(len(context), self.max_positions - 1)]
        features = np.concatenate([bag, last, pos])
        hidden = np.tanh(features @ p["w1"] + p["b1"])
        logits = hidden @ p["wa"] + p["ba"] + self._mask
        shifted = logits - logits.max()
        probs = np.exp(shifted)
        probs /= probs.sum()
        value = float(hidden @ p["wv"] + p["bv"])
        return logits, probs, value

    def action_probs(self, context_ids: Sequence[int]) -> np.ndarray:
        return self.step(context_ids)[1]

    # --- persistence hooks ------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "attributes": list(self.vocab.attributes),
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "max_positions": self.max_positions,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "ActorCritic":
        policy = cls(
            Vocabulary(tuple(meta["attributes"])),
            embed_dim=meta["embed_dim"],
            hidden_dim=meta["hidden_dim"],
            max_positions=meta["max_positions"],
        )
        for name in policy.params:
            policy.params[name] = arrays[name].copy()
        return policy


# --- sampling -----------------------------------------------------------

@dataclass(frozen=True)
class Completion:
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    values: tuple[float, ...]


def sample_completion(
    policy: ActorCritic,
    prompt_ids: Sequence[int],
    max_len: int = 12,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> Completion:
    """Sample autoregressively until EOS or max_len tokens.

    Per-step log-probs are recorded under the sampling distribution
    (temperature-scaled); temperature 0 is greedy argmax with the log-prob of
    the untempered actor distribution.
    """
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if rng is None:
        rng = np.random.default_rng(seed)
    context = list(prompt_ids)
    actions: list[int] = []
    log_probs: list[float] = []
    values: list[float] = []
    for _ in range(max_len):
        logits, probs, value = policy.step(context)
        if temperature == 0:
            action = int(probs.argmax())
            log_prob = float(np.log(probs[action]))
        else:
            scaled = (logits - logits.max()) / temperature
            sample_probs = np.exp(scaled)
            sample_probs /= sample_probs.sum()
            action = int(rng.choice(policy.vocab.size, p=sample_probs))
            log_prob = float(np.log(sample_probs[action]))
        actions.append(action)
        log_probs.append(log_prob)
        values.append(value)
        context.append(action)
        if action == policy.vocab.eos_id:
            break
    return Completion(tuple(actions), tuple(log_probs), tuple(values))


def action_log_probs(
    policy: ActorCritic, prompt_ids: Sequence[int], action_ids: Sequence[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Recompute per-action log-probs and state values for a fixed rollout."""
    if not action_ids:
        return np.zeros(0), np.zeros(0)
    tokens = [*prompt_ids, *action_ids]
    cache = policy.sequence_pass(tokens)
    rows = np.arange(len(prompt_ids), len(tokens))
    picked = cache["log_probs"][rows, np.asarray(action_ids, dtype=int)]
    return picked, cache["values"][rows]


# --- supervised fine-tuning -----------------------------------------------

@dataclass(frozen=True)
class SftExample:
    """Token sequence [input..., SEP, output..., EOS]; sep_index locates SEP."""

    tokens: tuple[int, ...]
    sep_index: int

    @property
    def target_positions(self) -> range:
        return range(self.sep_index + 1, len(self.tokens))


def build_sft_pairs(
    records: Iterable,
    vocab: Vocabulary,
    discard_prob: float = 0.5,
    seed: int = 0,
) -> tuple[list[SftExample], int]:
    """Build pairs by shuffling each record's properties, keeping a random
    non-empty subset as the input, and emitting
    [input tokens][SEP][full shuffled tokens][EOS].

    Records with zero properties are skipped; the skip count is returned.
    """
    if not 0 <= discard_prob < 1:
        raise ValueError("discard_prob must be in [0, 1)")
    rng = np.random.default_rng(seed)
    examples: list[SftExample] = []
    skipped = 0
    for record in records:
        tokens = [key.token() for key in record.sorted_properties()]
        if not tokens:
            skipped += 1
            continue
        order = rng.permutation(len(tokens))
        shuffled = [vocab.encode(tokens[i]) for i in order]
        keep = rng.random(len(shuffled)) >= discard_prob
        if not keep.any():
            keep[int(rng.integers(len(shuffled)))] = True
        input_ids = [t for t, k in zip(shuffled, keep) if k]
        sequence = (*input_ids, vocab.sep_id, *shuffled, vocab.eos_id)
        examples.append(SftExample(sequence, sep_index=len(input_ids)))
    return examples, skipped


def write_sft_dataset(examples: Sequence[SftExample], path: Path | str) -> None:
    """One space-separated token-index sequence per line; the SEP position is
    recoverable because SEP occurs exactly once per sequence."""
    with open(path, "w", encoding="utf-8") as handle:
        for example in examples:
            handle.write(" ".join(str(t) for t in example.tokens))
            handle.write("\n")


def read_sft_dataset(path: Path | str, vocab: Vocabulary) -> list[SftExample]:
    examples = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            tokens = tuple(int(part) for part in line.split())
            sep_positions = [i for i, t in enumerate(tokens) if t == vocab.sep_id]
            if len(sep_positions) != 1:
                raise ValueError("sequence must contain SEP exactly once")
            examples.append(SftExample(tokens, sep_index=sep_positions[0]))
    return examples


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 0.01
    iterations: int = 1500
    batch_size: int = 8
    seed: int = 0


def _sft_batch_loss_grads(policy: ActorCritic, batch: Sequence[SftExample]):
    total_targets = sum(len(ex.target_positions) for ex in batch)
    loss = 0.0
    grads = {name: np.zeros_like(value) for name, value in policy.params.items()}
    for example in batch:
        cache = policy.sequence_pass(example.tokens)
        rows = np.fromiter(example.target_positions, dtype=int)
        targets = cache["tokens"][rows]
        loss += -cache["log_probs"][rows, targets].sum()
        dlogits = np.zeros_like(cache["probs"])
        dlogits[rows] = cache["probs"][rows]
        dlogits[rows, targets] -= 1.0
        dlogits /= total_targets
        example_grads = policy.sequence_backward(
            cache, dlogits, np.zeros(len(example.tokens))
        )
        for name in grads:
            grads[name] += example_grads[name]
    return loss / total_targets, grads


def sft_train(
    policy: ActorCritic, dataset: Sequence[SftExample], config: SftConfig = SftConfig()
) -> tuple[ActorCritic, list[float]]:
    """Minimize mean next-token NLL over output segments; returns the updated
    policy and per-iteration loss history."""
    if not dataset:
        raise ValueError("empty SFT dataset")
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(policy.params, learning_rate=config.learning_rate)
    history: list[float] = []
    for _ in range(config.iterations):
        picks = rng.integers(len(dataset), size=min(config.batch_size, len(dataset)))
        batch = [dataset[i] for i in picks]
        loss, grads = _sft_batch_loss_grads(policy, batch)
        optimizer.step(grads)
        history.append(loss)
    return policy, history


def policy_nll(policy: ActorCritic, dataset: Sequence[SftExample]) -> float:
    """Mean next-token NLL (nats per output token) over a dataset."""
    total_loss = 0.0
    total_targets = 0
    for example in dataset:
        cache = policy.sequence_pass(example.tokens)
        rows = np.fromiter(example.target_positions, dtype=int)
        targets = cache["tokens"][rows]
        total_loss += -cache["log_probs"][rows, targets].sum()
        total_targets += len(rows)
    return total_loss / total_targets


def policy_gradcheck(policy: ActorCritic, example: SftExample, step: float = 1e-5) -> float:
    """Max relative error of the SFT NLL gradient against central differences."""
    _, grads = _sft_batch_loss_grads(policy, [example])
    worst = 0.0
    for name, param in policy.params.items():
        flat = param.reshape(-1)
        analytic = grads[name].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + step
            loss_plus, _ = _sft_batch_loss_grads(policy, [example])
            flat[j] = original - step
            loss_minus, _ = _sft_batch_loss_grads(policy, [example])
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2 * step)
            denom = max(abs(analytic[j]), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic[j] - numeric) / denom)
    return worst


# --- PPO ------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """One sampled episode: the prompt, the action suffix, and everything the
    update needs (log-probs under rollout and SFT policies, values, per-token
    KL, terminal reward, and returns)."""

    prompt: tuple[int, ...]
    actions: tuple[int, ...]
    logp_rollout: tuple[float, ...]
    logp_sft: tuple[float, ...]
    values: tuple[float, ...]
    kl: tuple[float, ...]
    terminal_reward: float
    returns: tuple[float, ...]


@dataclass(frozen=True)
class PpoConfig:
    clip_epsilon: float = 0.2
    discount: float = 1.0
    kl_weight: float = 0.2
    policy_loss_weight: float = 1.0
    critic_loss_weight: float = 0.2
    samples_per_prompt: int = 3
    learning_rate: float = 0.01
    prompts_per_iter: int = 8
    epochs_per_batch: int = 4
    iterations: int = 500
    max_len: int = 12
    temperature: float = 1.0
    prompt_len: tuple[int, int] = (1, 3)
    kl_ceiling: float = 10.0
    ratio_reference: str = "rollout"  # "rollout" or "sft" (the literal objective)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must be in (0, 1]")
        if self.samples_per_prompt < 1:
            raise ValueError("samples_per_prompt must be at least 1")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")
        if self.ratio_reference not in ("rollout", "sft"):
            raise ValueError("ratio_reference must be 'rollout' or 'sft'")
        lo, hi = self.prompt_len
        if lo < 0 or hi < lo:
            raise ValueError("prompt_len must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class PpoMetricsRow:
    iteration: int
    mean_reward: float
    mean_r_mkt: float
    mean_r_aes: float
    mean_r_clip: float
    mean_kl: float
    policy_loss: float
    critic_loss: float


class PolicyDivergenceError(RuntimeError):
    """Raised when mean |KL| per token exceeds the configured ceiling."""


def compute_returns(
    kl: Sequence[float],
    terminal_reward: float,
    discount: float = 1.0,
    kl_weight: float = 0.2,
) -> np.ndarray:
    """Per-step shaped reward is -kl_weight * kl_t, with the terminal reward
    added at the final step; returns are the discounted suffix sums."""
    kl = np.asarray(kl, dtype=float)
    rewards = -kl_weight * kl
    if rewards.size:
        rewards[-1] += terminal_reward
    returns = np.zeros_like(rewards)
    running = 0.0
    for t in range(rewards.size - 1, -1, -1):
        running = rewards[t] + discount * running
        returns[t] = running
    return returns


def advantage(returns, values):
    """A = G_t - V(s_t)."""
    return np.asarray(returns, dtype=float) - np.asarray(values, dtype=float)


def ppo_surrogate(ratio, adv, clip_epsilon: float = 0.2):
    """Clipped surrogate min(ratio * A, g(eps, A)); maximized by the trainer
    (the optimizer minimizes its negation)."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    if np.any(ratio <= 0):
        raise ValueError("probability ratio must be positive")
    clipped = np.where(adv >= 0, (1 + clip_epsilon) * adv, (1 - clip_epsilon) * adv)
    result = np.minimum(ratio * adv, clipped)
    return float(result) if result.ndim == 0 else result


def critic_loss(values, returns) -> float:
    values = np.asarray(values, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if values.shape != returns.shape:
        raise ValueError("values and returns must align")
    return float(((values - returns) ** 2).mean())


def kl_step(logp_current: float, logp_sft: float) -> float:
    """Per-token sampled KL estimate for the taken action."""
    return logp_current - logp_sft


def exact_kl(p, q) -> float:
    """KL(p || q) for two explicit categorical distributions."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return float("inf")
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def sample_prompt(
    rng: np.random.Generator, vocab: Vocabulary, lo: int, hi: int
) -> tuple[int, ...]:
    """Draw a user prompt: a few distinct attribute tokens, uniformly."""
    n = int(rng.integers(lo, hi + 1))
    if n == 0:
        return ()
    ids = rng.choice(vocab.n_attributes, size=min(n, vocab.n_attributes), replace=False)
    return tuple(int(i) for i in ids)


class EpisodeEnv(Protocol):
    def episode(
        self, user_ids: Sequence[int], action_ids: Sequence[int], episode_index: int
    ) -> RewardBundle: ...


def ppo_train_loop(
    policy: ActorCritic,
    sft_policy: ActorCritic,
    env: EpisodeEnv,
    config: PpoConfig = PpoConfig(),
) -> tuple[ActorCritic, list[PpoMetricsRow]]:
    """PPO over terminal-reward episodes with per-token KL shaping.

    Each iteration samples user prompts, rolls out one completion per prompt,
    scores it through the environment (which averages the configured number of
    generator draws), and updates actor and critic on the combined loss
    policy_loss_weight * (-surrogate) + critic_loss_weight * critic MSE.

    Raises PolicyDivergenceError when mean |KL| per token crosses the ceiling.
    """
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(policy.params, learning_rate=config.learning_rate)
    metrics: list[PpoMetricsRow] = []
    episode_index = 0
    for iteration in range(config.iterations):
        trajectories: list[Trajectory] = []
        bundles: list[RewardBundle] = []
        for _ in range(config.prompts_per_iter):
            user = sample_prompt(rng, policy.vocab, *config.prompt_len)
            prompt = (*user, policy.vocab.sep_id)
            completion = sample_completion(
                policy, prompt, config.max_len, config.temperature, rng=rng
            )
            logp_sft, _ = action_log_probs(sft_policy, prompt, completion.actions)
            bundle = env.episode(user, completion.actions, episode_index)
            episode_index += 1
            kl = np.asarray(completion.log_probs) - logp_sft
            returns = compute_returns(
                kl, bundle.total, config.discount, config.kl_weight
            )
            trajectories.append(
                Trajectory(
                    prompt=prompt,
                    actions=completion.actions,
                    logp_rollout=completion.log_probs,
                    logp_sft=tuple(float(x) for x in logp_sft),
                    values=completion.values,
                    kl=tuple(float(x) for x in kl),
                    terminal_reward=bundle.total,
                    returns=tuple(float(x) for x in returns),
                )
            )
            bundles.append(bundle)

        total_steps = sum(len(t.actions) for t in trajectories)
        mean_abs_kl = (
            sum(abs(k) for t in trajectories for k in t.kl) / total_steps
            if total_steps
            else 0.0
        )

        last_policy_loss = 0.0
        last_critic_loss = 0.0
        for _ in range(config.epochs_per_batch):
            grads = {name: np.zeros_like(p) for name, p in policy.params.items()}
            policy_loss_acc = 0.0
            critic_loss_acc = 0.0
            for traj in trajectories:
                tokens = [*traj.prompt, *traj.actions]
                cache = policy.sequence_pass(tokens)
                rows = np.arange(len(traj.prompt), len(tokens))
                action_ids = np.asarray(traj.actions, dtype=int)
                logp_cur = cache["log_probs"][rows, action_ids]
                values_cur = cache["values"][rows]
                reference = np.asarray(
                    traj.logp_rollout
                    if config.ratio_reference == "rollout"
                    else traj.logp_sft
                )
                ratio = np.exp(logp_cur - reference)
                adv = advantage(traj.returns, traj.values)
                returns = np.asarray(traj.returns)
                surrogate = ppo_surrogate(ratio, adv, config.clip_epsilon)
                policy_loss_acc += -surrogate.sum()
                critic_loss_acc += ((values_cur - returns) ** 2).sum()

                # d(-surrogate)/dlogp is -ratio*A where the unclipped branch is
                # active, 0 where the clip constant wins
                clipped = np.where(
                    adv >= 0,
                    (1 + config.clip_epsilon) * adv,
                    (1 - config.clip_epsilon) * adv,
                )
                active = (ratio * adv) <= clipped
                dlogp = np.where(active, -ratio * adv, 0.0)
                dlogp *= config.policy_loss_weight / total_steps
                dvalues_rows = (
                    config.critic_loss_weight
                    * 2.0
                    * (values_cur - returns)
                    / total_steps
                )
                dlogits = np.zeros_like(cache["probs"])
                dlogits[rows] = -cache["probs"][rows] * dlogp[:, None]
                dlogits[rows, action_ids] += dlogp
                dvalues = np.zeros(len(tokens))
                dvalues[rows] = dvalues_rows
                traj_grads = policy.sequence_backward(cache, dlogits, dvalues)
                for name in grads:
                    grads[name] += traj_grads[name]
            optimizer.step(grads)
            last_policy_loss = policy_loss_acc / total_steps
            last_critic_loss = critic_loss_acc / total_steps

        metrics.append(
            PpoMetricsRow(
                iteration=iteration,
                mean_reward=float(np.mean([b.total for b in bundles])),
                mean_r_mkt=float(np.mean([b.market for b in bundles])),
                mean_r_aes=float(np.mean([b.aesthetic for b in bundles])),
                mean_r_clip=float(np.mean([b.relevance for b in bundles])),
                mean_kl=float(mean_abs_kl),
                policy_loss=float(last_policy_loss),
                critic_loss=float(last_critic_loss),
            )
        )
        if mean_abs_kl > config.kl_ceiling:
            raise PolicyDivergenceError(
                f"mean |KL| per token {mean_abs_kl:.3f} exceeded ceiling "
                f"{config.kl_ceiling} at iteration {iteration}"
            )
    return policy, metrics
