"""promptmint: rarity-aware NFT prompt-policy training at desk scale.

Library layout:

- collection: records, trait frequencies, rarity scores, price tiers
- pipeline: parsing, the five cleaning filters, samplers, synthetic data
- rewards: market-value classifier and the three-part weighted reward
- policy: actor-critic prompt policy, SFT, sampling, PPO
- generator: the simulated prompt-to-artifact environment
- experiment / cli: configuration, orchestration, reports, and figures
"""

from .collection import (
    Collection,
    FrequencyTable,
    MediaType,
    NftRecord,
    PropertyKey,
    RarityReport,
    Tier,
    assign_tiers,
    build_frequency_table,
    rank_collection,
    rarity_score,
)
from .config import ConfigError, ExperimentConfig, load_config
from .generator import GeneratedArtifact, GeneratorSpec, PromptEnvironment, episode, realize
from .pipeline import (
    CleanOptions,
    CleanStats,
    category_balanced_sampler,
    collection_weighted_sampler,
    parse_records,
    run_clean_pipeline,
    synth_collection,
)
from .policy import (
    ActorCritic,
    PolicyDivergenceError,
    PpoConfig,
    SftConfig,
    Trajectory,
    Vocabulary,
    build_sft_pairs,
    compute_returns,
    kl_step,
    ppo_surrogate,
    ppo_train_loop,
    sample_completion,
    sft_train,
)
from .rewards import (
    AestheticScorer,
    FeatureExtractor,
    MarketScorer,
    MvClassifier,
    RelevanceScorer,
    RewardBundle,
    RewardWeights,
    ScorerSuite,
    aesthetic_reward,
    market_reward,
    relevance_reward,
    total_reward,
    train_mv_classifier,
)

__version__ = "0.1.0"
