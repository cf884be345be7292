"""Experiment orchestration behind the CLI: each run_* function validates its
inputs, stages outputs in a temp directory, and atomically moves them into the
output directory on success, together with a config echo for replayability."""

from __future__ import annotations

import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .collection import (
    Tier,
    build_frequency_table,
    group_by_collection,
    rank_collection,
    rarity_report_to_dict,
    read_records_jsonl,
    write_rarity_csv,
    write_records_jsonl,
)
from .config import ConfigError, ExperimentConfig
from .generator import GeneratorSpec, PromptEnvironment
from .model_io import load_model, save_model
from .pipeline import parse_records, run_clean_pipeline, synth_collection
from .policy import (
    ActorCritic,
    Vocabulary,
    build_sft_pairs,
    ppo_train_loop,
    sample_completion,
    sample_prompt,
    sft_train,
    write_sft_dataset,
)
from .rewards import (
    CLASS_LABELS,
    TIER_TO_CLASS,
    AestheticScorer,
    FeatureExtractor,
    MarketScorer,
    MvClassifier,
    ScorerSuite,
    classifier_accuracy,
    confusion_matrix,
    train_mv_classifier,
)
from . import reports

__all__ = [
    "EvalRow",
    "EvalTable",
    "run_synth",
    "run_ingest",
    "run_rarity",
    "run_train_mv",
    "run_sft",
    "run_ppo",
    "run_eval",
    "build_vocabulary",
    "build_scorers",
    "build_generator_spec",
]

log = logging.getLogger("promptmint")

MV_MODEL_FILE = "mv_model.bin"
SFT_POLICY_FILE = "sft_policy.bin"
PPO_POLICY_FILE = "ppo_policy.bin"

EVAL_VARIANTS = ("no-policy", "sft-policy", "ppo-policy")


@contextmanager
def stage_outputs(out_dir: Path):
    """Write into a temp directory; move everything into out_dir on success."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(dir=out_dir, prefix=".staging-"))
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    for entry in sorted(staging.iterdir()):
        os.replace(entry, out_dir / entry.name)
    staging.rmdir()


def _echo_config(config: ExperimentConfig, staging: Path) -> None:
    reports.write_json(staging / "config_echo.json", config.to_echo_dict())


def _require_records(config: ExperimentConfig) -> Path:
    if config.records_path is None:
        raise ConfigError("paths.records is required for this command")
    if not config.records_path.exists():
        raise ConfigError(f"records file not found: {config.records_path}")
    return config.records_path


def _load_records(config: ExperimentConfig):
    records = read_records_jsonl(_require_records(config))
    if not records:
        raise ConfigError(f"records file is empty: {config.records_path}")
    return records


def build_vocabulary(records) -> Vocabulary:
    tokens = sorted({key.token() for record in records for key in record.properties})
    return Vocabulary(tuple(tokens))


# --- synth ---------------------------------------------------------------

def run_synth(config: ExperimentConfig) -> Path:
    """Generate a synthetic collection and write it to paths.records."""
    if config.records_path is None:
        raise ConfigError("paths.records is required: synth writes the record file there")
    collection = synth_collection(
        n_items=config.synth.n_items,
        n_trait_types=config.synth.n_trait_types,
        values_per_type=config.synth.values_per_type,
        zipf_skew=config.synth.zipf_skew,
        seed=config.synth_seed,
        collection_id=config.synth.collection_id,
    )
    config.records_path.parent.mkdir(parents=True, exist_ok=True)
    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        staged_records = staging / "_records.tmp"
        write_records_jsonl(collection.records, staged_records)
        os.replace(staged_records, config.records_path)
    log.info("synth: wrote %d records to %s", len(collection), config.records_path)
    return config.records_path


# --- ingest ---------------------------------------------------------------

def run_ingest(config: ExperimentConfig):
    """Parse and clean the record dump; emit cleaned records, rejects, and
    stage statistics as JSON, CSV, plain text, and a figure."""
    records_path = _require_records(config)
    with open(records_path, "r", encoding="utf-8") as handle:
        records, rejects = parse_records(handle)
    kept, stats, _ = run_clean_pipeline(records, config.pipeline)
    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        write_records_jsonl(kept, staging / "cleaned.jsonl")
        reports.write_csv(
            staging / "rejects.csv",
            ["line_no", "reason"],
            [[r.line_no, r.reason] for r in rejects],
        )
        payload = stats.to_dict()
        payload["rejected_lines"] = len(rejects)
        reports.write_json(staging / "clean_stats.json", payload)
        reports.write_csv(
            staging / "clean_stats.csv",
            ["stage", "records_in", "records_removed", "fraction_removed", "collections_removed"],
            [
                [s.stage, s.records_in, s.records_removed, repr(s.fraction_removed),
                 "" if s.collections_removed is None else s.collections_removed]
                for s in stats.stages
            ],
        )
        (staging / "clean_stats.txt").write_text(stats.to_text() + "\n", encoding="utf-8")
        reports.save_clean_stats_figure(stats, staging / "clean_stages.png")
    log.info("ingest: %d kept, %d rejects", len(kept), len(rejects))
    return stats


# --- rarity ---------------------------------------------------------------

def run_rarity(config: ExperimentConfig):
    """Rank every collection in the record file; one report per collection."""
    records = _load_records(config)
    collections = group_by_collection(records)
    results = {}
    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        single = len(collections) == 1
        for cid, collection in sorted(collections.items()):
            report = rank_collection(collection, config.tiers.high_cut, config.tiers.med_cut)
            stem = "rarity" if single else f"rarity_{cid}"
            write_rarity_csv(report, staging / f"{stem}.csv")
            reports.write_json(staging / f"{stem}.json", rarity_report_to_dict(report))
            reports.save_rarity_figure(report, staging / f"{stem}.png")
            results[cid] = report
    log.info("rarity: ranked %d collection(s)", len(results))
    return results


# --- market-value classifier -----------------------------------------------

def _tier_dataset(config: ExperimentConfig, records, vocab: Vocabulary):
    """Multi-hot features and tier-class labels for every record, plus
    threshold-labeled random subset views of each record.

    The subset views teach the classifier to stay rarity-consistent on the
    sparse attribute sets the generator produces from short prompts; their
    labels come from the same score cutoffs that define the ranked tiers.
    """
    extractor = FeatureExtractor(vocab.attributes)
    rng = np.random.default_rng(config.mv_seed)
    item_features, item_labels = [], []
    subset_features, subset_labels = [], []
    for cid, collection in group_by_collection(records).items():
        table = build_frequency_table(collection)
        report = rank_collection(collection, config.tiers.high_cut, config.tiers.med_cut)
        score_floor = {tier: np.inf for tier in Tier}
        for row in report.rows:
            score_floor[row.tier] = min(score_floor[row.tier], row.rarity)

        def tier_of_score(score: float) -> Tier:
            if score >= score_floor[Tier.HIGH]:
                return Tier.HIGH
            if score >= score_floor[Tier.MEDIUM]:
                return Tier.MEDIUM
            return Tier.LOW

        tier_by_token = {row.token_id: row.tier for row in report.rows}
        for record in collection:
            item_features.append(extractor.extract(k.token() for k in record.properties))
            item_labels.append(TIER_TO_CLASS[tier_by_token[record.token_id]])
            keys = record.sorted_properties()
            for _ in range(config.mv.subset_views):
                if len(keys) < 2:
                    break
                size = int(rng.integers(1, len(keys)))
                picked = [keys[j] for j in rng.choice(len(keys), size=size, replace=False)]
                score = sum(1.0 / table.frequency(k) for k in picked)
                subset_features.append(extractor.extract(k.token() for k in picked))
                subset_labels.append(TIER_TO_CLASS[tier_of_score(score)])
    features = np.asarray(item_features + subset_features)
    labels = np.asarray(item_labels + subset_labels, dtype=int)
    return features, labels, len(item_features)


def run_train_mv(config: ExperimentConfig):
    """Train the tier classifier; emit the model file, loss curve, and a
    confusion matrix (rows = prediction, columns = ground truth) on held-out
    items. The holdout split covers whole items only; subset views always
    train."""
    records = _load_records(config)
    vocab = build_vocabulary(records)
    features, labels, n_items = _tier_dataset(config, records, vocab)

    rng = np.random.default_rng(config.mv_seed)
    order = rng.permutation(n_items)
    n_holdout = max(1, int(round(config.mv.holdout_fraction * n_items)))
    holdout_idx = order[:n_holdout]
    train_idx = np.concatenate([order[n_holdout:], np.arange(n_items, len(labels))])
    if train_idx.size == 0:
        raise ConfigError("holdout fraction leaves no training data")

    model, history = train_mv_classifier(
        features[train_idx], labels[train_idx], config.mv_train_config()
    )
    accuracy = classifier_accuracy(model, features[holdout_idx], labels[holdout_idx])
    matrix = confusion_matrix(model, features[holdout_idx], labels[holdout_idx])

    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        meta = model.state_meta()
        meta["attributes"] = list(vocab.attributes)
        save_model(staging / MV_MODEL_FILE, "mv_classifier", meta, model.state_arrays())
        reports.write_csv(
            staging / "mv_loss.csv",
            ["iteration", "loss"],
            [[i, repr(loss)] for i, loss in enumerate(history)],
        )
        reports.write_json(staging / "mv_loss.json", history)
        total = int(matrix.sum())
        reports.write_json(
            staging / "mv_confusion.json",
            {
                "classes": list(CLASS_LABELS),
                "layout": {"rows": "prediction", "columns": "ground_truth"},
                "counts": matrix.tolist(),
                "fractions": (matrix / total).tolist() if total else matrix.tolist(),
                "holdout_accuracy": accuracy,
                "n_samples": total,
            },
        )
        reports.write_csv(
            staging / "mv_confusion.csv",
            ["prediction", *CLASS_LABELS],
            [
                [CLASS_LABELS[i], *matrix[i].tolist()]
                for i in range(matrix.shape[0])
            ],
        )
        reports.save_loss_figure(history, staging / "mv_loss.png", "classifier loss")
        reports.save_confusion_figure(matrix, CLASS_LABELS, staging / "mv_confusion.png")
    log.info("train-mv: holdout accuracy %.4f on %d samples", accuracy, int(matrix.sum()))
    return model, accuracy, matrix


# --- SFT --------------------------------------------------------------------

def run_sft(config: ExperimentConfig):
    """Build SFT pairs, train the policy, and persist policy + dataset."""
    records = _load_records(config)
    vocab = build_vocabulary(records)
    dataset, skipped = build_sft_pairs(
        records, vocab, discard_prob=config.sft.discard_prob, seed=config.sft_seed
    )
    if not dataset:
        raise ConfigError("every record was skipped while building SFT pairs")
    policy = ActorCritic(
        vocab,
        embed_dim=config.policy.embed_dim,
        hidden_dim=config.policy.hidden_dim,
        max_positions=config.policy.max_positions,
        seed=config.sft_seed,
    )
    policy, history = sft_train(policy, dataset, config.sft_config())
    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        save_model(
            staging / SFT_POLICY_FILE, "actor_critic", policy.state_meta(), policy.state_arrays()
        )
        write_sft_dataset(dataset, staging / "sft_dataset.txt")
        vocab.save(staging / "vocab.json")
        reports.write_csv(
            staging / "sft_loss.csv",
            ["iteration", "loss"],
            [[i, repr(loss)] for i, loss in enumerate(history)],
        )
        reports.write_json(staging / "sft_loss.json", history)
        reports.save_loss_figure(history, staging / "sft_loss.png", "SFT NLL")
    log.info("sft: trained on %d pairs (%d skipped), final loss %.4f", len(dataset), skipped, history[-1])
    return policy, history


# --- PPO ----------------------------------------------------------------------

def _load_mv_model(config: ExperimentConfig) -> tuple[MvClassifier, tuple[str, ...]]:
    path = config.out_dir / MV_MODEL_FILE
    if not path.exists():
        raise ConfigError(f"classifier model not found: {path} (run train-mv first)")
    kind, meta, arrays = load_model(path)
    if kind != "mv_classifier":
        raise ConfigError(f"{path} holds {kind!r}, expected mv_classifier")
    attributes = tuple(meta.pop("attributes"))
    return MvClassifier.from_state(meta, arrays), attributes


def _load_policy(config: ExperimentConfig, filename: str) -> ActorCritic:
    path = config.out_dir / filename
    if not path.exists():
        raise ConfigError(f"policy not found: {path}")
    kind, meta, arrays = load_model(path)
    if kind != "actor_critic":
        raise ConfigError(f"{path} holds {kind!r}, expected actor_critic")
    return ActorCritic.from_state(meta, arrays)


def _attribute_presence_counts(records, vocab: Vocabulary) -> np.ndarray:
    counts = np.zeros(vocab.n_attributes)
    index = {token: i for i, token in enumerate(vocab.attributes)}
    for record in records:
        for key in record.properties:
            counts[index[key.token()]] += 1
    return counts


def build_generator_spec(config: ExperimentConfig, records, vocab: Vocabulary) -> GeneratorSpec:
    counts = _attribute_presence_counts(records, vocab)
    return GeneratorSpec(
        attributes=vocab.attributes,
        keep_prob=config.generator.keep_prob,
        extra_attr_rate=config.generator.extra_attr_rate,
        frequencies=tuple(counts / counts.sum()) if counts.sum() else None,
        seed=config.seed + 5,
    )


def build_scorers(config: ExperimentConfig, records, vocab: Vocabulary) -> ScorerSuite:
    classifier, model_attributes = _load_mv_model(config)
    if model_attributes != vocab.attributes:
        raise ConfigError(
            "classifier vocabulary does not match the record file; retrain with train-mv"
        )
    extractor = FeatureExtractor(vocab.attributes)
    if config.rewards.pleasing is not None:
        pleasing = config.rewards.pleasing
        unknown = set(pleasing) - set(vocab.attributes)
        if unknown:
            raise ConfigError(f"unknown pleasing attribute(s): {sorted(unknown)}")
    else:
        counts = _attribute_presence_counts(records, vocab)
        ranked = sorted(zip(counts, vocab.attributes), key=lambda pair: (pair[0], pair[1]))
        pleasing = tuple(token for _, token in ranked[: config.rewards.pleasing_rarest])
    return ScorerSuite(
        market=MarketScorer(classifier, extractor),
        aesthetic=AestheticScorer(pleasing),
        weights=config.rewards.weights(),
    )


def run_ppo(config: ExperimentConfig):
    """PPO starting from the SFT policy; emits the trained policy and the
    per-iteration metrics trace."""
    records = _load_records(config)
    vocab = build_vocabulary(records)
    sft_policy = _load_policy(config, SFT_POLICY_FILE)
    if sft_policy.vocab.attributes != vocab.attributes:
        raise ConfigError("SFT policy vocabulary does not match the record file")
    scorers = build_scorers(config, records, vocab)
    spec = build_generator_spec(config, records, vocab)
    env = PromptEnvironment(spec, scorers, vocab, samples=config.rewards.samples_per_prompt)

    policy = sft_policy.copy()
    policy, metrics = ppo_train_loop(policy, sft_policy, env, config.ppo_config())
    _write_ppo_outputs(config, policy, metrics)
    log.info("ppo: %d iterations, final mean reward %.4f", len(metrics), metrics[-1].mean_reward)
    return policy, metrics


def _write_ppo_outputs(config: ExperimentConfig, policy: ActorCritic, metrics) -> None:
    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        save_model(
            staging / PPO_POLICY_FILE, "actor_critic", policy.state_meta(), policy.state_arrays()
        )
        header = [
            "iteration", "mean_reward", "mean_r_mkt", "mean_r_aes",
            "mean_r_clip", "mean_kl", "policy_loss", "critic_loss",
        ]
        rows = [
            [m.iteration, repr(m.mean_reward), repr(m.mean_r_mkt), repr(m.mean_r_aes),
             repr(m.mean_r_clip), repr(m.mean_kl), repr(m.policy_loss), repr(m.critic_loss)]
            for m in metrics
        ]
        reports.write_csv(staging / "ppo_metrics.csv", header, rows)
        reports.write_json(
            staging / "ppo_metrics.json",
            [
                {
                    "iteration": m.iteration,
                    "mean_reward": m.mean_reward,
                    "mean_r_mkt": m.mean_r_mkt,
                    "mean_r_aes": m.mean_r_aes,
                    "mean_r_clip": m.mean_r_clip,
                    "mean_kl": m.mean_kl,
                    "policy_loss": m.policy_loss,
                    "critic_loss": m.critic_loss,
                }
                for m in metrics
            ],
        )
        reports.save_ppo_metrics_figure(metrics, staging / "ppo_metrics.png")


# --- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    variant: str
    mean_market_score: float
    mean_aesthetic_score: float
    mean_relevance: float
    mean_total_reward: float

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mean_market_score": self.mean_market_score,
            "mean_aesthetic_score": self.mean_aesthetic_score,
            "mean_relevance": self.mean_relevance,
            "mean_total_reward": self.mean_total_reward,
        }


@dataclass(frozen=True)
class EvalTable:
    """Mean scores per policy variant over one shared seeded prompt set."""

    rows: tuple[EvalRow, ...]
    n_prompts: int
    seed: int
    samples_per_prompt: int
    prompt_source: str = "seeded attribute sampler (not the study prompt set)"

    def to_dict(self) -> dict:
        return {
            "rows": [row.to_dict() for row in self.rows],
            "n_prompts": self.n_prompts,
            "seed": self.seed,
            "samples_per_prompt": self.samples_per_prompt,
            "prompt_source": self.prompt_source,
        }


def run_eval(config: ExperimentConfig) -> EvalTable:
    """Score the no-policy / sft-policy / ppo-policy variants on one fixed
    seeded prompt set; completions are greedy so reruns are byte-identical."""
    records = _load_records(config)
    vocab = build_vocabulary(records)
    scorers = build_scorers(config, records, vocab)
    spec = build_generator_spec(config, records, vocab)
    env = PromptEnvironment(spec, scorers, vocab, samples=config.rewards.samples_per_prompt)

    policies = {
        "no-policy": None,
        "sft-policy": _load_policy(config, SFT_POLICY_FILE),
        "ppo-policy": _load_policy(config, PPO_POLICY_FILE),
    }
    for name, policy in policies.items():
        if policy is not None and policy.vocab.attributes != vocab.attributes:
            raise ConfigError(f"{name} vocabulary does not match the record file")

    rng = np.random.default_rng(config.eval_seed)
    prompts = [
        sample_prompt(rng, vocab, *config.eval.prompt_len)
        for _ in range(config.eval.n_prompts)
    ]

    rows = []
    for variant in EVAL_VARIANTS:
        policy = policies[variant]
        market_scores, aesthetic_scores, relevances, totals = [], [], [], []
        for index, user in enumerate(prompts):
            if policy is None:
                actions: tuple[int, ...] = ()
            else:
                prompt_ids = (*user, vocab.sep_id)
                completion = sample_completion(
                    policy, prompt_ids, max_len=config.policy.max_len, temperature=0.0
                )
                actions = completion.actions
            detail = env.detail(user, actions, episode_index=index)
            market_scores.append(detail.mean_market_score)
            aesthetic_scores.append(detail.mean_aesthetic_score)
            relevances.append(detail.mean_relevance)
            totals.append(detail.bundle.total)
        rows.append(
            EvalRow(
                variant=variant,
                mean_market_score=float(np.mean(market_scores)),
                mean_aesthetic_score=float(np.mean(aesthetic_scores)),
                mean_relevance=float(np.mean(relevances)),
                mean_total_reward=float(np.mean(totals)),
            )
        )
    table = EvalTable(
        rows=tuple(rows),
        n_prompts=config.eval.n_prompts,
        seed=config.eval_seed,
        samples_per_prompt=config.rewards.samples_per_prompt,
    )

    with stage_outputs(config.out_dir) as staging:
        _echo_config(config, staging)
        reports.write_csv(
            staging / "eval_table.csv",
            ["variant", "mean_market_score", "mean_aesthetic_score",
             "mean_relevance", "mean_total_reward"],
            [
                [row.variant, repr(row.mean_market_score), repr(row.mean_aesthetic_score),
                 repr(row.mean_relevance), repr(row.mean_total_reward)]
                for row in table.rows
            ],
        )
        reports.write_json(staging / "eval_table.json", table.to_dict())
        reports.save_eval_figure([row.to_dict() for row in table.rows], staging / "eval_table.png")
    log.info(
        "eval: totals %s",
        ", ".join(f"{row.variant}={row.mean_total_reward:.3f}" for row in table.rows),
    )
    return table
