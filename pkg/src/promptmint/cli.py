"""Command-line surface. Exit codes: 0 success, 1 runtime failure, 2 config or
validation error. Set PROMPTMINT_LOG=debug|info|warning to adjust verbosity."""

from __future__ import annotations

import functools
import logging
import os
import sys
from dataclasses import replace

import click

from . import experiment
from .config import ConfigError, load_config
from .policy import PolicyDivergenceError

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _setup_logging() -> None:
    level = os.environ.get("PROMPTMINT_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")


def config_options(func):
    @click.option("--config", "config_path", required=True, type=click.Path(), help="Run config JSON.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", "out_dir", type=click.Path(), default=None, help="Override the output directory.")
    @functools.wraps(func)
    def wrapper(config_path, seed, out_dir, **kwargs):
        _setup_logging()
        try:
            config = load_config(config_path, seed_override=seed, out_override=out_dir)
            return func(config, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(EXIT_CONFIG)
        except PolicyDivergenceError as exc:
            click.echo(f"training aborted: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)
        except Exception as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_RUNTIME)

    return wrapper


@click.group()
def main() -> None:
    """Rarity-aware NFT prompt-policy training and evaluation."""


@main.command()
@config_options
def synth(config) -> None:
    """Generate a synthetic collection record file."""
    path = experiment.run_synth(config)
    click.echo(f"wrote {path}")


@main.command()
@click.option("--min-side", type=int, default=None, help="Resolution filter threshold.")
@click.option("--min-props", type=int, default=None, help="Median property-count threshold.")
@click.option("--dup-ratio-max", type=float, default=None, help="Duplicate-ratio ceiling.")
@click.option("--blocklist", multiple=True, help="Content-filter substring (repeatable).")
@config_options
def ingest(config, min_side, min_props, dup_ratio_max, blocklist) -> None:
    """Parse and clean a record dump through the five filters."""
    overrides = {}
    if min_side is not None:
        overrides["min_side"] = min_side
    if min_props is not None:
        overrides["min_props"] = min_props
    if dup_ratio_max is not None:
        overrides["dup_ratio_max"] = dup_ratio_max
    if blocklist:
        overrides["blocklist"] = tuple(blocklist)
    if overrides:
        config = replace(config, pipeline=replace(config.pipeline, **overrides))
    stats = experiment.run_ingest(config)
    click.echo(stats.to_text())


@main.command()
@config_options
def rarity(config) -> None:
    """Score, rank, and tier every collection in the record file."""
    results = experiment.run_rarity(config)
    for cid, report in sorted(results.items()):
        counts = report.tier_counts()
        summary = ", ".join(f"{tier.value}={count}" for tier, count in counts.items())
        click.echo(f"{cid}: {len(report)} items ({summary})")


@main.command("train-mv")
@config_options
def train_mv(config) -> None:
    """Train the market-value tier classifier."""
    _, accuracy, matrix = experiment.run_train_mv(config)
    click.echo(f"holdout accuracy {accuracy:.4f} on {int(matrix.sum())} samples")


@main.command()
@config_options
def sft(config) -> None:
    """Supervised fine-tuning of the prompt policy."""
    _, history = experiment.run_sft(config)
    click.echo(f"final SFT loss {history[-1]:.4f} after {len(history)} iterations")


@main.command()
@config_options
def ppo(config) -> None:
    """PPO training against the simulated generator."""
    _, metrics = experiment.run_ppo(config)
    click.echo(f"final mean reward {metrics[-1].mean_reward:.4f} after {len(metrics)} iterations")


@main.command("eval")
@config_options
def eval_cmd(config) -> None:
    """Evaluate the no-policy / sft-policy / ppo-policy variants."""
    table = experiment.run_eval(config)
    for row in table.rows:
        click.echo(
            f"{row.variant}: mv={row.mean_market_score:.4f} "
            f"aes={row.mean_aesthetic_score:.4f} rel={row.mean_relevance:.4f} "
            f"total={row.mean_total_reward:.4f}"
        )


if __name__ == "__main__":
    main()
