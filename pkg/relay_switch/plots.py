"""PNG figures for ``analyze --plot``: margin trajectories and per-cue post-sentence margins."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from .margin import MarginStats  # noqa: E402


def plot_trajectory(frame: pd.DataFrame, path: Path, title: str = '') -> Path:
    """``frame`` columns: position, margin, smoothed."""
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(frame['position'], frame['margin'], color='0.75', linewidth=0.6, label='margin')
    ax.plot(frame['position'], frame['smoothed'], color='tab:blue', linewidth=1.4, label='smoothed')
    ax.set_xlabel('token position')
    ax.set_ylabel('top-1 minus top-2 probability')
    ax.set_ylim(0, 1)
    if title:
        ax.set_title(title)
    ax.legend(loc='lower right')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_cue_margins(frame: pd.DataFrame, global_stats: Optional[MarginStats], path: Path) -> Path:
    """Bar per cue (``frame`` columns: cue, post_sentence_mean, post_sentence_std_err, category)."""
    ordered = frame.sort_values('post_sentence_mean', ascending=False)
    fig, ax = plt.subplots(figsize=(10, 4))
    sns.barplot(data=ordered, x='cue', y='post_sentence_mean', hue='category', dodge=False, ax=ax)
    ax.errorbar(
        range(len(ordered)), ordered['post_sentence_mean'], yerr=ordered['post_sentence_std_err'],
        fmt='none', ecolor='black', capsize=2, linewidth=0.8,
    )
    if global_stats is not None:
        ax.axhline(global_stats.mean, color='0.3', linestyle='--', linewidth=1, label='global mean')
        ax.axhline(global_stats.threshold, color='tab:red', linestyle=':', linewidth=1, label='mean + 1 SE')
    ax.set_xlabel('')
    ax.set_ylabel('post-sentence margin')
    ax.tick_params(axis='x', rotation=45)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
