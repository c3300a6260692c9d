"""
Analysis script for training runs
Reads the run CSVs and displays statistics + creates simple plots
"""

import sys
from pathlib import Path

import matplotlib
import pandas as pd

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from rgbt_core import OUTPUT_ROOT  # noqa: E402

LOSS_COLUMNS = ['l_dfl', 'l_cls', 'l_loc', 'l_all']


def load_run(run_dir):
    """Load iterations/epochs/resources CSVs of one run (missing files -> None)."""
    run_dir = Path(run_dir)
    frames = {}
    for name in ('iterations', 'epochs', 'resources'):
        path = run_dir / f"{name}.csv"
        frames[name] = pd.read_csv(path) if path.exists() else None
    if frames['iterations'] is None:
        print(f"❌ No training log found: {run_dir / 'iterations.csv'}")
        return None
    return frames


def show_statistics(frames):
    """Display basic statistics."""
    it = frames['iterations']
    print("=" * 80)
    print("STATISTICS")
    print("=" * 80)
    print(f"Iterations: {len(it)}")
    print(f"Final lr: {it['lr'].iloc[-1]:.6f}  momentum: {it['momentum'].iloc[-1]:.4f}")
    print()

    print("LOSSES (first -> last, min):")
    for col in LOSS_COLUMNS:
        print(f"  {col:<6} {it[col].iloc[0]:.4f} -> {it[col].iloc[-1]:.4f}  (min {it[col].min():.4f})")
    print()

    ep = frames['epochs']
    if ep is not None:
        scored = ep.dropna(subset=['mAP50'])
        if len(scored):
            best = scored.loc[scored['mAP'].idxmax()]
            print("VALIDATION:")
            print(f"  Evaluated epochs: {len(scored)}")
            print(f"  Best mAP: {best['mAP']:.4f} (mAP50 {best['mAP50']:.4f}) at epoch {int(best['epoch'])}")
            print()

    res = frames['resources']
    if res is not None and len(res):
        print("MEMORY:")
        print(f"  Average RSS: {res['rss_mb'].mean():.0f} MB")
        print(f"  Peak RSS: {res['rss_mb'].max():.0f} MB")
        print()


def plot_overview(frames, out_file):
    """Loss curves, learning rate and validation mAP."""
    it = frames['iterations']
    fig, axes = plt.subplots(3, 1, figsize=(12, 10))

    for col in LOSS_COLUMNS:
        axes[0].plot(it['iter'], it[col], label=col)
    axes[0].set_ylabel('Loss')
    axes[0].legend(loc='upper right')
    axes[0].grid(True, alpha=0.3)
    axes[0].set_title('Losses')

    axes[1].plot(it['iter'], it['lr'], label='lr', color='purple')
    ax1_right = axes[1].twinx()
    ax1_right.plot(it['iter'], it['momentum'], label='momentum', color='gray', linestyle='--')
    axes[1].set_ylabel('Learning rate')
    ax1_right.set_ylabel('Momentum', color='gray')
    axes[1].set_xlabel('Iteration')
    axes[1].grid(True, alpha=0.3)
    axes[1].set_title('Schedule')

    ep = frames['epochs']
    if ep is not None and ep['mAP50'].notna().any():
        scored = ep.dropna(subset=['mAP50'])
        axes[2].plot(scored['epoch'], scored['mAP50'], marker='o', label='mAP50')
        axes[2].plot(scored['epoch'], scored['mAP'], marker='s', label='mAP50:95')
        axes[2].legend(loc='lower right')
    axes[2].set_ylabel('mAP')
    axes[2].set_xlabel('Epoch')
    axes[2].grid(True, alpha=0.3)
    axes[2].set_title('Validation')

    plt.tight_layout()
    plt.savefig(out_file, dpi=150)
    plt.close(fig)
    print(f"📊 Plot saved: {out_file}")
    return out_file


if __name__ == "__main__":
    run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else OUTPUT_ROOT / 'train'
    print(f"🔍 Loading training run {run_dir}...\n")

    frames = load_run(run_dir)
    if frames is None:
        sys.exit(1)

    show_statistics(frames)
    plot_overview(frames, run_dir / 'training_analysis.png')
