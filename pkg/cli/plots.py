"""SVG training curves: 5-step rolling mean per seed, mean ± 1 std across seeds."""
import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

ROLLING_WINDOW = 5

CHARTS: dict[str, tuple[str, tuple[str, ...]]] = {
    "accuracy": ("Accuracy", ("train_accuracy", "eval_avg_at_k")),
    "response_length": ("Mean response length", ("mean_response_length",)),
    "routing": ("Routing fractions", ("grpo_frac", "sdpo_frac", "teacher_avail_frac")),
    "teacher_entropy": ("Mean teacher entropy", ("mean_teacher_entropy",)),
}

PLOT_COLUMNS: tuple[str, ...] = ("step",) + tuple(
    column for _, columns in CHARTS.values() for column in columns
)

_SVG_RC = {"svg.hashsalt": "srpo-lab", "svg.fonttype": "none"}


def seed_band(frames: Sequence[pd.DataFrame], column: str) -> pd.DataFrame:
    smoothed = []
    for frame in frames:
        series = frame[["step", column]].dropna().set_index("step")[column].astype(float)
        if series.empty:
            continue
        smoothed.append(series.rolling(ROLLING_WINDOW, min_periods=1).mean())
    if not smoothed:
        return pd.DataFrame(columns=["step", "mean", "std"])
    stacked = pd.concat(smoothed, axis=1).sort_index()
    band = pd.DataFrame(
        {
            "mean": stacked.mean(axis=1),
            "std": stacked.std(axis=1, ddof=0).fillna(0.0),
        }
    )
    return band.rename_axis("step").reset_index()


def render_charts(frames: Sequence[pd.DataFrame], out_dir: str) -> list[Path]:
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    with matplotlib.rc_context(_SVG_RC):
        for name, (title, columns) in CHARTS.items():
            fig, ax = plt.subplots(figsize=(6.4, 4.0))
            for column in columns:
                band = seed_band(frames, column)
                if band.empty:
                    logger.warning("chart %s: column %s has no values", name, column)
                    continue
                line = ax.plot(band["step"], band["mean"], label=column)[0]
                ax.fill_between(
                    band["step"],
                    band["mean"] - band["std"],
                    band["mean"] + band["std"],
                    color=line.get_color(),
                    alpha=0.2,
                    linewidth=0,
                )
            ax.set_title(f"{title} ({len(frames)} seed{'s' if len(frames) != 1 else ''})")
            ax.set_xlabel("step")
            if ax.lines:
                ax.legend(loc="best")
            path = target / f"{name}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
