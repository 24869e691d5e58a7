"""Static figures rendered from the JSON reports of a run directory."""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

EXPECTED = ("attack_report.json", "defense_report.json")

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _slug(text):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", str(text))


def _figure(width=4.0, height=None):
    height = height or width * 0.68
    return plt.subplots(figsize=(width, height))


def _save(fig, path: Path):
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_transparency(report: dict, out_dir: Path) -> list:
    """One ASR-vs-transparency curve per target model."""
    paths = []
    for row in report["rows"]:
        with plt.rc_context(RC):
            fig, ax = _figure()
            ts = [p[0] for p in row["curve"]]
            asr = [100 * p[1] for p in row["curve"]]
            ax.plot(ts, asr, "o-", color="C0", lw=1.2, ms=3, label="trigger")
            ax.axhline(100 * row["baseline"], color="0.5", ls="--", lw=0.8, label="clean baseline")
            ax.set_xlabel("trigger transparency")
            ax.set_ylabel("ASR (%)")
            ax.set_ylim(-2, 102)
            ax.set_title(row["model_id"])
            ax.legend(frameon=False, loc="upper left")
            paths.append(_save(fig, out_dir / f"transparency_{_slug(row['model_id'])}.png"))
    return paths


def plot_pruning(defense: dict, out_dir: Path) -> list:
    paths = []
    for model_id, entry in sorted(defense.items()):
        rows = entry.get("prune")
        if not rows:
            continue
        with plt.rc_context(RC):
            fig, ax = _figure()
            ratios = [r["ratio"] for r in rows]
            ax.plot(ratios, [100 * r["clean_accuracy"] for r in rows], "s-", ms=3, label="CA")
            ax.plot(ratios, [100 * r["asr"] for r in rows], "o-", ms=3, label="ASR")
            ax.set_xlabel("pruning ratio")
            ax.set_ylabel("%")
            ax.set_ylim(-2, 102)
            ax.set_title(model_id)
            ax.legend(frameon=False)
            paths.append(_save(fig, out_dir / f"pruning_{_slug(model_id)}.png"))
    return paths


def plot_strip(defense: dict, out_dir: Path) -> list:
    """Overlaid entropy histograms of clean and triggered inputs, threshold marked."""
    paths = []
    for model_id, entry in sorted(defense.items()):
        s = entry.get("strip")
        if not s:
            continue
        with plt.rc_context(RC):
            fig, ax = _figure()
            values = s["clean_entropies"] + s["input_entropies"]
            hi = max(values) if values else 1.0
            bins = [hi * i / 30 for i in range(31)] if hi > 0 else 30
            ax.hist(s["clean_entropies"], bins=bins, alpha=0.6, density=True, label="clean")
            ax.hist(s["input_entropies"], bins=bins, alpha=0.6, density=True, label="triggered")
            ax.axvline(s["threshold"], color="k", ls="--", lw=0.8, label="threshold")
            ax.set_xlabel("entropy (nats)")
            ax.set_ylabel("density")
            ax.set_title(f"{model_id}  P_escape={100 * s['p_escape']:.1f}%")
            ax.legend(frameon=False)
            paths.append(_save(fig, out_dir / f"strip_{_slug(model_id)}.png"))
    return paths


def emit_plots(artifact_dir) -> list:
    """Render every figure the run directory's reports support into ``<dir>/figures``."""
    artifact_dir = Path(artifact_dir)
    present = [name for name in EXPECTED if (artifact_dir / name).exists()]
    if not present:
        raise FileNotFoundError(
            f"{artifact_dir} contains none of the expected reports: {', '.join(EXPECTED)}"
        )
    out_dir = artifact_dir / "figures"
    out_dir.mkdir(exist_ok=True)
    paths = []
    if "attack_report.json" in present:
        paths += plot_transparency(json.loads((artifact_dir / "attack_report.json").read_text()), out_dir)
    if "defense_report.json" in present:
        defense = json.loads((artifact_dir / "defense_report.json").read_text())
        paths += plot_pruning(defense, out_dir)
        paths += plot_strip(defense, out_dir)
    return paths
