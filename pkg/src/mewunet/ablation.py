"""Branch / normalization ablation over a synthetic dataset."""

from __future__ import annotations

import csv
import logging
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DatasetManifest, synth_generate
from .training import TrainConfig, score_split, train

logger = logging.getLogger(__name__)

# (label, enabled branches, norm); mirrors the rows of the branch ablation table
ABLATION_ROWS = (
    ("DW, BatchNorm", "dw", "batch"),
    ("DW", "dw", "group"),
    ("DW + W_HW", "hw,dw", "group"),
    ("DW + W_HW + W_CW", "hw,cw,dw", "group"),
    ("W_HW + W_CW + W_CH", "hw,cw,ch", "group"),
    ("DW + W_HW + W_CW + W_CH", "hw,cw,ch,dw", "group"),
)
BASELINE_ROW = "DW"
FULL_ROW = "DW + W_HW + W_CW + W_CH"


@dataclass
class AblationResult:
    rows: list[dict] = field(default_factory=list)
    table_path: Path | None = None

    def median(self, label: str, metric: str = "mIoU") -> float:
        return statistics.median(r[metric] for r in self.rows if r["config"] == label)

    @property
    def full_beats_baseline(self) -> bool:
        return self.median(FULL_ROW) >= self.median(BASELINE_ROW)


def make_dataset(root, n: int = 64, extent: int = 32, seed: int = 1234, n_test: int = 16) -> DatasetManifest:
    manifest_path = Path(root) / "manifest.tsv"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    return synth_generate(n, extent, 2, seed, root, train_fraction=(n - n_test) / n)


def run_ablation(out_dir, base: TrainConfig, seeds=(0, 1, 2), manifest: DatasetManifest | None = None,
                 rows=ABLATION_ROWS) -> AblationResult:
    """Train every row for every seed and score the final model on the test split.

    Writes ``ablation.tsv`` with one line per (row, seed) followed by the
    per-row medians.
    """
    out_dir = Path(out_dir)
    if manifest is None:
        manifest = make_dataset(out_dir / "data")
    result = AblationResult()
    for label, branches, norm in rows:
        for seed in seeds:
            run_dir = out_dir / "runs" / f"{branches.replace(',', '-')}_{norm}_s{seed}"
            cfg = replace(base, branches=branches, norm=norm, seed=seed, out_dir=str(run_dir),
                          train_split="train", val_split="test")
            trained = train(cfg, manifest)
            report, _, _ = score_split(trained.net, manifest, "test", with_hd95=False)
            row = {"config": label, "branches": branches, "norm": norm, "seed": seed,
                   "mIoU": report["mean"]["mIoU"], "DSC": report["mean"]["DSC"]}
            logger.info("%s seed %d: mIoU %.4f DSC %.4f", label, seed, row["mIoU"], row["DSC"])
            result.rows.append(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ablation.tsv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["config", "branches", "norm", "seed", "mIoU", "DSC"])
        for r in result.rows:
            writer.writerow([r["config"], r["branches"], r["norm"], r["seed"], f"{r['mIoU']:.6f}", f"{r['DSC']:.6f}"])
        for label, branches, norm in rows:
            writer.writerow([label, branches, norm, "median",
                             f"{result.median(label):.6f}", f"{result.median(label, 'DSC'):.6f}"])
    result.table_path = path
    return result


def format_table(result: AblationResult) -> str:
    labels = list(dict.fromkeys(r["config"] for r in result.rows))
    width = max(len(s) for s in labels)
    lines = [f"{'config':<{width}}  median mIoU  median DSC"]
    for label in labels:
        lines.append(f"{label:<{width}}  {result.median(label):11.4f}  {result.median(label, 'DSC'):10.4f}")
    return "\n".join(lines)
