"""
Report emission: CSV and text tables, score histograms, image grids and the
metadata sidecar. Table files carry no timestamps so reruns are
byte-identical; timestamps live in ``report_meta.txt`` only.
"""

import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
from django.utils import timezone
from PIL import Image as PILImage

from .services import REPORT_COLUMNS, AblationTable, EvalReport, LipschitzDiagnostics

logger = logging.getLogger(__name__)

REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
REPORT_META = "report_meta.txt"


@dataclass
class GridTriplet:
    """Original, eroded and repaired stacks (``N x H x W x C``) of one dataset."""
    dataset: str
    originals: np.ndarray
    eroded: np.ndarray
    repaired: np.ndarray


def slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_") or "dataset"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned fixed-width text table."""
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows)
    return "\n".join(lines) + "\n"


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_key_values(path: Path, values: Dict[str, object]) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        for key in sorted(values):
            handle.write(f"{key}={values[key]}\n")
    return path


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def grid_image(triplet: GridTriplet) -> PILImage.Image:
    """Three rows (original, eroded, repaired), one column per sample."""
    rows = []
    for stack in (triplet.originals, triplet.eroded, triplet.repaired):
        rows.append(np.concatenate(list(to_uint8(np.asarray(stack))), axis=1))
    pixels = np.concatenate(rows, axis=0)
    if pixels.shape[2] == 1:
        return PILImage.fromarray(pixels[:, :, 0])
    return PILImage.fromarray(pixels)


def save_histogram(path: Path, id_scores: np.ndarray, ood_scores: np.ndarray, title: str, bins: int = 40) -> Path:
    edges = np.histogram_bin_edges(np.concatenate([id_scores, ood_scores]), bins=bins)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(id_scores, bins=edges, alpha=0.6, label=f"ID (n={len(id_scores)})")
    ax.hist(ood_scores, bins=edges, alpha=0.6, label=f"OOD (n={len(ood_scores)})")
    ax.set_xlabel("OOD score")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def emit_report(
    report: EvalReport,
    out_dir: Union[str, Path],
    grids: Optional[Sequence[GridTriplet]] = None,
    bins: int = 40,
) -> List[Path]:
    """
    Write the report files into ``out_dir``.

    Args:
        report: evaluation rows, metadata and per-pair scores
        out_dir: target directory, created when missing
        grids: optional original/eroded/repaired triplets, one image per dataset
        bins: histogram bin count

    Returns:
        Paths of every file written
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [row.as_row() for row in report.rows]
    written = [
        write_csv(out_dir / REPORT_CSV, REPORT_COLUMNS, rows),
        out_dir / REPORT_TXT,
    ]
    (out_dir / REPORT_TXT).write_text(format_table(REPORT_COLUMNS, rows), encoding="utf-8")

    for (id_name, ood_name), (id_scores, ood_scores) in sorted(report.scores.items()):
        path = out_dir / f"hist_{slug(id_name)}_vs_{slug(ood_name)}.png"
        written.append(save_histogram(path, id_scores, ood_scores, f"{id_name} vs {ood_name}", bins))

    for triplet in grids or []:
        path = out_dir / f"grid_{slug(triplet.dataset)}.png"
        grid_image(triplet).save(path)
        written.append(path)

    meta = dict(report.metadata)
    meta["generated_at"] = timezone.now().isoformat()
    meta["rows"] = len(report.rows)
    written.append(write_key_values(out_dir / REPORT_META, meta))
    logger.info(f"Wrote report with {len(report.rows)} rows and {len(grids or [])} grids to {out_dir}")
    return written


def write_ablation(table: AblationTable, out_dir: Union[str, Path], checks: Optional[Dict[str, bool]] = None) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = ["ood_dataset", *table.columns]
    rows = [[source, *(f"{v:.6f}" for v in values)] for source, values in table.rows]
    csv_path = write_csv(out_dir / f"ablation_{table.kind}.csv", header, rows)
    text = format_table(header, rows)
    for name, passed in sorted((checks or {}).items()):
        text += f"{name}: {'pass' if passed else 'fail'}\n"
    txt_path = out_dir / f"ablation_{table.kind}.txt"
    txt_path.write_text(text, encoding="utf-8")
    paths = [csv_path, txt_path]
    if table.details:
        detail_rows = [
            [variant, source, str(position), f"{value:.6f}"]
            for variant, sources in table.details.items()
            for source, values in sources.items()
            for position, value in enumerate(values)
        ]
        paths.append(write_csv(
            out_dir / f"ablation_{table.kind}_seeds.csv", ["variant", "ood_dataset", "seed_index", "auroc"], detail_rows
        ))
    return paths


def write_diagnostics(
    out_dir: Union[str, Path],
    stats: Dict[str, LipschitzDiagnostics],
    ratio: Optional[float],
) -> List[Path]:
    out_dir = Path(out_dir)
    fields = ["lip_g_estimate", "delta_z_mean", "delta_z_max", "delta_x_mean", "delta_x_max",
              "delta_x_perceptual_mean", "n_samples"]
    rows = []
    for name, diagnostics in stats.items():
        values = diagnostics.as_dict()
        rows.append([name, *(f"{values[f]:.6g}" if f != "n_samples" else str(values[f]) for f in fields)])
    table = write_csv(out_dir / "diagnostics.csv", ["split", *fields], rows)
    summary = write_key_values(
        out_dir / "diagnostics.txt",
        {"ood_over_id_delta_z": "" if ratio is None else f"{ratio:.6g}"},
    )
    return [table, summary]
