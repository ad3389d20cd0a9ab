"""Decontamination scans, threshold sweeps, and pipeline funnel accounting."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, fields
from glob import glob

from .datamodel import normalize_text

logger = logging.getLogger(__name__)

DEFAULT_NGRAM_ORDER = 13


class FunnelError(ValueError):
    """A stage manifest is missing or its counts are inconsistent."""


@dataclass(frozen=True)
class ContaminationReport:
    n: int
    train_size: int
    test_size: int
    hit_samples: int
    hit_fraction: float
    hit_indices: tuple[int, ...]  # positions of hit test samples, for auditing

    def __post_init__(self):
        if not 0 <= self.hit_samples <= self.test_size:
            raise ValueError("hit_samples must lie in [0, test_size]")
        if len(self.hit_indices) != self.hit_samples:
            raise ValueError("hit_indices length must equal hit_samples")
        expected = self.hit_samples / self.test_size if self.test_size else 0.0
        if abs(self.hit_fraction - expected) > 1e-9:
            raise ValueError("hit_fraction must equal hit_samples / test_size")


def _windows(doc: str, n: int):
    tokens = normalize_text(doc).split()
    for i in range(len(tokens) - n + 1):
        yield tuple(tokens[i:i + n])


def ngram_overlap(train: list[str], test: list[str], n: int = DEFAULT_NGRAM_ORDER) -> ContaminationReport:
    """Per-sample n-gram contamination check of test docs against a train index.

    Tokenization is whitespace splitting after text normalization; a test
    sample hits when any of its contiguous n-token windows appears anywhere
    in the training side.  Samples shorter than n tokens cannot hit.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    index = set()
    for doc in train:
        index.update(_windows(doc, n))
    hit_indices = []
    for idx, doc in enumerate(test):
        if any(window in index for window in _windows(doc, n)):
            hit_indices.append(idx)
    test_size = len(test)
    return ContaminationReport(
        n=n,
        train_size=len(train),
        test_size=test_size,
        hit_samples=len(hit_indices),
        hit_fraction=len(hit_indices) / test_size if test_size else 0.0,
        hit_indices=tuple(hit_indices),
    )


def threshold_sweep(rates: list[float], thresholds: list[float]) -> list[tuple[float, int]]:
    """Count survivors strictly above each threshold; thresholds must ascend."""
    for a, b in zip(thresholds, thresholds[1:]):
        if b < a:
            raise ValueError(f"thresholds must be sorted ascending, saw {a} before {b}")
    return [(t, sum(1 for r in rates if r > t)) for t in thresholds]


@dataclass(frozen=True)
class FunnelStats:
    seeds: int
    augmented: int          # deduplicated instruction total entering stage 1 filters
    post_cross: int
    post_nli: int
    inputs: int
    responses: int          # usable sampled responses
    post_verify: int
    post_judge: int
    sft: int
    dpo_offline: int
    dpo_online: int
    pass_fraction: float    # sft / responses

    def __post_init__(self):
        for name in (f.name for f in fields(self)):
            value = getattr(self, name)
            if value < 0:
                raise ValueError(f"funnel count {name} is negative")
        chains = (
            ("augmented", "post_cross", "post_nli"),
            ("responses", "post_verify", "post_judge"),
        )
        for chain in chains:
            for left, right in zip(chain, chain[1:]):
                if getattr(self, right) > getattr(self, left):
                    raise FunnelError(
                        f"funnel is not monotone: {right} "
                        f"({getattr(self, right)}) exceeds {left} ({getattr(self, left)})"
                    )
        if self.post_judge != self.sft:
            raise FunnelError(
                f"sft count ({self.sft}) must equal judged survivors ({self.post_judge})"
            )
        expected = self.sft / self.responses if self.responses else 0.0
        if abs(self.pass_fraction - expected) > 1e-9:
            raise FunnelError("pass_fraction must equal sft / responses")


def _stage_counts(run_dir: str, stage: str) -> dict:
    path = os.path.join(run_dir, "checkpoints", f"{stage}.json")
    if not os.path.exists(path):
        raise FunnelError(f"no manifest for stage '{stage}' (expected {path})")
    with open(path, encoding="utf-8") as fh:
        checkpoint = json.load(fh)
    counts = checkpoint.get("counts")
    if not isinstance(counts, dict):
        raise FunnelError(f"stage '{stage}' checkpoint carries no counts")
    return counts


def funnel_report(run_dir: str) -> FunnelStats:
    """Compose funnel statistics from the per-stage checkpoints of one run."""
    ins = _stage_counts(run_dir, "instructions")
    que = _stage_counts(run_dir, "queries")
    mine = _stage_counts(run_dir, "mine")

    dpo_online = 0
    for path in sorted(glob(os.path.join(run_dir, "checkpoints", "online-*.json"))):
        stage = os.path.splitext(os.path.basename(path))[0]
        dpo_online += int(_stage_counts(run_dir, stage).get("pairs", 0))

    responses = int(que["responses"])
    sft = int(mine["sft"])
    return FunnelStats(
        seeds=int(ins["seeds"]),
        augmented=int(ins["augmented_total"]),
        post_cross=int(ins["post_cross"]),
        post_nli=int(ins["post_nli"]),
        inputs=int(que["inputs"]),
        responses=responses,
        post_verify=int(que["post_verify"]),
        post_judge=int(que["post_judge"]),
        sft=sft,
        dpo_offline=int(mine["dpo_offline"]),
        dpo_online=dpo_online,
        pass_fraction=sft / responses if responses else 0.0,
    )


# --- terminal rendering -----------------------------------------------------------


def format_contamination_table(report: ContaminationReport) -> str:
    rows = [
        ("n-gram order", str(report.n)),
        ("train samples", str(report.train_size)),
        ("test samples", str(report.test_size)),
        ("contaminated", str(report.hit_samples)),
        ("hit fraction", f"{report.hit_fraction:.4f}"),
    ]
    width = max(len(label) for label, _ in rows)
    return "\n".join(f"{label.ljust(width)}  {value}" for label, value in rows)


def format_funnel_table(stats: FunnelStats) -> str:
    rows = [(f.name, getattr(stats, f.name)) for f in fields(stats)]
    width = max(len(name) for name, _ in rows)
    lines = []
    for name, value in rows:
        shown = f"{value:.4f}" if name == "pass_fraction" else str(value)
        lines.append(f"{name.ljust(width)}  {shown}")
    return "\n".join(lines)


def format_sweep_table(rows: list[tuple[float, int]]) -> str:
    lines = ["threshold  surviving"]
    for threshold, count in rows:
        lines.append(f"{threshold:<9.4f}  {count}")
    return "\n".join(lines)
