"""End-to-end stain normalization against a template profile.

A template profile is fitted once from a manually chosen reference
image. Normalizing a source image then fits the source's own stain
model, separates its densities, and recombines them with the template's
color matrix, so every image lands in the template's color basis.

Recombination keeps the source-fitted weights inside the densities and
uses the template matrix only for recolorization; the objective's
intensity target already drives both fits toward a common overall stain
level. Negative densities are clamped to zero only at recombination.
"""

from __future__ import annotations

import csv
import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import acd, color_model
from .acd import AcdHyperparams, StainProfile
from .errors import StainforgeError
from .io_utils import load_rgb_png, save_rgb_png


@dataclass(frozen=True)
class TemplateProfile:
    """A fitted template: stain profile, background level, provenance."""

    profile: StainProfile
    background: np.ndarray
    source_path: str = ""
    source_sha256: str = ""


@dataclass
class BatchResult:
    input_path: str
    status: str            # "ok" or "error"
    millis: float
    error_message: str = ""


@dataclass
class BatchReport:
    results: list[BatchResult] = field(default_factory=list)
    total_millis: float = 0.0

    @property
    def failures(self) -> int:
        return sum(1 for r in self.results if r.status != "ok")

    @property
    def mean_millis(self) -> float:
        if not self.results:
            return 0.0
        return sum(r.millis for r in self.results) / len(self.results)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["input_path", "status", "millis", "error_message"])
            for r in self.results:
                writer.writerow([r.input_path, r.status, f"{r.millis:.3f}", r.error_message])


def extract_template_profile(
    img: np.ndarray,
    hp: AcdHyperparams | None = None,
    source_path: str = "",
) -> TemplateProfile:
    """Fit a template profile from a reference image.

    Raises InsufficientTissueError for background-only images.
    """
    hp = hp or AcdHyperparams()
    background = color_model.as_background(color_model.DEFAULT_BACKGROUND)
    od = color_model.rgb_to_od(img, background)
    mask = color_model.tissue_mask(od)
    profile, _ = acd.fit(od, mask, hp)
    digest = hashlib.sha256(np.ascontiguousarray(img).tobytes()).hexdigest()
    return TemplateProfile(
        profile=profile,
        background=background,
        source_path=source_path,
        source_sha256=digest,
    )


def normalize_image(
    src: np.ndarray,
    template: TemplateProfile,
    hp: AcdHyperparams | None = None,
) -> np.ndarray:
    """Map a source image into the template's stain color basis.

    Fits the source stain model, separates densities, clamps them to
    >= 0, and recombines with the template matrix. Background pixels
    (od ~ 0) pass through to the template background unchanged.
    """
    hp = hp or AcdHyperparams()
    od = color_model.rgb_to_od(src)
    mask = color_model.tissue_mask(od)
    src_profile, _ = acd.fit(od, mask, hp)
    densities = np.maximum(acd.separate(od, src_profile), 0.0)
    od_out = densities @ template.profile.M.T
    return color_model.od_to_rgb(od_out, template.background)


def save_template(path, template: TemplateProfile, hp: AcdHyperparams) -> None:
    """Persist a template as a profile file plus background/provenance keys."""
    extras = {
        "bg_r": format(template.background[0], ".17g"),
        "bg_g": format(template.background[1], ".17g"),
        "bg_b": format(template.background[2], ".17g"),
        "source_path": template.source_path,
        "source_sha256": template.source_sha256,
    }
    acd.save_profile(path, template.profile, hp, extras=extras)


def load_template(path) -> tuple[TemplateProfile, AcdHyperparams]:
    profile, hp, extras = acd.load_profile(path)
    background = np.array([float(extras.get("bg_r", 255.0)),
                           float(extras.get("bg_g", 255.0)),
                           float(extras.get("bg_b", 255.0))])
    template = TemplateProfile(
        profile=profile,
        background=background,
        source_path=extras.get("source_path", ""),
        source_sha256=extras.get("source_sha256", ""),
    )
    return template, hp


def _worker_count(requested: int | None) -> int:
    count = requested or os.cpu_count() or 1
    cap = os.environ.get("STAINFORGE_THREADS")
    if cap:
        count = min(count, max(1, int(cap)))
    return max(1, count)


def normalize_batch(
    paths,
    template: TemplateProfile,
    hp: AcdHyperparams | None = None,
    out_dir=".",
    workers: int | None = None,
) -> BatchReport:
    """Normalize a list of image paths, writing outputs under out_dir.

    Output filenames mirror the inputs. Per-image failures are recorded
    in the report instead of aborting the batch. Worker count does not
    affect output bytes: each image is processed independently.
    """
    hp = hp or AcdHyperparams()
    paths = [str(p) for p in paths]
    os.makedirs(out_dir, exist_ok=True)

    def process(path: str) -> BatchResult:
        start = time.perf_counter()
        try:
            img = load_rgb_png(path)
            out = normalize_image(img, template, hp)
            save_rgb_png(os.path.join(out_dir, os.path.basename(path)), out)
        except (StainforgeError, OSError, ValueError) as exc:
            millis = (time.perf_counter() - start) * 1000.0
            return BatchResult(path, "error", millis, f"{type(exc).__name__}: {exc}")
        millis = (time.perf_counter() - start) * 1000.0
        return BatchResult(path, "ok", millis)

    wall_start = time.perf_counter()
    report = BatchReport()
    if paths:
        with ThreadPoolExecutor(max_workers=_worker_count(workers)) as pool:
            report.results = list(pool.map(process, paths))
    report.total_millis = (time.perf_counter() - wall_start) * 1000.0
    return report
