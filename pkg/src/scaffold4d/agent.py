"""Perception-reasoning-action loop for language-configured edits: parse a
prompt against a verb lexicon and the scene's label set, sweep candidate
threshold configurations, score rendered samples with a pluggable scorer,
and apply the winning configuration to every frame.

The Gaussian selection mask for the winning candidate is computed once from
per-Gaussian decoded features and reused across all timesteps, so edits are
frame-consistent by construction.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import rasterizer
from .query import (
    EditConfig,
    LabelSet,
    apply_edit,
    argmax_mask,
    gaussian_features,
    hybrid_mask,
    score_gaussians,
    threshold_mask,
)
from .scene import CameraModel, GaussianScene, RenderBatch, scene_batch

THRESHOLD_GRID = (0.5, 0.6, 0.7, 0.8, 0.9)
SAMPLE_FRAMES = 3

VERB_LEXICON = {
    "delete": ("delete", "remove"),
    "extract": ("extract", "isolate"),
    "recolor": ("recolor", "change color", "change the color", "make"),
}

# Named colors resolvable in prompts ("make the dog red"); grey aliases gray.
COLOR_TABLE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "pink": (1.0, 0.75, 0.8),
    "brown": (0.6, 0.3, 0.1),
    "gray": (0.5, 0.5, 0.5),
    "lime": (0.7, 1.0, 0.3),
    "navy": (0.0, 0.0, 0.5),
    "teal": (0.0, 0.5, 0.5),
}
_COLOR_ALIASES = {"grey": "gray"}


class PromptError(ValueError):
    """The prompt could not be resolved against the lexicon or label set."""


class AgentError(RuntimeError):
    """A candidate evaluation failed; carries the candidate id."""


@dataclass
class PromptParse:
    operation: str
    targets: list[str]
    color: np.ndarray | None = None


def _contains(text: str, phrase: str) -> bool:
    return re.search(rf"\b{re.escape(phrase)}\b", text) is not None


def parse_prompt(text: str, labels: LabelSet) -> PromptParse:
    """Rule-based parse: verb lexicon + label-name match + color table."""
    low = text.lower()
    operation = None
    for op, verbs in VERB_LEXICON.items():
        if any(_contains(low, v) for v in verbs):
            operation = op
            break
    if operation is None:
        raise PromptError(f"no edit verb recognized in {text!r}")
    targets = [name for name in labels.labels if _contains(low, name.lower())]
    if not targets:
        raise PromptError(f"no known object label found in {text!r}")
    color = None
    if operation == "recolor":
        table = dict(COLOR_TABLE)
        table.update({alias: COLOR_TABLE[name] for alias, name in _COLOR_ALIASES.items()})
        for word, value in table.items():
            if _contains(low, word):
                color = np.asarray(value, dtype=float)
                break
        if color is None:
            raise PromptError(f"recolor prompt names no color from the fixed table: {text!r}")
    return PromptParse(operation, targets, color)


@dataclass
class CandidateConfig:
    candidate_id: int
    config: EditConfig


@dataclass
class CandidateSample:
    """One rendered evaluation frame for a candidate: the edited RGB image
    and the alpha-thresholded render of just the selected Gaussians."""

    frame: int
    rgb: np.ndarray
    selection_mask: np.ndarray  # (H, W) bool


class Scorer(Protocol):
    def evaluate(self, samples: list[CandidateSample], candidate: CandidateConfig) -> float: ...


class IouScorer:
    """Default scorer: IoU between the candidate's rendered selection mask
    and the ground-truth object mask, averaged over the sample frames."""

    def __init__(self, ground_truth):
        self.gt = ground_truth

    def evaluate(self, samples, candidate) -> float:
        total = 0.0
        for s in samples:
            gt_mask = np.zeros_like(s.selection_mask)
            for label in candidate.config.targets:
                gt_mask |= self.gt.object_mask(s.frame, label)
            union = np.logical_or(s.selection_mask, gt_mask).sum()
            inter = np.logical_and(s.selection_mask, gt_mask).sum()
            total += inter / union if union else 1.0
        return total / len(samples)


@dataclass
class TraceEntry:
    candidate: CandidateConfig
    score: float
    sample_frames: list[int]


@dataclass
class AgentTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    winner_id: int | None = None
    empty_mask_warning: bool = False

    def to_dict(self) -> dict:
        return {
            "candidates": [
                {
                    "id": e.candidate.candidate_id,
                    "operation": e.candidate.config.operation,
                    "targets": list(e.candidate.config.targets),
                    "threshold": e.candidate.config.threshold,
                    "recolor": None if e.candidate.config.recolor is None
                    else [float(v) for v in e.candidate.config.recolor],
                    "score": e.score,
                    "sample_frames": list(e.sample_frames),
                }
                for e in self.entries
            ],
            "winner_id": self.winner_id,
            "empty_mask_warning": self.empty_mask_warning,
        }


def render_rgb(scene: GaussianScene, camera: CameraModel, tau: int, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    batch = scene_batch(scene, tau)
    slim = RenderBatch(batch.positions, batch.rotations, batch.scales, batch.opacities,
                       batch.colors, np.zeros((len(batch), 0)))
    return rasterizer.rasterize(camera, slim, 0, background=background, keep_contributions=False).rgb


def _selection_render(scene: GaussianScene, mask: np.ndarray, camera: CameraModel, tau: int) -> np.ndarray:
    # Render only the selected Gaussians; a pixel belongs to the selection
    # where their combined alpha dominates.
    batch = scene_batch(scene, tau)
    sel = RenderBatch(batch.positions[mask], batch.rotations[mask], batch.scales[mask],
                      batch.opacities[mask], batch.colors[mask], np.zeros((int(mask.sum()), 0)))
    out = rasterizer.rasterize(camera, sel, 0, keep_contributions=False)
    return out.alpha > 0.5


def run_agent(
    scene: GaussianScene,
    decoders: dict,
    labels: LabelSet,
    query_task: str,
    prompt: str,
    scorer: Scorer,
    cameras: list[CameraModel],
    background=(0.0, 0.0, 0.0),
) -> tuple[EditConfig, list[np.ndarray], AgentTrace]:
    """Full candidate-search edit: returns (winning config, edited RGB
    renders for every frame, trace of all candidate scores).

    Candidates sweep the fixed threshold grid; each is scored on three evenly
    spaced sample frames; ties resolve toward the lower threshold.
    """
    parse = parse_prompt(prompt, labels)
    feats = gaussian_features(scene, decoders[query_task])
    scores = score_gaussians(feats, labels)
    amask = argmax_mask(scores, parse.targets)

    num_frames = len(cameras)
    sample_frames = sorted({int(round(f)) for f in np.linspace(0, num_frames - 1, SAMPLE_FRAMES)})
    trace = AgentTrace()
    masks = {}
    for cid, th in enumerate(THRESHOLD_GRID):
        config = EditConfig(parse.operation, list(parse.targets), th,
                            None if parse.color is None else parse.color.copy())
        cand = CandidateConfig(cid, config)
        mask = hybrid_mask(threshold_mask(scores, parse.targets, th), amask)
        masks[cid] = mask
        edited = apply_edit(scene, mask, config)
        samples = []
        for f in sample_frames:
            rgb = render_rgb(edited, cameras[f], f, background)
            sel = _selection_render(scene, mask, cameras[f], f)
            samples.append(CandidateSample(f, rgb, sel))
        try:
            score = float(scorer.evaluate(samples, cand))
        except Exception as exc:
            raise AgentError(f"scorer failed on candidate {cid} (threshold {th})") from exc
        trace.entries.append(TraceEntry(cand, score, sample_frames))

    best = max(trace.entries, key=lambda e: e.score)  # ties keep the earliest = lowest threshold
    trace.winner_id = best.candidate.candidate_id
    win_mask = masks[trace.winner_id]
    if not np.any(win_mask):
        trace.empty_mask_warning = True
        warnings.warn(
            f"winning candidate (threshold {best.candidate.config.threshold}) selects no Gaussians",
            stacklevel=2,
        )
    final = apply_edit(scene, win_mask, best.candidate.config)
    renders = [render_rgb(final, cameras[f], f, background) for f in range(num_frames)]
    return best.candidate.config, renders, trace
