"""Automatic annotation engine producing pseudo caption-mask triplets.

Three routes turn weakly labelled images into pseudo triplets:

* box route: each annotated box is cropped, segmented and captioned;
* mask route: tags -> per-tag detection -> per-box segmentation, captioned
  with the category prompt;
* unlabeled route: caption the whole image, then ground the caption.

Model stages are interfaces (``Protocol``). The oracle implementations
read the shape-world scene behind the image and can inject controlled
noise so that score filtering has something to remove.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .data import Source, Task, Triplet, render_prompt, validate_triplet
from .metrics import iou
from .shapes import KINDS, COLORS, QueryError, Scene, parse_caption, rasterize_mask

log = logging.getLogger(__name__)

Box = tuple[int, int, int, int]  # top, left, bottom, right (half-open)


class DegenerateBox(ValueError):
    pass


class Tagger(Protocol):
    def tag(self, image: np.ndarray) -> list[str]: ...


class Detector(Protocol):
    def detect(self, image: np.ndarray, tag: str) -> list[Box]: ...


class MaskGenerator(Protocol):
    def segment(self, image: np.ndarray, box: Box) -> np.ndarray: ...


class Captioner(Protocol):
    def caption(self, image: np.ndarray, box: Box | None = None) -> str: ...


class Grounder(Protocol):
    def ground(self, image: np.ndarray, caption: str) -> np.ndarray: ...


class MatchScorer(Protocol):
    def score(self, image: np.ndarray, mask: np.ndarray, caption: str) -> float: ...


@dataclass
class Stages:
    tagger: Tagger
    detector: Detector
    mask_generator: MaskGenerator
    captioner: Captioner
    grounder: Grounder
    scorer: MatchScorer
    name: str = "custom"


@dataclass
class PseudoBatch:
    triplets: list[Triplet] = field(default_factory=list)
    route: str = ""
    stages: str = ""
    dropped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)


# --- oracle stages ---------------------------------------------------------


@dataclass
class Noise:
    """Corruption knobs for the oracle stages.

    With probability ``mask_prob`` a generated mask is dilated or eroded by
    ``radius`` pixels; with probability ``caption_prob`` a caption's colour
    is swapped for another one.
    """

    mask_prob: float = 0.0
    radius: int = 6
    caption_prob: float = 0.0


def corrupt_mask(mask: np.ndarray, radius: int, rng: np.random.Generator) -> np.ndarray:
    if radius <= 0:
        return mask
    size = 2 * radius + 1
    yy, xx = np.mgrid[:size, :size] - radius
    disk = yy ** 2 + xx ** 2 <= radius ** 2
    m = mask.astype(bool)
    if rng.random() < 0.5:
        out = ndimage.binary_dilation(m, structure=disk)
    else:
        out = ndimage.binary_erosion(m, structure=disk, border_value=0)
    return out.astype(np.uint8)


def _box_of(shape) -> Box:
    return shape.bbox


def _covering_shape(scene: Scene, box: Box) -> int:
    """Index of the shape whose bounding box overlaps ``box`` the most."""
    t, l, b, r = box
    best, best_area = -1, 0
    for i, s in enumerate(scene.shapes):
        st, sl, sb, sr = s.bbox
        area = max(0, min(b, sb) - max(t, st)) * max(0, min(r, sr) - max(l, sl))
        if area > best_area:
            best, best_area = i, area
    return best


class OracleStages:
    """Every stage answers from the ground-truth ``scene``.

    A fresh instance per image; ``seed`` fixes the noise draws.
    """

    def __init__(self, scene: Scene, noise: Noise = Noise(), seed: int = 0):
        self.scene = scene
        self.noise = noise
        self.rng = np.random.default_rng([seed, scene.seed])

    def as_stages(self) -> Stages:
        noisy = self.noise.mask_prob > 0 or self.noise.caption_prob > 0
        return Stages(self, self, self, self, self, self, name="noisy-oracle" if noisy else "oracle")

    def _maybe_corrupt(self, mask):
        if self.noise.mask_prob and self.rng.random() < self.noise.mask_prob:
            return corrupt_mask(mask, self.noise.radius, self.rng)
        return mask

    def _maybe_swap(self, color: str) -> str:
        if self.noise.caption_prob and self.rng.random() < self.noise.caption_prob:
            others = [c for c in COLORS if c != color]
            return others[int(self.rng.integers(len(others)))]
        return color

    def tag(self, image):
        return [k for k in KINDS if any(s.kind == k for s in self.scene.shapes)]

    def detect(self, image, tag):
        return [_box_of(s) for s in self.scene.shapes if s.kind == tag]

    def segment(self, image, box):
        i = _covering_shape(self.scene, box)
        if i < 0:
            return np.zeros(self.scene.canvas, dtype=np.uint8)
        t, l, b, r = box
        clip = np.zeros(self.scene.canvas, dtype=bool)
        clip[t:b, l:r] = True
        mask = (self.scene.shapes[i].mask(self.scene.canvas) & clip).astype(np.uint8)
        return self._maybe_corrupt(mask)

    def caption(self, image, box=None):
        if box is None:
            areas = self.scene.areas()
            s = self.scene.shapes[int(np.argmax(areas))]
            return f"the largest {self._maybe_swap(s.color)} {s.kind}"
        i = _covering_shape(self.scene, box)
        s = self.scene.shapes[i]
        return f"{self._maybe_swap(s.color)} {s.kind}"

    def _truth(self, caption: str) -> np.ndarray | None:
        text = caption if caption.startswith(("the ", "all ")) else f"the {caption}"
        try:
            return rasterize_mask(self.scene, parse_caption(text))
        except (QueryError, ValueError):
            return None

    def ground(self, image, caption):
        truth = self._truth(caption)
        if truth is None:
            return np.zeros(self.scene.canvas, dtype=np.uint8)
        return self._maybe_corrupt(truth)

    def score(self, image, mask, caption):
        truth = self._truth(caption)
        if truth is not None and truth.any():
            return float(iou(mask, truth))
        # a box caption like "blue square" can name several shapes; it
        # matches the mask as well as its best-fitting namesake
        named = [s for s in self.scene.shapes if f"{s.color} {s.kind}" in caption]
        return max((float(iou(mask, s.mask(self.scene.canvas))) for s in named), default=0.0)


# --- routes ----------------------------------------------------------------


def _make(image, mask, caption, task, source, stages: Stages) -> Triplet:
    score = float(np.clip(stages.scorer.score(image, mask, caption), 0.0, 1.0))
    t = Triplet(image=image, mask=np.asarray(mask, dtype=np.uint8), caption=caption,
                task=task, source=source, score=score)
    validate_triplet(t)
    return t


def run_box_route(image: np.ndarray, boxes: Sequence[Box], stages: Stages) -> PseudoBatch:
    """Crop each box, segment and caption the crop, paste the mask back."""
    h, w = image.shape[:2]
    for box in boxes:
        t, l, b, r = box
        if b <= t or r <= l:
            raise DegenerateBox(f"zero-area box {box}")
        if t < 0 or l < 0 or b > h or r > w:
            raise ValueError(f"box {box} outside the {h}x{w} image")
    batch = PseudoBatch(route="box", stages=stages.name)
    for box in boxes:
        t, l, b, r = box
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[t:b, l:r] = np.asarray(stages.mask_generator.segment(image, box))[t:b, l:r]
        caption = stages.captioner.caption(image, box)
        if not mask.any():
            batch.dropped.append(f"box {box}: empty mask")
            log.info("box route: dropped %s, empty mask", box)
            continue
        batch.triplets.append(_make(image, mask, caption, Task.RIS, Source.PSEUDO_BOX, stages))
    return batch


def run_mask_route(image: np.ndarray, stages: Stages) -> PseudoBatch:
    """Tag, detect per tag and segment per box; one ``all {tag}`` triplet
    per tag holding the union of its box masks."""
    batch = PseudoBatch(route="mask", stages=stages.name)
    h, w = image.shape[:2]
    for tag in stages.tagger.tag(image):
        boxes = stages.detector.detect(image, tag)
        if not boxes:
            batch.dropped.append(f"tag {tag!r}: no detections")
            continue
        union = np.zeros((h, w), dtype=np.uint8)
        for box in boxes:
            union |= np.asarray(stages.mask_generator.segment(image, box), dtype=np.uint8)
        if not union.any():
            batch.dropped.append(f"tag {tag!r}: empty masks")
            continue
        caption = render_prompt(Task.SS, tag)
        batch.triplets.append(_make(image, union, caption, Task.SS, Source.PSEUDO_MASK, stages))
    return batch


def run_unlabeled_route(image: np.ndarray, stages: Stages) -> PseudoBatch:
    batch = PseudoBatch(route="unlabeled", stages=stages.name)
    caption = stages.captioner.caption(image)
    mask = np.asarray(stages.grounder.ground(image, caption), dtype=np.uint8)
    if not mask.any():
        reason = f"grounder returned an empty mask for {caption!r}"
        batch.dropped.append(reason)
        log.info("unlabeled route: %s", reason)
        return batch
    batch.triplets.append(_make(image, mask, caption, Task.RIS, Source.PSEUDO_UNLABELED, stages))
    return batch


def filter_triplets(batch: PseudoBatch, scorer: MatchScorer | None, threshold: float) -> PseudoBatch:
    """Keep triplets whose match score is at least ``threshold``, in order.

    With ``scorer`` None the scores already on the triplets are used.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    kept = []
    for t in batch.triplets:
        s = t.score if scorer is None else float(np.clip(scorer.score(t.image, t.mask, t.caption), 0, 1))
        if s is not None and s >= threshold:
            kept.append(replace(t, score=s))
    return replace(batch, triplets=kept, dropped=list(batch.dropped))


ROUTES = {"box": run_box_route, "mask": run_mask_route, "unlabeled": run_unlabeled_route}
