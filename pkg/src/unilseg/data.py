"""Unified triplet records, task prompts and JSON Lines manifests."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image


class TripletError(ValueError):
    """A triplet violates one of its invariants.

    ``code`` is one of ``shape_mismatch``, ``empty_caption``,
    ``nonbinary_mask``, ``score_presence_violation`` or ``bad_image``.
    """

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


class ManifestError(ValueError):
    pass


class Task(str, enum.Enum):
    RIS = "RIS"
    RVOS = "RVOS"
    SS = "SS"
    OVS = "OVS"
    PS = "PS"
    SOD = "SOD"

    @classmethod
    def parse(cls, value: "str | Task") -> "Task":
        if isinstance(value, Task):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected one of {[t.value for t in cls]}") from None


class Source(str, enum.Enum):
    SUPERVISED = "supervised"
    PSEUDO_BOX = "pseudo_box"
    PSEUDO_MASK = "pseudo_mask"
    PSEUDO_UNLABELED = "pseudo_unlabeled"

    @property
    def is_pseudo(self) -> bool:
        return self is not Source.SUPERVISED


SALIENT_PROMPT = "the most salient object"
CATEGORY_TEMPLATE = "all {}"

TEMPLATES: dict[Task, str | None] = {
    Task.RIS: None,
    Task.RVOS: None,
    Task.SS: CATEGORY_TEMPLATE,
    Task.OVS: CATEGORY_TEMPLATE,
    Task.PS: CATEGORY_TEMPLATE,
    Task.SOD: SALIENT_PROMPT,
}


@dataclass(frozen=True)
class PromptTemplate:
    task: Task
    template: str | None

    @classmethod
    def for_task(cls, task: Task | str) -> "PromptTemplate":
        task = Task.parse(task)
        return cls(task, TEMPLATES[task])


def render_prompt(task: Task | str, payload: str | None = None) -> str:
    """Turn a task and its payload into the caption fed to the model.

    Referring tasks pass the natural caption through unchanged, category
    tasks fill the payload verbatim into ``"all {}"`` and salient object
    detection takes no payload at all.
    """
    task = Task.parse(task)
    template = TEMPLATES[task]
    if task is Task.SOD:
        if payload is not None:
            raise ValueError("SOD prompts take no payload")
        return SALIENT_PROMPT
    if payload is None or not payload.strip():
        raise ValueError(f"{task.value} prompts require a non-empty payload")
    if template is None:
        return payload
    return template.format(payload)


@dataclass(eq=False)
class Triplet:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    caption: str
    task: Task
    source: Source = Source.SUPERVISED
    score: float | None = None
    image_path: str | None = None
    mask_path: str | None = None
    video_id: str | None = None
    frame_index: int | None = None

    def __post_init__(self):
        self.task = Task.parse(self.task)
        self.source = Source(self.source)

    @property
    def payload(self) -> str | None:
        """Category name behind an ``all {}`` caption, else None."""
        prefix = CATEGORY_TEMPLATE.format("")
        if TEMPLATES[self.task] == CATEGORY_TEMPLATE and self.caption.startswith(prefix):
            return self.caption[len(prefix):]
        return None

    def same_as(self, other: "Triplet") -> bool:
        return (
            self.caption == other.caption
            and self.task is other.task
            and self.source is other.source
            and self.score == other.score
            and self.video_id == other.video_id
            and self.frame_index == other.frame_index
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
        )


def validate_triplet(t: Triplet) -> None:
    """Raise :class:`TripletError` unless every triplet invariant holds."""
    image = np.asarray(t.image)
    mask = np.asarray(t.mask)
    if image.ndim != 3 or image.shape[2] != 3:
        raise TripletError("bad_image", f"image must be HxWx3, got {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise TripletError("bad_image", "image values must lie in [0, 1]")
    if mask.shape != image.shape[:2]:
        raise TripletError("shape_mismatch", f"mask {mask.shape} vs image {image.shape[:2]}")
    if not t.caption or not t.caption.strip():
        raise TripletError("empty_caption")
    if not np.isin(mask, (0, 1)).all():
        raise TripletError("nonbinary_mask")
    has_score = t.score is not None
    if has_score != t.source.is_pseudo:
        raise TripletError(
            "score_presence_violation",
            f"source={t.source.value} score={t.score!r}",
        )
    if has_score and not 0.0 <= t.score <= 1.0:
        raise TripletError("score_presence_violation", f"score {t.score} outside [0, 1]")


# --- on-disk formats -------------------------------------------------------

MANIFEST_HEADER = {"format": "unilseg-manifest", "version": 1}
REQUIRED_KEYS = ("image", "mask", "caption", "task", "source", "score")


def save_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise ManifestError(f"{path}: mask pixels must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def write_manifest(triplets: Iterable[Triplet], path: str | Path) -> list[dict]:
    """Write triplets as JSON Lines, saving images and masks as PNG files
    under ``images/`` and ``masks/`` next to the manifest.

    Triplets sharing one image array share one image file. Returns the
    records written, one per triplet.
    """
    path = Path(path)
    root = path.parent
    triplets = list(triplets)
    for t in triplets:
        validate_triplet(t)
    root.mkdir(parents=True, exist_ok=True)
    if triplets:
        (root / "images").mkdir(exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)

    lines = [json.dumps(MANIFEST_HEADER)]
    records = []
    written: dict[int, str] = {}
    for i, t in enumerate(triplets):
        image_rel = written.get(id(t.image))
        if image_rel is None:
            image_rel = f"images/{path.stem}_{i:06d}.png"
            save_image(root / image_rel, t.image)
            written[id(t.image)] = image_rel
        mask_rel = f"masks/{path.stem}_{i:06d}.png"
        save_mask(root / mask_rel, t.mask)
        record = {
            "image": image_rel,
            "mask": mask_rel,
            "caption": t.caption,
            "task": t.task.value,
            "source": t.source.value,
            "score": t.score,
        }
        if t.video_id is not None:
            record["video"] = t.video_id
            record["frame"] = t.frame_index
        lines.append(json.dumps(record))
        records.append(record)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return records


def load_manifest(path: str | Path) -> list[Triplet]:
    path = Path(path)
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:1: {exc}") from exc
    if header.get("format") != MANIFEST_HEADER["format"]:
        raise ManifestError(f"{path}: not a unilseg manifest")

    out: list[Triplet] = []
    images: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        missing = [k for k in REQUIRED_KEYS if k not in rec]
        if missing:
            raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
        image_rel = rec["image"]
        if image_rel not in images:
            images[image_rel] = load_image(root / image_rel)
        try:
            t = Triplet(
                image=images[image_rel],
                mask=load_mask(root / rec["mask"]),
                caption=rec["caption"],
                task=Task.parse(rec["task"]),
                source=Source(rec["source"]),
                score=None if rec["score"] is None else float(rec["score"]),
                image_path=image_rel,
                mask_path=rec["mask"],
                video_id=rec.get("video"),
                frame_index=rec.get("frame"),
            )
        except (ValueError, OSError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        validate_triplet(t)
        out.append(t)
    return out
