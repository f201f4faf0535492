"""Shape-world: deterministic synthetic scenes with exact ground truth.

Shapes are solid circles, squares and upward triangles on a black canvas.
Each shape has a border ring drawn at a darker shade of its colour, so the
part-level queries (border vs interior) are visible in the pixels. Pixel
membership is decided at pixel centres with no anti-aliasing, which keeps
every mask oracle integer-exact.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .data import Source, Task, Triplet, render_prompt, validate_triplet

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
# border shade as an exact uint8 multiple, 0.6 * 255 = 153
BORDER_SHADE = 0.6
PARTS = ("border", "interior")
RELATIONS = ("left of", "right of", "above", "below")
SUPERLATIVES = ("largest", "smallest")
GRANULARITIES = ("category", "referring", "salient", "part")


class InfeasibleConfig(ValueError):
    pass


class QueryError(ValueError):
    """A referring query matched zero shapes or more than one."""


@dataclass(frozen=True)
class SceneConfig:
    canvas: tuple[int, int] = (64, 64)
    count: tuple[int, int] = (1, 3)
    size: tuple[int, int] = (16, 30)
    border_width: int = 4
    gap: int = 2
    max_attempts: int = 200

    def check(self) -> None:
        h, w = self.canvas
        lo, hi = self.count
        if h < 32 or w < 32:
            raise InfeasibleConfig(f"canvas {self.canvas} smaller than 32x32")
        if lo < 1 or hi < lo:
            raise InfeasibleConfig(f"empty shape-count range {self.count}")
        smin, smax = self.size
        if smin < 2 or smax < smin:
            raise InfeasibleConfig(f"bad size range {self.size}")
        if smin < 2 * self.border_width:
            raise InfeasibleConfig("minimum size below twice the border width")
        if smin > min(h, w):
            raise InfeasibleConfig(f"shapes of size {smin} cannot fit a {h}x{w} canvas")
        if lo * (smin + self.gap) ** 2 > h * w:
            raise InfeasibleConfig(f"{lo} shapes of size {smin} cannot fit a {h}x{w} canvas")


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    center: tuple[int, int]  # (row, col), a pixel corner
    size: int  # bounding box side, even
    border_width: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size < 2 * self.border_width:
            raise ValueError("size must be at least twice the border width")

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(top, left, bottom, right), half-open."""
        r, c = self.center
        h = self.size // 2
        return (r - h, c - h, r + h, c + h)

    def region(self, shape: tuple[int, int], inset: float = 0.0) -> np.ndarray:
        """Boolean grid of pixels whose centres lie inside the shape shrunk
        by ``inset`` pixels."""
        rows = np.arange(shape[0])[:, None] + 0.5
        cols = np.arange(shape[1])[None, :] + 0.5
        cy, cx = self.center
        half = self.size / 2.0
        if self.kind == "circle":
            rad = half - inset
            return (rows - cy) ** 2 + (cols - cx) ** 2 <= rad * rad
        if self.kind == "square":
            lim = half - inset
            return (np.abs(rows - cy) <= lim) & (np.abs(cols - cx) <= lim)
        # isosceles triangle spanning the bounding box, apex up
        top, bottom = cy - half, cy + half
        inside = (rows <= bottom - inset) & (cols == cols)
        for (y0, x0), (y1, x1) in (
            ((top, cx), (bottom, cx - half)),
            ((bottom, cx + half), (top, cx)),
        ):
            # signed distance to the edge line, positive towards the centroid
            ny, nx = -(x1 - x0), (y1 - y0)
            norm = np.hypot(ny, nx)
            d = ((rows - y0) * ny + (cols - x0) * nx) / norm
            inside &= d >= inset
        return inside

    def mask(self, shape, part: str | None = None) -> np.ndarray:
        full = self.region(shape)
        if part is None:
            return full
        inner = self.region(shape, inset=self.border_width)
        if part == "interior":
            return inner
        if part == "border":
            return full & ~inner
        raise ValueError(f"unknown part {part!r}")


@dataclass(frozen=True)
class Scene:
    seed: int
    canvas: tuple[int, int]
    shapes: tuple[Shape, ...]

    def __post_init__(self):
        if not self.shapes:
            raise ValueError("a scene needs at least one shape")
        h, w = self.canvas
        for s in self.shapes:
            t, l, b, r = s.bbox
            if t < 0 or l < 0 or b > h or r > w:
                raise ValueError(f"shape {s} leaves the canvas")

    def areas(self) -> list[int]:
        return [int(s.region(self.canvas).sum()) for s in self.shapes]

    def render(self) -> np.ndarray:
        """H x W x 3 float image with values in {k/255}."""
        img = np.zeros(self.canvas + (3,), dtype=np.uint8)
        for s in self.shapes:
            rgb = np.array(COLORS[s.color], dtype=np.float64)
            img[s.mask(self.canvas, "interior")] = rgb.astype(np.uint8)
            img[s.mask(self.canvas, "border")] = np.rint(rgb * BORDER_SHADE).astype(np.uint8)
        return img.astype(np.float64) / 255.0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "canvas": list(self.canvas),
            "shapes": [
                {**asdict(s), "center": list(s.center)} for s in self.shapes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        shapes = tuple(
            Shape(
                kind=s["kind"],
                color=s["color"],
                center=tuple(s["center"]),
                size=int(s["size"]),
                border_width=int(s["border_width"]),
            )
            for s in d["shapes"]
        )
        return cls(seed=int(d["seed"]), canvas=tuple(d["canvas"]), shapes=shapes)


def _boxes_clear(a: Shape, b: Shape, gap: int) -> bool:
    at, al, ab, ar = a.bbox
    bt, bl, bb, br = b.bbox
    return ab + gap <= bt or bb + gap <= at or ar + gap <= bl or br + gap <= al


def _place(rng: np.random.Generator, cfg: SceneConfig, size: int, taken: Sequence[Shape]) -> tuple[int, int] | None:
    h, w = cfg.canvas
    half = size // 2
    for _ in range(cfg.max_attempts):
        center = (int(rng.integers(half, h - half + 1)), int(rng.integers(half, w - half + 1)))
        probe = Shape("square", "red", center, size, cfg.border_width)
        if all(_boxes_clear(probe, t, cfg.gap) for t in taken):
            return center
    return None


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Deterministically sample a scene from ``seed``.

    Shapes never overlap, and area ties for the largest shape are resampled
    so that the salient query always has exactly one answer.
    """
    config.check()
    rng = np.random.default_rng(seed)
    smin, smax = config.size
    for _ in range(config.max_attempts):
        n = int(rng.integers(config.count[0], config.count[1] + 1))
        shapes: list[Shape] = []
        for _ in range(n):
            size = 2 * int(rng.integers((smin + 1) // 2, smax // 2 + 1))
            center = _place(rng, config, size, shapes)
            if center is None:
                break
            shapes.append(
                Shape(
                    kind=KINDS[int(rng.integers(len(KINDS)))],
                    color=list(COLORS)[int(rng.integers(len(COLORS)))],
                    center=center,
                    size=size,
                    border_width=config.border_width,
                )
            )
        if len(shapes) != n:
            continue
        scene = Scene(seed=seed, canvas=tuple(config.canvas), shapes=tuple(shapes))
        areas = scene.areas()
        if areas.count(max(areas)) == 1:
            return scene
    raise InfeasibleConfig(f"could not place shapes after {config.max_attempts} attempts")


def jitter_scene(scene: Scene, rng: np.random.Generator, amount: int = 2, config: SceneConfig = SceneConfig()) -> Scene:
    """Move every shape by up to ``amount`` pixels, keeping the scene legal."""
    h, w = scene.canvas
    for _ in range(config.max_attempts):
        moved = []
        for s in scene.shapes:
            dr, dc = (int(v) for v in rng.integers(-amount, amount + 1, size=2))
            half = s.size // 2
            r = min(max(s.center[0] + dr, half), h - half)
            c = min(max(s.center[1] + dc, half), w - half)
            moved.append(replace(s, center=(r, c)))
        ok = all(
            _boxes_clear(a, b, config.gap)
            for i, a in enumerate(moved)
            for b in moved[i + 1:]
        )
        if ok:
            cand = replace(scene, shapes=tuple(moved))
            areas = cand.areas()
            if areas.count(max(areas)) == 1:
                return cand
    return scene


# --- queries ---------------------------------------------------------------


@dataclass(frozen=True)
class Query:
    granularity: str
    kind: str | None = None
    color: str | None = None
    superlative: str | None = None
    relation: str | None = None
    other_kind: str | None = None
    other_color: str | None = None
    part: str | None = None

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity in ("category", "part") and self.kind is None:
            raise ValueError(f"{self.granularity} query needs a kind")
        if self.granularity == "part" and self.part not in PARTS:
            raise ValueError(f"part must be one of {PARTS}")
        if self.superlative is not None and self.superlative not in SUPERLATIVES:
            raise ValueError(f"unknown superlative {self.superlative!r}")
        if self.relation is not None:
            if self.relation not in RELATIONS:
                raise ValueError(f"unknown relation {self.relation!r}")
            if self.other_kind is None:
                raise ValueError("a relation needs the other shape's kind")

    @property
    def task(self) -> Task:
        return {
            "category": Task.SS,
            "referring": Task.RIS,
            "salient": Task.SOD,
            "part": Task.PS,
        }[self.granularity]

    def caption(self, task: Task | None = None) -> str:
        task = self.task if task is None else task
        if self.granularity == "category":
            return render_prompt(task, self.kind)
        if self.granularity == "part":
            return render_prompt(task, f"{self.kind} {self.part}")
        if self.granularity == "salient":
            return render_prompt(task)
        return render_prompt(task, self.referring_text())

    def referring_text(self) -> str:
        words = ["the"]
        if self.superlative:
            words.append(self.superlative)
        if self.color:
            words.append(self.color)
        words.append(self.kind or "shape")
        if self.relation:
            words += [self.relation, "the"]
            if self.other_color:
                words.append(self.other_color)
            words.append(self.other_kind)
        return " ".join(words)


_KIND_RE = "|".join(KINDS + ("shape",))
_COLOR_RE = "|".join(COLORS)
_REFERRING_RE = re.compile(
    rf"^the(?: (?P<sup>{'|'.join(SUPERLATIVES)}))?(?: (?P<color>{_COLOR_RE}))? (?P<kind>{_KIND_RE})"
    rf"(?: (?P<rel>{'|'.join(RELATIONS)}) the(?: (?P<ocolor>{_COLOR_RE}))? (?P<okind>{_KIND_RE}))?$"
)


def parse_caption(caption: str) -> Query:
    """Inverse of :meth:`Query.caption` over the shape-world grammar."""
    text = " ".join(caption.lower().split())
    if text == render_prompt(Task.SOD):
        return Query("salient")
    if text.startswith("all "):
        words = text[4:].split()
        if len(words) == 1 and words[0] in KINDS:
            return Query("category", kind=words[0])
        if len(words) == 2 and words[0] in KINDS and words[1] in PARTS:
            return Query("part", kind=words[0], part=words[1])
        raise ValueError(f"unparseable category caption {caption!r}")
    m = _REFERRING_RE.match(text)
    if not m:
        raise ValueError(f"unparseable referring caption {caption!r}")

    def kind(k):
        return None if k in (None, "shape") else k

    return Query(
        "referring",
        kind=kind(m["kind"]),
        color=m["color"],
        superlative=m["sup"],
        relation=m["rel"],
        other_kind=m["okind"],
        other_color=m["ocolor"],
    )


def _related(a: Shape, b: Shape, relation: str) -> bool:
    at, al, ab, ar = a.bbox
    bt, bl, bb, br = b.bbox
    if relation == "left of":
        return ar <= bl
    if relation == "right of":
        return al >= br
    if relation == "above":
        return ab <= bt
    return at >= bb


def _attr_match(s: Shape, kind: str | None, color: str | None) -> bool:
    return (kind in (None, "shape") or s.kind == kind) and (color is None or s.color == color)


def resolve_referring(scene: Scene, query: Query) -> int:
    """Index of the unique shape a referring query names."""
    cands = [
        i for i, s in enumerate(scene.shapes)
        if _attr_match(s, query.kind, query.color)
    ]
    if query.relation:
        cands = [
            i for i in cands
            if any(
                j != i
                and _attr_match(o, query.other_kind, query.other_color)
                and _related(scene.shapes[i], o, query.relation)
                for j, o in enumerate(scene.shapes)
            )
        ]
    if query.superlative and cands:
        areas = scene.areas()
        best = (max if query.superlative == "largest" else min)(areas[i] for i in cands)
        cands = [i for i in cands if areas[i] == best]
    if len(cands) != 1:
        raise QueryError(f"{query.referring_text()!r} matches {len(cands)} shapes")
    return cands[0]


def rasterize_mask(scene: Scene, query: Query) -> np.ndarray:
    """Exact ground-truth mask (uint8 in {0, 1}) for ``query``."""
    out = np.zeros(scene.canvas, dtype=bool)
    if query.granularity == "category":
        for s in scene.shapes:
            if s.kind == query.kind:
                out |= s.mask(scene.canvas)
    elif query.granularity == "part":
        for s in scene.shapes:
            if s.kind == query.kind:
                out |= s.mask(scene.canvas, query.part)
    elif query.granularity == "salient":
        areas = scene.areas()
        out = scene.shapes[int(np.argmax(areas))].mask(scene.canvas)
    else:
        out = scene.shapes[resolve_referring(scene, query)].mask(scene.canvas)
    return out.astype(np.uint8)


def shape_caption(shape: Shape) -> str:
    return f"{shape.color} {shape.kind}"


def referring_queries(scene: Scene) -> list[Query]:
    """Every referring query of the grammar that names exactly one shape.

    Order is fixed: colour+kind, superlatives, then spatial relations.
    """
    out: list[Query] = []
    seen: set[str] = set()

    def add(q: Query):
        text = q.referring_text()
        if text in seen:
            return
        try:
            resolve_referring(scene, q)
        except QueryError:
            return
        seen.add(text)
        out.append(q)

    for s in scene.shapes:
        add(Query("referring", kind=s.kind, color=s.color))
    for kind in KINDS:
        if sum(s.kind == kind for s in scene.shapes) >= 2:
            for sup in SUPERLATIVES:
                add(Query("referring", kind=kind, superlative=sup))
    for a in scene.shapes:
        for b in scene.shapes:
            if a is b:
                continue
            for rel in RELATIONS:
                if _related(a, b, rel):
                    add(Query("referring", kind=a.kind, relation=rel, other_kind=b.kind))
    return out


def scene_queries(scene: Scene, task: Task) -> list[Query]:
    kinds = sorted({s.kind for s in scene.shapes}, key=KINDS.index)
    if task in (Task.SS, Task.OVS):
        return [Query("category", kind=k) for k in kinds]
    if task is Task.PS:
        return [Query("part", kind=k, part=p) for k in kinds for p in PARTS]
    if task is Task.SOD:
        return [Query("salient")]
    return referring_queries(scene)


TASK_ORDER = (Task.RIS, Task.RVOS, Task.SS, Task.OVS, Task.PS, Task.SOD)


def scene_to_triplets(scene: Scene, tasks: Iterable[Task | str], *, image: np.ndarray | None = None,
                      video_id: str | None = None, frame_index: int | None = None) -> list[Triplet]:
    """One supervised triplet per legal (task, query) pair of ``scene``."""
    tasks = {Task.parse(t) for t in tasks}
    if not tasks:
        return []
    image = scene.render() if image is None else image
    out = []
    for task in TASK_ORDER:
        if task not in tasks:
            continue
        for q in scene_queries(scene, task):
            t = Triplet(
                image=image,
                mask=rasterize_mask(scene, q),
                caption=q.caption(task),
                task=task,
                source=Source.SUPERVISED,
                video_id=video_id if task is Task.RVOS else None,
                frame_index=frame_index if task is Task.RVOS else None,
            )
            validate_triplet(t)
            out.append(t)
    return out


def generate_video(seed: int, n_frames: int = 4, config: SceneConfig = SceneConfig()) -> list[Scene]:
    """A short "video": one scene repeated with per-frame position jitter."""
    base = generate_scene(seed, config)
    rng = np.random.default_rng([seed, 1])
    frames = [base]
    for _ in range(n_frames - 1):
        frames.append(jitter_scene(base, rng, config=config))
    return frames


def corpus_hash(triplets: Sequence[Triplet]) -> str:
    """SHA-256 over the serialised captions, tags and pixel data."""
    h = hashlib.sha256()
    for t in triplets:
        meta = [t.caption, t.task.value, t.source.value, t.score, t.video_id, t.frame_index]
        h.update(json.dumps(meta).encode())
        h.update(np.ascontiguousarray(np.rint(t.image * 255).astype(np.uint8)).tobytes())
        h.update(np.ascontiguousarray(t.mask.astype(np.uint8)).tobytes())
    return h.hexdigest()


GRANULARITY_TASK = {"category": Task.SS, "referring": Task.RIS, "salient": Task.SOD, "part": Task.PS}


def sample_corpus(n: int, seed: int = 0, config: SceneConfig = SceneConfig(),
                  granularities: Sequence[str] = GRANULARITIES) -> list[Triplet]:
    """``n`` triplets from distinct scenes, cycling through granularities.

    Scene seeds are ``seed * 1_000_003 + k``; the query for each scene is
    drawn from that granularity's legal queries with a seeded generator.
    """
    rng = np.random.default_rng([seed, 7])
    out: list[Triplet] = []
    k = 0
    while len(out) < n:
        gran = granularities[len(out) % len(granularities)]
        scene = generate_scene(seed * 1_000_003 + k, config)
        k += 1
        task = GRANULARITY_TASK[gran]
        queries = scene_queries(scene, task)
        if not queries:
            continue
        q = queries[int(rng.integers(len(queries)))]
        t = Triplet(image=scene.render(), mask=rasterize_mask(scene, q), caption=q.caption(task), task=task)
        validate_triplet(t)
        out.append(t)
    return out
