"""Toy referring-segmentation data and the frozen encoder stubs standing in for pretrained backbones.

Scenes hold 2-4 coloured shapes on a dark background.  Each scene refers to one
object with a short expression that matches it and nothing else.  Image and
text features come from seeded random projections that are never trained.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from haris.tensor import ContractError, Parameter

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.90, 0.85, 0.15),
}
DIRECTIONS = ("left", "right", "top", "bottom")
FILLERS = ("the", "object", "on", "side")
VOCAB = tuple(COLORS) + KINDS + DIRECTIONS + FILLERS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
BACKGROUND = (0.08, 0.08, 0.10)
PATCH = 4
VAL_SEED_OFFSET = 10**6
MAX_PLACEMENT_ATTEMPTS = 100
SIZE_RANGE = (5, 7)  # inclusive half-extent range in pixels


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class ShapeObject:
    kind: str
    color: str
    cy: int
    cx: int
    size: int  # half extent in pixels


@dataclass
class SceneSpec:
    image_size: int
    objects: list[ShapeObject]
    referred_index: int
    expression: list[str]


def object_mask(obj: ShapeObject, s: int) -> np.ndarray:
    """Rasterise one shape, sampling at pixel centres."""
    yy, xx = np.mgrid[0:s, 0:s] + 0.5
    dy, dx = yy - obj.cy, xx - obj.cx
    if obj.kind == "circle":
        return dy * dy + dx * dx <= obj.size * obj.size
    if obj.kind == "square":
        return (np.abs(dy) <= obj.size) & (np.abs(dx) <= obj.size)
    # apex on top, base at the bottom of the bounding box
    half_width = (dy + obj.size) / 2.0
    return (np.abs(dy) <= obj.size) & (np.abs(dx) <= half_width)


def render(scene: SceneSpec) -> np.ndarray:
    s = scene.image_size
    img = np.empty((s, s, 3))
    img[:] = BACKGROUND
    for obj in scene.objects:
        img[object_mask(obj, s)] = COLORS[obj.color]
    return img


def matching_objects(objects: list[ShapeObject], tokens: list[str]) -> list[int]:
    """Indices of objects the expression describes.

    Colour and kind words filter the candidates; a direction word keeps the
    candidate that is strictly extreme in that direction (none on ties).
    """
    colors = [t for t in tokens if t in COLORS]
    kinds = [t for t in tokens if t in KINDS]
    dirs = [t for t in tokens if t in DIRECTIONS]
    cands = [
        i for i, o in enumerate(objects)
        if all(o.color == c for c in colors) and all(o.kind == k for k in kinds)
    ]
    for d in dirs:
        key = {
            "left": lambda o: -o.cx,
            "right": lambda o: o.cx,
            "top": lambda o: -o.cy,
            "bottom": lambda o: o.cy,
        }[d]
        vals = [key(objects[i]) for i in cands]
        if not vals:
            break
        best = max(vals)
        cands = [i for i, v in zip(cands, vals) if v == best]
        if len(cands) > 1:
            cands = []
    return cands


def _separated(a: ShapeObject, b: ShapeObject) -> bool:
    gap = a.size + b.size + 2
    return abs(a.cx - b.cx) >= gap or abs(a.cy - b.cy) >= gap


def _random_object(rng, s: int, cy=None, cx=None) -> ShapeObject:
    size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
    kind = KINDS[rng.integers(len(KINDS))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    if cy is None:
        cy = int(rng.integers(size + 1, s - size))
    if cx is None:
        cx = int(rng.integers(size + 1, s - size))
    return ShapeObject(kind, color, cy, cx, size)


def _expression(objects: list[ShapeObject], r: int) -> list[str] | None:
    target = objects[r]
    simple = [target.color, target.kind]
    if matching_objects(objects, simple) == [r]:
        return simple
    for d in DIRECTIONS:
        expr = simple + ["on", d, "side"]
        if matching_objects(objects, expr) == [r]:
            return expr
    return None  # e.g. the middle one of three identical objects


def _relaxed_pair(rng, s: int) -> list[ShapeObject]:
    # two objects in opposite horizontal halves never collide and are always describable
    cy = s // 2
    return [_random_object(rng, s, cy=cy, cx=s // 4), _random_object(rng, s, cy=cy, cx=3 * s // 4)]


def generate_scene(seed: int, image_size: int = 32) -> tuple[SceneSpec, np.ndarray]:
    """Deterministic scene for ``seed``; returns the scene description and its RGB image in [0, 1]."""
    if image_size % PATCH or image_size < 16:
        raise ContractError(f"image size {image_size} must be a multiple of {PATCH} and >= 16")
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(2, 5))
    objects: list[ShapeObject] = []
    attempts = 0
    while len(objects) < n_obj and attempts < MAX_PLACEMENT_ATTEMPTS:
        attempts += 1
        cand = _random_object(rng, image_size)
        if all(_separated(cand, o) for o in objects):
            objects.append(cand)
    if len(objects) < n_obj:
        objects = _relaxed_pair(rng, image_size)
    r = int(rng.integers(len(objects)))
    # an ambiguous referent is replaced by the next describable object
    for k in range(len(objects)):
        expr = _expression(objects, (r + k) % len(objects))
        if expr is not None:
            scene = SceneSpec(image_size, objects, (r + k) % len(objects), expr)
            return scene, render(scene)
    objects = _relaxed_pair(rng, image_size)
    scene = SceneSpec(image_size, objects, r % 2, _expression(objects, r % 2))
    return scene, render(scene)


# ---------------------------------------------------------------- encoder stubs


@dataclass(eq=False)
class EncoderStubs:
    """Frozen seeded projections: three image levels, word embeddings, sentence transform."""

    level_proj: list[Parameter]
    pos_code: Parameter
    embedding: Parameter
    sentence_transform: Parameter
    image_size: int

    @classmethod
    def create(cls, seed: int, image_size: int, dim: int, text_dim: int) -> "EncoderStubs":
        rng = np.random.default_rng(seed)
        d_in = 3 * PATCH * PATCH
        proj = [
            Parameter(f"stub.level{i + 1}_proj", rng.normal(0.0, 1.0 / np.sqrt(12.0), (d_in, dim)),
                      trainable=False)
            for i in range(3)
        ]
        grid = image_size // PATCH
        pos = Parameter("stub.pos_code", 0.5 * sinusoidal_code(grid, dim), trainable=False)
        emb = Parameter("stub.embedding", rng.normal(0.0, 1.0, (len(VOCAB), text_dim)), trainable=False)
        tr = Parameter(
            "stub.sentence_transform",
            rng.normal(0.0, 1.0 / np.sqrt(text_dim), (text_dim, text_dim)),
            trainable=False,
        )
        return cls(proj, pos, emb, tr, image_size)

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // PATCH
        return g, g


def sinusoidal_code(grid: int, dim: int) -> np.ndarray:
    """2-D sin/cos position code, ``[grid * grid, dim]``: first half encodes rows, second columns."""
    n_freq = max(dim // 4, 1)
    omega = 100.0 ** (-np.arange(n_freq) / n_freq)
    pos = np.arange(grid, dtype=np.float64)
    ang = pos[:, None] * omega[None, :]
    axis_code = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # [grid, 2 n_freq]
    code = np.zeros((grid, grid, dim))
    half = min(2 * n_freq, dim // 2)
    code[:, :, :half] = axis_code[:, None, :half]
    code[:, :, dim // 2:dim // 2 + half] = axis_code[None, :, :half]
    return code.reshape(grid * grid, dim)


def patchify(image: np.ndarray) -> np.ndarray:
    """``[S, S, 3]`` -> ``[G, G, 48]`` with each patch flattened row-major (py, px, ch)."""
    s = image.shape[0]
    if image.shape[:2] != (s, s) or s % PATCH:
        raise ContractError(f"image shape {image.shape} must be square with side divisible by {PATCH}")
    g = s // PATCH
    return image.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4).reshape(g, g, 3 * PATCH * PATCH)


def neighborhood_pool(patches: np.ndarray, k: int) -> np.ndarray:
    """Average each grid cell with its k x k neighbourhood, counting only in-grid cells."""
    g1, g2, d = patches.shape
    r = k // 2
    padded = np.zeros((g1 + 2 * r, g2 + 2 * r, d))
    padded[r:r + g1, r:r + g2] = patches
    ones = np.zeros((g1 + 2 * r, g2 + 2 * r))
    ones[r:r + g1, r:r + g2] = 1.0
    total = np.zeros((g1, g2, d))
    count = np.zeros((g1, g2))
    for dy in range(k):
        for dx in range(k):
            total += padded[dy:dy + g1, dx:dx + g2]
            count += ones[dy:dy + g1, dx:dx + g2]
    return total / count[..., None]


def encode_image_stub(image: np.ndarray, stubs: EncoderStubs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    patches = patchify(image)
    g = patches.shape[0]
    levels = []
    for proj, k in zip(stubs.level_proj, (1, 3, 5)):
        pooled = patches if k == 1 else neighborhood_pool(patches, k)
        levels.append(pooled.reshape(g * g, -1) @ proj.data + stubs.pos_code.data)
    return levels[0], levels[1], levels[2]


def encode_text_stub(tokens, stubs: EncoderStubs, max_words: int = 25) -> tuple[np.ndarray, np.ndarray]:
    ids = []
    for tok in tokens:
        if tok not in TOKEN_ID:
            raise VocabularyError(f"unknown token {tok!r}")
        ids.append(TOKEN_ID[tok])
    if not 1 <= len(ids) <= max_words:
        raise ContractError(f"expression length {len(ids)} outside [1, {max_words}]")
    f_w = stubs.embedding.data[ids]
    f_s = f_w.mean(axis=0, keepdims=True) @ stubs.sentence_transform.data
    return f_w, f_s


@dataclass(eq=False)
class EncodedSample:
    seed: int
    f_v1: np.ndarray
    f_v2: np.ndarray
    f_v3: np.ndarray
    f_w: np.ndarray
    f_s: np.ndarray
    gt_mask: np.ndarray
    tokens: list[str] = field(default_factory=list)
    scene: SceneSpec | None = None


def encode_sample(seed: int, stubs: EncoderStubs, max_words: int = 25) -> EncodedSample:
    scene, image = generate_scene(seed, stubs.image_size)
    f_v1, f_v2, f_v3 = encode_image_stub(image, stubs)
    f_w, f_s = encode_text_stub(scene.expression, stubs, max_words)
    gt = object_mask(scene.objects[scene.referred_index], scene.image_size)
    return EncodedSample(seed, f_v1, f_v2, f_v3, f_w, f_s, gt, list(scene.expression), scene)


def make_split(n: int, seed: int, stubs: EncoderStubs, max_words: int = 25) -> list[EncodedSample]:
    """Samples for scene seeds ``seed, seed + 1, ..., seed + n - 1``."""
    if n < 1:
        raise ContractError("split size must be >= 1")
    return [encode_sample(seed + i, stubs, max_words) for i in range(n)]


# ---------------------------------------------------------------- export


def write_ppm(path: str, image: np.ndarray) -> None:
    h, w, _ = image.shape
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path: str, gray: np.ndarray) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.asarray(gray, dtype=np.uint8).tobytes())


def read_netpbm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file written by this module."""
    with open(path, "rb") as fh:
        raw = fh.read()
    # header is four whitespace-separated fields followed by exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval, body = fields[0], int(fields[1]), int(fields[2]), int(fields[3]), raw[pos + 1:]
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm header")
    ch = 3 if magic == b"P6" else 1
    arr = np.frombuffer(body[: w * h * ch], dtype=np.uint8)
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


def export_split(out_dir: str, seeds, image_size: int = 32) -> None:
    """Write ``<seed>.ppm`` images, ``<seed>.pgm`` masks and a ``samples.txt`` index."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for seed in seeds:
        scene, image = generate_scene(seed, image_size)
        write_ppm(os.path.join(out_dir, f"{seed}.ppm"), image)
        mask = object_mask(scene.objects[scene.referred_index], image_size)
        write_pgm(os.path.join(out_dir, f"{seed}.pgm"), mask.astype(np.uint8) * 255)
        lines.append(f"{seed} {' '.join(scene.expression)}")
    with open(os.path.join(out_dir, "samples.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
