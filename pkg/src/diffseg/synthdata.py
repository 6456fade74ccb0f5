"""Synthetic house scenes with built-in mask priors, plus PGM/PPM I/O.

Scenes are painted back to front.  Root objects (classes that require
nothing) are placed on non-overlapping footprints; dependent classes are
attached on top of an instance of the class they require, so a rule
``(a, b)`` guarantees every ``a`` component touches a ``b`` component.
All shapes are solid and axis-aligned (rectangles, L-polygons) or round
(discs), so label components never have holes.

Label maps are 8-bit binary PGM (P5, pixel value = class id); images are
binary PPM (P6).  A dataset manifest lists one sample per line as
``image_path<TAB>label_path`` relative to the manifest's directory.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import STREAM_DATA, stream

SHAPES = ("rect", "circle", "lpoly")
SPLITS = {"train": 0, "eval": 1}


class PlacementError(RuntimeError):
    """A required parent class can never be placed under the scene spec."""


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    class_names: tuple[str, ...] = ("background", "house", "roof", "chimney")
    object_count: tuple[int, int] = (1, 3)
    # class -> allowed shape kinds
    class_shapes: dict = field(default_factory=lambda: {1: ("rect", "lpoly"), 2: ("rect",), 3: ("rect",)})
    # class -> ((min_h, max_h), (min_w, max_w)); dependents use the parent's top edge for width
    class_sizes: dict = field(default_factory=lambda: {1: ((12, 24), (16, 28)), 2: ((4, 8), (0, 0)), 3: ((12, 16), (4, 8))})
    # (a, b): class a only appears attached to class b
    requires: tuple[tuple[int, int], ...] = ((2, 1), (3, 1))
    attach_prob: dict = field(default_factory=lambda: {2: 0.85, 3: 0.6})
    occlusion_order: tuple[int, ...] = (1, 2, 3)
    colors: dict = field(
        default_factory=lambda: {
            0: (0.55, 0.75, 0.90),
            1: (0.80, 0.62, 0.42),
            2: (0.62, 0.18, 0.12),
            3: (0.35, 0.32, 0.32),
        }
    )
    color_jitter: float = 0.06
    noise_level: float = 0.08
    # sizes and positions are multiples of this many pixels
    grid: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes (0 is background)")
        if self.height < 1 or self.width < 1:
            raise ValueError("scene must be at least 1x1")
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        for a, b in self.requires:
            if not (0 < a < self.num_classes and 0 < b < self.num_classes):
                raise ValueError(f"rule ({a}, {b}) references a missing class")
        self.dependency_order()

    @property
    def dependents(self) -> set[int]:
        return {a for a, _ in self.requires}

    @property
    def roots(self) -> list[int]:
        return [c for c in sorted(self.class_shapes) if c not in self.dependents]

    def dependency_order(self) -> list[tuple[int, int]]:
        """Rules sorted so parents are placed before their dependents; rejects cycles."""
        graph = {a: [b for x, b in self.requires if x == a] for a, _ in self.requires}
        state: dict[int, int] = {}
        order: list[int] = []

        def visit(node: int) -> None:
            if state.get(node) == 1:
                raise ValueError(f"co-occurrence rules contain a cycle through class {node}")
            if state.get(node) == 2:
                return
            state[node] = 1
            for parent in graph.get(node, []):
                visit(parent)
            state[node] = 2
            order.append(node)

        for node in sorted(graph):
            visit(node)
        rank = {c: i for i, c in enumerate(order)}
        return sorted(self.requires, key=lambda r: (rank[r[0]], r))


def default_scene_spec() -> SceneSpec:
    return SceneSpec()


@dataclass
class SamplePair:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    labels: np.ndarray  # (H, W) int


def _snap(lo: int, hi: int, g: int, rng: np.random.Generator) -> int:
    """Uniform multiple of ``g`` in ``[lo, hi]`` (``g`` itself if the range holds none)."""
    a, b = -(-lo // g), hi // g
    return g * int(rng.integers(a, b + 1)) if b >= a else max(g, g * b)


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator, g: int = 1) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        m[:] = True
    elif kind == "circle":
        d = min(h, w)
        yy, xx = np.mgrid[0:h, 0:w]
        r = d / 2.0
        m = (yy + 0.5 - h / 2.0) ** 2 + (xx + 0.5 - w / 2.0) ** 2 <= r * r
    elif kind == "lpoly":
        m[:] = True
        nh = _snap(max(1, h // 3), max(1, h // 2), g, rng)
        nw = _snap(max(1, w // 3), max(1, w // 2), g, rng)
        if rng.random() < 0.5:
            m[:nh, w - nw :] = False
        else:
            m[:nh, :nw] = False
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return m


def _top_extent(mask: np.ndarray) -> tuple[int, int, int]:
    """(row, first col, last col) of the topmost occupied row."""
    rows = np.flatnonzero(mask.any(axis=1))
    r = int(rows[0])
    cols = np.flatnonzero(mask[r])
    return r, int(cols[0]), int(cols[-1])


def _check_placeable(spec: SceneSpec) -> None:
    placeable = set()
    for c in spec.roots:
        (hmin, _), (wmin, _) = spec.class_sizes[c]
        if hmin <= spec.height and wmin <= spec.width:
            placeable.add(c)
    for a, b in spec.dependency_order():
        if b in placeable:
            placeable.add(a)
    for a, b in spec.requires:
        if b not in placeable:
            raise PlacementError(f"class {a} requires class {b}, which can never be placed")


def gen_scene(spec: SceneSpec, rng: np.random.Generator) -> SamplePair:
    """Paint one scene; deterministic given the generator state."""
    _check_placeable(spec)
    H, W = spec.height, spec.width
    labels = np.zeros((H, W), dtype=np.int64)
    image = np.empty((H, W, 3))
    bg = np.clip(np.asarray(spec.colors[0]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
    image[:] = bg
    # vertical shading as a mild texture cue
    image *= (1.0 + 0.1 * np.linspace(-1, 1, H))[:, None, None]

    g = spec.grid
    headroom = max((spec.class_sizes[a][0][1] for a in spec.dependents), default=0)
    lo, hi = spec.object_count
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    boxes: list[tuple[int, int, int, int]] = []
    # each group: list of (class, mask(H, W)) in paint order
    groups: list[list[tuple[int, np.ndarray]]] = []
    for _ in range(n):
        if not spec.roots:
            break
        for _attempt in range(30):
            c = int(rng.choice(spec.roots))
            (hmin, hmax), (wmin, wmax) = spec.class_sizes[c]
            h = _snap(hmin, min(hmax, H), g, rng)
            w = _snap(wmin, min(wmax, W), g, rng)
            top_min = min(headroom, H - h)
            r0 = _snap(top_min, H - h, g, rng)
            c0 = _snap(0, W - w, g, rng)
            box = (max(0, r0 - headroom), c0, r0 + h, c0 + w)
            if all(box[2] + 2 <= b[0] or b[2] + 2 <= box[0] or box[3] + 2 <= b[1] or b[3] + 2 <= box[1] for b in boxes):
                break
        else:
            continue
        boxes.append(box)
        kind = str(rng.choice(spec.class_shapes[c]))
        full = np.zeros((H, W), dtype=bool)
        full[r0 : r0 + h, c0 : c0 + w] = _shape_mask(kind, h, w, rng, g)
        group = [(c, full)]
        for a, b in spec.dependency_order():
            for parent_cls, parent_mask in list(group):
                if parent_cls != b or rng.random() >= spec.attach_prob.get(a, 1.0):
                    continue
                top, left, right = _top_extent(parent_mask)
                (hmin, hmax), (wmin, wmax) = spec.class_sizes[a]
                ch = _snap(hmin, hmax, g, rng)
                extent = right - left + 1
                if wmax <= 0:
                    cw, cl = extent, left
                else:
                    cw = min(_snap(wmin, wmax, g, rng), extent)
                    cl = left + _snap(0, extent - cw, g, rng)
                kind_a = str(rng.choice(spec.class_shapes.get(a, ("rect",))))
                rtop = top - ch
                child = np.zeros((H, W), dtype=bool)
                shape = _shape_mask(kind_a, ch, cw, rng, g)
                if rtop < 0:
                    shape = shape[-rtop:]
                    rtop = 0
                if shape.shape[0] == 0:
                    continue
                child[rtop:top, cl : cl + cw] = shape
                group.append((a, child))
        groups.append(group)

    paint_rank = {c: i for i, c in enumerate(spec.occlusion_order)}
    for group in groups:
        for c, mask in sorted(group, key=lambda cm: paint_rank.get(cm[0], len(paint_rank))):
            labels[mask] = c
            color = np.clip(np.asarray(spec.colors[c]) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
            image[mask] = color
    image += rng.normal(0.0, spec.noise_level, image.shape)
    return SamplePair(np.clip(image, 0.0, 1.0), labels)


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, flip: bool = True, scale_range=(0.8, 1.2)):
    """Random horizontal flip and nearest-neighbour scale jitter (centre crop/pad back to size)."""
    if flip and rng.random() < 0.5:
        image, labels = image[:, ::-1], labels[:, ::-1]
    H, W = labels.shape
    s = float(rng.uniform(*scale_range))
    nh, nw = max(1, int(round(H * s))), max(1, int(round(W * s)))
    ri = np.minimum((np.arange(nh) / s).astype(int), H - 1)
    ci = np.minimum((np.arange(nw) / s).astype(int), W - 1)
    img_s, lab_s = image[ri][:, ci], labels[ri][:, ci]
    out_img = np.empty_like(image)
    out_img[:] = image.mean(axis=(0, 1))
    out_lab = np.zeros_like(labels)
    # centre alignment between the scaled grid and the output grid
    oy, ox = (nh - H) // 2, (nw - W) // 2
    sy0, dy0 = max(oy, 0), max(-oy, 0)
    sx0, dx0 = max(ox, 0), max(-ox, 0)
    hh, ww = min(nh - sy0, H - dy0), min(nw - sx0, W - dx0)
    out_img[dy0 : dy0 + hh, dx0 : dx0 + ww] = img_s[sy0 : sy0 + hh, sx0 : sx0 + ww]
    out_lab[dy0 : dy0 + hh, dx0 : dx0 + ww] = lab_s[sy0 : sy0 + hh, sx0 : sx0 + ww]
    return out_img, out_lab


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _write_pnm(path, magic: bytes, data: np.ndarray) -> None:
    h, w = data.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(data, dtype=np.uint8).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise LabelFormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != magic:
        raise LabelFormatError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise LabelFormatError(f"{path}: unsupported bit depth (maxval {maxval})")
    n = w * h * channels
    body = data[pos : pos + n]
    if len(body) != n:
        raise LabelFormatError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def save_labels(labels: np.ndarray, path, num_classes: int | None = None) -> None:
    """Write an 8-bit PGM; class ids and the MASK id (``num_classes``) must fit in a byte."""
    labels = np.asarray(labels)
    if num_classes is not None and num_classes > 255:
        raise LabelFormatError(f"{num_classes} classes do not fit an 8-bit label file")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise LabelFormatError("class ids must lie in [0, 255]")
    _write_pnm(path, b"P5", labels.astype(np.uint8))


def load_labels(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1).astype(np.int64)


def save_image(image: np.ndarray, path) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise LabelFormatError(f"image must be (H, W, 3), got {image.shape}")
    _write_pnm(path, b"P6", np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8))


def load_image(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_for(spec: SceneSpec, seed: int, split: str, index: int) -> SamplePair:
    return gen_scene(spec, stream(seed, STREAM_DATA, SPLITS[split], index))


def write_dataset(spec: SceneSpec, out_dir, seed: int, n_train: int, n_eval: int, workers: int = 1) -> dict[str, Path]:
    """Generate both splits under ``out_dir``; returns the manifest paths."""
    out_dir = Path(out_dir)
    manifests = {}
    for split, count in (("train", n_train), ("eval", n_eval)):
        (out_dir / split / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / split / "labels").mkdir(parents=True, exist_ok=True)

        def one(i: int, split=split) -> str:
            pair = sample_for(spec, seed, split, i)
            img_rel = f"{split}/images/{i:05d}.ppm"
            lab_rel = f"{split}/labels/{i:05d}.pgm"
            save_image(pair.image, out_dir / img_rel)
            save_labels(pair.labels, out_dir / lab_rel, spec.num_classes)
            return f"{img_rel}\t{lab_rel}\n"

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                lines = list(pool.map(one, range(count)))
        else:
            lines = [one(i) for i in range(count)]
        manifest = out_dir / f"{split}.txt"
        manifest.write_text("".join(lines), encoding="utf-8")
        manifests[split] = manifest
    return manifests


def read_manifest(path) -> list[tuple[Path, Path, str]]:
    """``(image_path, label_path, label_key)`` per line; the key is the label path as written."""
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        img, lab = line.split("\t")
        out.append((path.parent / img, path.parent / lab, lab))
    return out
