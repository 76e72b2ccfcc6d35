"""Synthetic 3x3 scene benchmark: grammar, rendering, and split assembly.

Scenes are 3x3 grids of colored glyphs. A query is (base scene, modification
text, target scene) where the text is one of three templated edits: add,
remove, change. Train scenes obey condition A's shape-to-color table, test
scenes condition B's (the two swap the cube and cylinder color sets), which
forces compositional generalization across the split.

Everything is deterministic in the seed: scene sampling, modification
sampling, rendering, and serialization.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
SHAPES = ("cube", "sphere", "cylinder")
SIZES = ("large", "small")

# Fixed 8-entry RGB palette (one entry per color name).
PALETTE = {
    "gray": (87, 87, 87),
    "red": (173, 35, 35),
    "blue": (42, 75, 215),
    "green": (29, 105, 20),
    "brown": (129, 74, 25),
    "purple": (129, 38, 192),
    "cyan": (41, 208, 208),
    "yellow": (255, 238, 51),
}

# Shape -> allowed colors per condition. Condition B swaps the cube and
# cylinder sets; spheres are unrestricted. Config data, not hard-coded truth:
# kept as a module constant that callers pass around explicitly.
_CUBE_SET_A = ("gray", "blue", "brown", "yellow")
_CYLINDER_SET_A = ("red", "green", "purple", "cyan")
CONDITION_TABLES = {
    "A": {"cube": _CUBE_SET_A, "cylinder": _CYLINDER_SET_A, "sphere": COLORS},
    "B": {"cube": _CYLINDER_SET_A, "cylinder": _CUBE_SET_A, "sphere": COLORS},
}

# large/small glyph extent as a fraction of the cell side
SIZE_FRACTION = {"large": 0.80, "small": 0.45}
SIZE_WORDS = {"large": "big", "small": "small"}
WORD_TO_SIZE = {"big": "large", "small": "small"}

_ROW_WORDS = ("top", "middle", "bottom")
_COL_WORDS = ("left", "center", "right")


class NoMatch(ValueError):
    """Remove/Change selector matches nothing in the scene."""


class CellOccupied(ValueError):
    """Add names a cell that already holds an object."""


class GridFull(ValueError):
    """Add on a scene with no empty cell."""


@dataclass(frozen=True)
class ObjectSpec:
    color: str
    shape: str
    size: str


@dataclass(frozen=True)
class PartialSpec:
    """ObjectSpec with any subset of attributes stated; None means unstated."""

    color: Optional[str] = None
    shape: Optional[str] = None
    size: Optional[str] = None

    def is_full(self) -> bool:
        return None not in (self.color, self.shape, self.size)


@dataclass(frozen=True)
class Position:
    row: int
    col: int

    @property
    def name(self) -> str:
        return f"{_ROW_WORDS[self.row]}-{_COL_WORDS[self.col]}"

    @classmethod
    def from_name(cls, name: str) -> "Position":
        row_word, col_word = name.split("-")
        return cls(_ROW_WORDS.index(row_word), _COL_WORDS.index(col_word))


@dataclass
class Scene:
    grid: List[List[Optional[ObjectSpec]]]
    scene_id: str

    def objects(self) -> Iterator[Tuple[Position, ObjectSpec]]:
        for r in range(3):
            for c in range(3):
                if self.grid[r][c] is not None:
                    yield Position(r, c), self.grid[r][c]

    def empty_cells(self) -> List[Position]:
        return [Position(r, c) for r in range(3) for c in range(3) if self.grid[r][c] is None]

    def content_key(self) -> tuple:
        return tuple(
            (cell.color, cell.shape, cell.size) if cell is not None else None
            for row in self.grid for cell in row)

    def copy_grid(self) -> List[List[Optional[ObjectSpec]]]:
        return [row[:] for row in self.grid]


@dataclass(frozen=True)
class Selector:
    """Attribute/position pattern; None fields are wildcards.

    The sampler only emits position-only or attributes-only selectors (every
    template phrase is one of the two), but matching honors any combination.
    """

    color: Optional[str] = None
    shape: Optional[str] = None
    size: Optional[str] = None
    position: Optional[Position] = None

    def matches(self, pos: Position, obj: ObjectSpec) -> bool:
        if self.position is not None and self.position != pos:
            return False
        if self.color is not None and obj.color != self.color:
            return False
        if self.shape is not None and obj.shape != self.shape:
            return False
        if self.size is not None and obj.size != self.size:
            return False
        return True

    def has_attributes(self) -> bool:
        return any(v is not None for v in (self.color, self.shape, self.size))


@dataclass(frozen=True)
class Modification:
    kind: str  # "add" | "remove" | "change"
    selector: Optional[Selector] = None
    add_spec: Optional[PartialSpec] = None
    add_position: Optional[Position] = None
    change_value: Optional[str] = None  # color name, or "large"/"small"


@dataclass
class QueryRecord:
    base_scene_id: str
    modification: Optional[Modification]
    text: List[str]
    target_scene_id: str

    @property
    def kind(self) -> str:
        if self.modification is not None:
            return self.modification.kind
        return {"add": "add", "remove": "remove", "make": "change"}[self.text[0]]


@dataclass
class DatasetManifest:
    split: str
    condition: str
    seed: int
    canvas_px: int
    scenes: List[Scene]
    queries: List[QueryRecord]
    scene_by_id: Dict[str, Scene] = field(init=False, repr=False)

    def __post_init__(self):
        self.scene_by_id = {s.scene_id: s for s in self.scenes}


@dataclass
class DatasetConfig:
    n_base: int
    n_queries: int
    seed: int
    canvas_px: int = 48
    test_n_base: Optional[int] = None
    test_n_queries: Optional[int] = None


def _as_rng(seed_or_rng: Union[int, random.Random]) -> random.Random:
    if isinstance(seed_or_rng, random.Random):
        return seed_or_rng
    return random.Random(seed_or_rng)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------


def generate_base_scenes(n: int, condition: str, seed: Union[int, random.Random],
                         id_prefix: str = "scene") -> List[Scene]:
    """n random scenes: 2..6 objects in distinct cells, attributes uniform
    over the condition's allowed table."""
    if n < 1:
        raise ValueError("generate_base_scenes: n must be >= 1")
    table = CONDITION_TABLES[condition]
    rng = _as_rng(seed)
    all_cells = [(r, c) for r in range(3) for c in range(3)]
    scenes = []
    for i in range(n):
        grid: List[List[Optional[ObjectSpec]]] = [[None] * 3 for _ in range(3)]
        count = rng.randint(2, 6)
        for r, c in rng.sample(all_cells, count):
            shape = rng.choice(SHAPES)
            grid[r][c] = ObjectSpec(color=rng.choice(table[shape]), shape=shape,
                                    size=rng.choice(SIZES))
        scenes.append(Scene(grid=grid, scene_id=f"{id_prefix}-{i:05d}"))
    return scenes


# ---------------------------------------------------------------------------
# modification grammar
# ---------------------------------------------------------------------------


class _Retry(Exception):
    pass


def _sample_selector(rng: random.Random, anchor_pos: Position, anchor: ObjectSpec) -> Selector:
    """Position-form or attribute-form selector built from a real object,
    each attribute kept with probability one half."""
    if rng.random() < 0.5:
        return Selector(position=anchor_pos)
    for _ in range(64):
        fields = {name: (getattr(anchor, name) if rng.random() < 0.5 else None)
                  for name in ("color", "shape", "size")}
        if any(v is not None for v in fields.values()):
            return Selector(**fields)
    return Selector(color=anchor.color)


def _sample_change(rng: random.Random, scene: Scene, condition: str) -> Modification:
    table = CONDITION_TABLES[condition]
    objects = list(scene.objects())
    anchor_pos, anchor = rng.choice(objects)
    selector = _sample_selector(rng, anchor_pos, anchor)
    matched = [obj for pos, obj in objects if selector.matches(pos, obj)]
    attribute = rng.choice(("color", "size"))
    if attribute == "size":
        candidates = [s for s in SIZES if any(o.size != s for o in matched)]
    else:
        allowed = set(COLORS)
        for obj in matched:
            allowed &= set(table[obj.shape])
        candidates = [c for c in COLORS if c in allowed and any(o.color != c for o in matched)]
    if not candidates:
        raise _Retry
    return Modification(kind="change", selector=selector, change_value=rng.choice(candidates))


def sample_modification(scene: Scene, seed: Union[int, random.Random],
                        condition: str = "A") -> Modification:
    """One random viable modification; kind uniform over the viable kinds.

    Add payloads come back partial (each attribute and the position stated
    with probability one half); resolve_modification pins the unstated
    parts before the dataset records the query.
    """
    rng = _as_rng(seed)
    table = CONDITION_TABLES[condition]
    has_object = any(True for _ in scene.objects())
    has_space = bool(scene.empty_cells())
    viable = ([] if not has_space else ["add"]) + ([] if not has_object else ["remove", "change"])
    if not viable:
        raise ValueError("scene cannot be both full and empty")
    for _ in range(256):
        kind = rng.choice(viable)
        try:
            if kind == "add":
                cell = rng.choice(scene.empty_cells())
                shape = rng.choice(SHAPES)
                color = rng.choice(table[shape])
                size = rng.choice(SIZES)
                keep = {name: rng.random() < 0.5 for name in ("color", "shape", "size")}
                spec = PartialSpec(color=color if keep["color"] else None,
                                   shape=shape if keep["shape"] else None,
                                   size=size if keep["size"] else None)
                position = cell if rng.random() < 0.5 else None
                return Modification(kind="add", add_spec=spec, add_position=position)
            if kind == "remove":
                anchor_pos, anchor = rng.choice(list(scene.objects()))
                return Modification(kind="remove",
                                    selector=_sample_selector(rng, anchor_pos, anchor))
            return _sample_change(rng, scene, condition)
        except _Retry:
            continue
    raise RuntimeError("sample_modification: no viable modification found")


def resolve_modification(scene: Scene, mod: Modification, rng: Union[int, random.Random],
                         condition: str = "A") -> Modification:
    """Fill a partial Add's unstated attributes/position so apply is
    deterministic; Remove/Change are already fully specified."""
    if mod.kind != "add":
        return mod
    rng = _as_rng(rng)
    table = CONDITION_TABLES[condition]
    spec, position = mod.add_spec, mod.add_position
    if position is None:
        empty = scene.empty_cells()
        if not empty:
            raise GridFull(f"no empty cell in scene {scene.scene_id}")
        position = rng.choice(empty)
    shape = spec.shape
    if shape is None:
        options = [s for s in SHAPES if spec.color is None or spec.color in table[s]]
        shape = rng.choice(options)
    color = spec.color if spec.color is not None else rng.choice(table[shape])
    size = spec.size if spec.size is not None else rng.choice(SIZES)
    return Modification(kind="add", add_spec=PartialSpec(color, shape, size),
                        add_position=position)


def apply_modification(scene: Scene, mod: Modification,
                       rng: Optional[Union[int, random.Random]] = None,
                       condition: str = "A") -> Scene:
    """Apply one modification, returning a new Scene (input untouched).

    A partial Add is resolved on the fly, which needs an rng; recorded
    queries always carry resolved modifications, so their replay is exact.
    """
    if mod.kind == "add":
        if not (mod.add_spec.is_full() and mod.add_position is not None):
            if rng is None:
                raise ValueError("apply_modification: partial add needs an rng to resolve")
            mod = resolve_modification(scene, mod, rng, condition)
        r, c = mod.add_position.row, mod.add_position.col
        if scene.grid[r][c] is not None:
            raise CellOccupied(f"cell {mod.add_position.name} is occupied")
        grid = scene.copy_grid()
        spec = mod.add_spec
        grid[r][c] = ObjectSpec(color=spec.color, shape=spec.shape, size=spec.size)
        return Scene(grid=grid, scene_id="")
    matches = [(pos, obj) for pos, obj in scene.objects() if mod.selector.matches(pos, obj)]
    if not matches:
        raise NoMatch(f"selector {mod.selector} matches nothing in scene {scene.scene_id}")
    grid = scene.copy_grid()
    if mod.kind == "remove":
        for pos, _ in matches:
            grid[pos.row][pos.col] = None
    elif mod.kind == "change":
        for pos, obj in matches:
            if mod.change_value in SIZES:
                grid[pos.row][pos.col] = ObjectSpec(obj.color, obj.shape, mod.change_value)
            else:
                grid[pos.row][pos.col] = ObjectSpec(mod.change_value, obj.shape, obj.size)
    else:
        raise ValueError(f"unknown modification kind {mod.kind!r}")
    return Scene(grid=grid, scene_id="")


def _spec_phrase(spec: PartialSpec) -> List[str]:
    words = []
    if spec.size is not None:
        words.append(SIZE_WORDS[spec.size])
    if spec.color is not None:
        words.append(spec.color)
    words.append(spec.shape if spec.shape is not None else "object")
    return words


def _selector_phrase(sel: Selector) -> List[str]:
    if sel.position is not None:
        return [sel.position.name, "object"]
    return _spec_phrase(PartialSpec(color=sel.color, shape=sel.shape, size=sel.size))


def modification_to_text(mod: Modification) -> List[str]:
    """Deterministic template rendering; only stated parts appear."""
    if mod.kind == "add":
        tokens = ["add"] + _spec_phrase(mod.add_spec)
        if mod.add_position is not None:
            tokens += ["to", mod.add_position.name]
        return tokens
    if mod.kind == "remove":
        return ["remove"] + _selector_phrase(mod.selector)
    if mod.kind == "change":
        value_word = SIZE_WORDS[mod.change_value] if mod.change_value in SIZES else mod.change_value
        return ["make"] + _selector_phrase(mod.selector) + [value_word]
    raise ValueError(f"unknown modification kind {mod.kind!r}")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


# mean channel intensity of rendered scenes on the [0,1] scale; the white
# background dominates, so the value sits just under 1. Encoders subtract it
# as the default input centering.
PIXEL_MEAN = 0.92


def render_2d(scene: Scene, canvas_px: int, palette: Dict[str, tuple] = PALETTE) -> np.ndarray:
    """White canvas, one filled glyph per object, centered in its cell.

    cube -> axis-aligned square, sphere -> disc, cylinder -> upward triangle.
    Large glyphs span 80% of the cell side, small 45%. A pixel is painted iff
    its center lies inside the glyph; no anti-aliasing, so rasters are
    byte-reproducible.
    """
    if canvas_px % 3 != 0:
        raise ValueError(f"canvas_px must be divisible by 3, got {canvas_px}")
    cell = canvas_px // 3
    img = np.full((canvas_px, canvas_px, 3), 255, dtype=np.uint8)
    ys = np.arange(canvas_px) + 0.5
    xs = np.arange(canvas_px) + 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    for pos, obj in scene.objects():
        cy = pos.row * cell + cell / 2.0
        cx = pos.col * cell + cell / 2.0
        side = cell * SIZE_FRACTION[obj.size]
        half = side / 2.0
        if obj.shape == "cube":
            mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
        elif obj.shape == "sphere":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
        else:  # cylinder: upward triangle, apex at the top
            ytop, ybot = cy - half, cy + half
            frac = (yy - ytop) / side
            mask = (yy >= ytop) & (yy <= ybot) & (np.abs(xx - cx) <= frac * half)
        img[mask] = palette[obj.color]
    return img


def write_ppm(img: np.ndarray, path: Union[str, Path]) -> None:
    """Binary PPM (P6), 8-bit RGB."""
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"write_ppm: need HxWx3 uint8, got {img.dtype} {img.shape}")
    h, w, _ = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    fields: List[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


def _build_split(split: str, condition: str, n_base: int, n_queries: int,
                 master_seed: int, canvas_px: int) -> DatasetManifest:
    rng = random.Random(f"{master_seed}:{split}")
    bases = generate_base_scenes(n_base, condition, rng, id_prefix=f"{split}-b")
    scenes = list(bases)
    queries: List[QueryRecord] = []
    seen_pairs = set()
    attempts = 0
    max_attempts = 50 * n_queries + 1000
    while len(queries) < n_queries:
        attempts += 1
        if attempts > max_attempts:
            raise ValueError(
                f"{split}: could not assemble {n_queries} distinct queries from {n_base} bases")
        base = rng.choice(bases)
        partial = sample_modification(base, rng, condition)
        text = modification_to_text(partial)
        pair = (base.scene_id, " ".join(text))
        if pair in seen_pairs:
            continue
        resolved = resolve_modification(base, partial, rng, condition)
        applied = apply_modification(base, resolved, condition=condition)
        # each query gets its own target image; split size is therefore
        # exactly n_base + n_queries
        target_id = f"{split}-t{len(queries):05d}"
        scenes.append(Scene(grid=applied.grid, scene_id=target_id))
        seen_pairs.add(pair)
        queries.append(QueryRecord(base_scene_id=base.scene_id, modification=resolved,
                                   text=text, target_scene_id=target_id))
    return DatasetManifest(split=split, condition=condition, seed=master_seed,
                           canvas_px=canvas_px, scenes=scenes, queries=queries)


def build_dataset(config: DatasetConfig) -> Tuple[DatasetManifest, DatasetManifest]:
    """(train, test): condition-A train split and an independent condition-B
    test split whose images (bases and targets alike) form the retrieval
    database."""
    if config.n_base < 1:
        raise ValueError("n_base must be >= 1")
    if config.n_queries < config.n_base:
        raise ValueError("n_queries must be >= n_base")
    if config.canvas_px % 3 != 0 or config.canvas_px < 9:
        raise ValueError(f"canvas_px must be a multiple of 3 and >= 9, got {config.canvas_px}")
    test_n_base = config.test_n_base if config.test_n_base is not None else config.n_base
    test_n_queries = (config.test_n_queries if config.test_n_queries is not None
                      else config.n_queries)
    if test_n_base < 1 or test_n_queries < test_n_base:
        raise ValueError("test split counts invalid")
    train = _build_split("train", "A", config.n_base, config.n_queries,
                         config.seed, config.canvas_px)
    test = _build_split("test", "B", test_n_base, test_n_queries,
                        config.seed, config.canvas_px)
    return train, test


def manifest_to_json(manifest: DatasetManifest) -> str:
    """Fixed key order: condition, seed, scenes, queries; grid cells {c,s,z}."""
    doc = {
        "condition": manifest.condition,
        "seed": manifest.seed,
        "scenes": [
            {"id": s.scene_id,
             "grid": [[None if cell is None else {"c": cell.color, "s": cell.shape, "z": cell.size}
                       for cell in row] for row in s.grid]}
            for s in manifest.scenes
        ],
        "queries": [
            {"base": q.base_scene_id, "text": " ".join(q.text), "target": q.target_scene_id}
            for q in manifest.queries
        ],
    }
    return json.dumps(doc, separators=(",", ":")) + "\n"


def load_manifest(path: Union[str, Path], split: Optional[str] = None,
                  canvas_px: int = 48) -> DatasetManifest:
    """Read a manifest file back; loaded queries carry text but no
    symbolic modification (kind is recovered from the first token)."""
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    scenes = []
    for entry in doc["scenes"]:
        grid = [[None if cell is None
                 else ObjectSpec(color=cell["c"], shape=cell["s"], size=cell["z"])
                 for cell in row] for row in entry["grid"]]
        scenes.append(Scene(grid=grid, scene_id=entry["id"]))
    queries = [QueryRecord(base_scene_id=q["base"], modification=None,
                           text=q["text"].split(" "), target_scene_id=q["target"])
               for q in doc["queries"]]
    return DatasetManifest(split=split or path.stem, condition=doc["condition"],
                           seed=doc["seed"], canvas_px=canvas_px,
                           scenes=scenes, queries=queries)


def write_dataset(train: DatasetManifest, test: DatasetManifest,
                  out_dir: Union[str, Path]) -> Dict[str, int]:
    """Write train.json/test.json plus one PPM per scene under images/<split>/."""
    out = Path(out_dir)
    counts = {}
    for manifest in (train, test):
        (out / "images" / manifest.split).mkdir(parents=True, exist_ok=True)
        (out / f"{manifest.split}.json").write_text(manifest_to_json(manifest),
                                                    encoding="utf-8")
        for scene in manifest.scenes:
            img = render_2d(scene, manifest.canvas_px)
            write_ppm(img, out / "images" / manifest.split / f"{scene.scene_id}.ppm")
        counts[f"{manifest.split}_scenes"] = len(manifest.scenes)
        counts[f"{manifest.split}_queries"] = len(manifest.queries)
    return counts
