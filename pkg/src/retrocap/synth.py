"""Synthetic scenes that make the retrieval-augmentation claims testable.

Each scene places a few colored shapes on a 3x3 grid. Object feature vectors
encode (shape, color) one-hots plus noise and deliberately omit grid cells,
so spatial relations between objects are unrecoverable from them. Every
scene marks one object as salient; that mark is scene-level information
carried only by the full-image payload, never by object features or the
description database.

The gold caption renders exactly one relation: salient object -> its nearest
other object, with the predicate derived from the two cells. Recovering it
therefore needs (a) relations, available through retrieved descriptions, and
(b) the scene-level salience mark, available through the global image
feature. The two training signals are complementary by construction, which
is what the four-way text/conditioning ablation measures.

The scene embedder maps a crop region to the normalized sum of the mock text
embeddings of the facts visible in it (relations whose endpoints both lie in
covered cells; attribute facts when fewer than two objects are covered; the
salience fact only with full coverage). Database keys are embedded with the
same text convention, so cross-modal retrieval is learnable but not trivial.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from retrocap import rng
from retrocap.crops import Region
from retrocap.descdb import (
    CanonLexicon,
    DescriptionDb,
    RawAttribute,
    RawRelationship,
    build_database,
)
from retrocap.embed import EmbeddingStore, mock_embed, normalize
from retrocap.errors import DataError

COLORS = ("blue", "green", "red", "yellow")
SHAPES = ("circle", "square", "star", "triangle")
PREDICATES = ("left_of", "right_of", "above", "below")

GRID = 3
WIDTH = 96
HEIGHT = 96
OBJECTS_PER_SCENE = 3
CELL_COVER_FRACTION = 0.5
SALIENT_WEIGHT = 1.0
STRING_WEIGHT = 2.0


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class Scene:
    index: int
    objects: list[SceneObject]   # canonical (color, shape) order
    salient: int                 # index into objects
    seed: int

    def relations(self) -> list[tuple[int, str, int]]:
        """All ordered pairs with their cell-derived predicate."""
        out = []
        for i, a in enumerate(self.objects):
            for j, b in enumerate(self.objects):
                if i != j:
                    out.append((i, predicate_for(a.cell, b.cell), j))
        return out

    def gold_relation(self) -> tuple[int, str, int]:
        s = self.salient
        others = [
            (cell_distance_sq(self.objects[s].cell, self.objects[j].cell), j)
            for j in range(len(self.objects)) if j != s
        ]
        _, target = min(others)
        return s, predicate_for(self.objects[s].cell, self.objects[target].cell), target

    def gold_caption(self) -> list[str]:
        s, pred, t = self.gold_relation()
        subj, obj = self.objects[s], self.objects[t]
        return [subj.color, subj.shape, pred, obj.color, obj.shape]

    def payload(self) -> bytes:
        doc = {
            "width": WIDTH,
            "height": HEIGHT,
            "grid": GRID,
            "objects": [
                {"color": o.color, "shape": o.shape, "cell": list(o.cell)}
                for o in self.objects
            ],
            "salient": self.salient,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "objects": [
                {"color": o.color, "shape": o.shape, "cell": list(o.cell)}
                for o in self.objects
            ],
            "salient": self.salient,
            "seed": self.seed,
            "caption": self.gold_caption(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Scene":
        return cls(
            index=obj["index"],
            objects=[
                SceneObject(o["shape"], o["color"], tuple(o["cell"]))
                for o in obj["objects"]
            ],
            salient=obj["salient"],
            seed=obj["seed"],
        )


def predicate_for(cell_a: tuple[int, int], cell_b: tuple[int, int]) -> str:
    """Predicate of 'a <pred> b'; horizontal wins diagonal ties."""
    dr = cell_b[0] - cell_a[0]
    dc = cell_b[1] - cell_a[1]
    if dr == 0 and dc == 0:
        raise DataError("objects share a cell")
    if abs(dc) >= abs(dr) and dc != 0:
        return "left_of" if dc > 0 else "right_of"
    return "above" if dr > 0 else "below"


def cell_distance_sq(a: tuple[int, int], b: tuple[int, int]) -> int:
    return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2


def salient_fact(obj: SceneObject) -> str:
    return f"salient {obj.name}"


def feature_dims() -> int:
    return len(SHAPES) + len(COLORS)


def object_features(scene: Scene, d_o: int, dataset_seed: int,
                    noise_scale: float = 0.1) -> np.ndarray:
    """one-hot(shape) + one-hot(color) + seeded noise; no cell information."""
    base = feature_dims()
    if d_o < base:
        raise DataError(f"d_o={d_o} too small for {base} one-hot dims")
    out = np.zeros((len(scene.objects), d_o))
    for slot, obj in enumerate(scene.objects):
        out[slot, SHAPES.index(obj.shape)] = 1.0
        out[slot, len(SHAPES) + COLORS.index(obj.color)] = 1.0
        if d_o > base:
            state = rng.hash_stream_state(
                f"feat:{scene.index}:{slot}".encode(), dataset_seed
            )
            out[slot, base:] = noise_scale * rng.normals(state, d_o - base)
    return out


class SceneEmbedder:
    """Embedder that understands synthetic scene payloads.

    Region embeddings aggregate the mock text embeddings of the facts whose
    content is inside the region; text embeddings use the identical
    convention, which is what makes description keys retrievable.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._text_cache: dict[str, np.ndarray] = {}

    def embed_text(self, text: str) -> np.ndarray:
        """Compositional encoding: per-word hash embeddings plus a whole-string
        component, summed and normalized.

        The word components make the text space decodable from a small
        corpus (facts sharing words are close); the whole-string component
        keeps distinct facts separable so retrieval stays sharp.
        """
        vec = self._text_cache.get(text)
        if vec is None:
            total = STRING_WEIGHT * mock_embed(
                b"txt:" + text.encode("utf-8"), self.dim, self.seed
            ).astype(np.float64)
            for word in text.split():
                total += mock_embed(
                    b"txt:" + word.encode("utf-8"), self.dim, self.seed
                ).astype(np.float64)
            vec = normalize(total)
            self._text_cache[text] = vec
        return vec

    def embed_region(self, payload: bytes, region: Region) -> np.ndarray:
        try:
            doc = json.loads(payload)
            objects = [
                SceneObject(o["shape"], o["color"], tuple(o["cell"]))
                for o in doc["objects"]
            ]
            width, height, grid = doc["width"], doc["height"], doc["grid"]
            salient = doc["salient"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"not a scene payload: {e}") from e
        covered = covered_cells(region, width, height, grid)
        facts = region_facts(objects, salient, covered, grid)
        if not facts:
            tag = f"crop:{region.x},{region.y},{region.w},{region.h}:".encode()
            return mock_embed(tag + payload, self.dim, self.seed)
        total = np.zeros(self.dim)
        for text, weight in facts:
            total += weight * self.embed_text(text).astype(np.float64)
        return normalize(total)


def covered_cells(region: Region, width: int, height: int, grid: int) -> set:
    """Cells with at least CELL_COVER_FRACTION of their area inside region."""
    cw, ch = width / grid, height / grid
    out = set()
    for r in range(grid):
        for c in range(grid):
            x0, x1 = c * cw, (c + 1) * cw
            y0, y1 = r * ch, (r + 1) * ch
            ox = max(0.0, min(x1, region.x + region.w) - max(x0, region.x))
            oy = max(0.0, min(y1, region.y + region.h) - max(y0, region.y))
            if ox * oy >= CELL_COVER_FRACTION * cw * ch:
                out.add((r, c))
    return out


def region_facts(objects: list[SceneObject], salient: int, covered: set,
                 grid: int) -> list[tuple[str, float]]:
    inside = [i for i, o in enumerate(objects) if o.cell in covered]
    facts: list[tuple[str, float]] = []
    if len(inside) >= 2:
        for i in inside:
            for j in inside:
                if i != j:
                    pred = predicate_for(objects[i].cell, objects[j].cell)
                    facts.append(
                        (f"{objects[i].name} {pred} {objects[j].name}", 1.0)
                    )
    else:
        facts.extend((objects[i].name, 1.0) for i in inside)
    if len(covered) == grid * grid:
        facts.append((salient_fact(objects[salient]), SALIENT_WEIGHT))
    return facts


@dataclass
class SynthDataset:
    seed: int
    scenes: list[Scene]
    db: DescriptionDb
    store: EmbeddingStore
    dim: int

    def gold_captions(self) -> list[list[str]]:
        return [s.gold_caption() for s in self.scenes]


def scene_annotations(scene: Scene):
    """Raw annotation records for the description database."""
    attrs = [
        RawAttribute(
            object_name=obj.shape,
            attributes=(obj.color,),
            source_image_id=scene.index,
            source_region_id=slot,
        )
        for slot, obj in enumerate(scene.objects)
    ]
    rels = [
        RawRelationship(
            subject_name=scene.objects[i].name,
            predicate=pred,
            object_name=scene.objects[j].name,
            source_image_id=scene.index,
        )
        for i, pred, j in scene.relations()
    ]
    return attrs, rels


def generate_dataset(n_scenes: int, seed: int, dim: int = 64) -> SynthDataset:
    """Deterministic dataset: scenes, description database, embedded keys."""
    if n_scenes < 1:
        raise DataError("n_scenes must be >= 1")
    g = np.random.default_rng(seed)
    n_types = len(COLORS) * len(SHAPES)
    scenes = []
    for idx in range(n_scenes):
        types = g.choice(n_types, size=OBJECTS_PER_SCENE, replace=False)
        cells = g.choice(GRID * GRID, size=OBJECTS_PER_SCENE, replace=False)
        objects = sorted(
            (
                SceneObject(
                    shape=SHAPES[t % len(SHAPES)],
                    color=COLORS[t // len(SHAPES)],
                    cell=(int(c) // GRID, int(c) % GRID),
                )
                for t, c in zip(types, cells)
            ),
            key=lambda o: o.name,
        )
        salient = int(g.integers(OBJECTS_PER_SCENE))
        scenes.append(Scene(index=idx, objects=objects, salient=salient, seed=seed))

    all_attrs, all_rels = [], []
    for scene in scenes:
        attrs, rels = scene_annotations(scene)
        all_attrs.extend(attrs)
        all_rels.extend(rels)
    db = build_database(all_attrs, all_rels, CanonLexicon.empty())

    embedder = SceneEmbedder(dim=dim, seed=seed)
    vectors = np.stack([embedder.embed_text(d.text) for d in db.descriptions])
    store = EmbeddingStore(
        dim=dim,
        ids=np.array([d.id for d in db.descriptions], dtype=np.uint64),
        vectors=vectors,
    )
    return SynthDataset(seed=seed, scenes=scenes, db=db, store=store, dim=dim)


def vocabulary_words() -> list[str]:
    """The closed lexical space of gold captions, in stable order."""
    return sorted(COLORS) + sorted(SHAPES) + list(PREDICATES)
