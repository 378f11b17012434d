"""Synthetic grid-world scenes, their feature maps, and the symbolic
set-based executor that serves as the ground-truth answer oracle.

A scene is a G x G grid with at most one attributed object per cell.
Feature maps are one-hot attribute blocks plus normalized row/col
position channels, so ground truth stays exactly computable while the
network still sees a spatial-map-times-text-vector problem.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import SIGNATURES, ModuleToken, validate

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "gray", "yellow")
SIZES = ("small", "large")

ATTRIBUTES = {"shape": SHAPES, "color": COLORS, "size": SIZES}
RELATIONS = ("left_of", "right_of", "above", "below")

MAX_COUNT = 9

# Closed answer vocabulary, fixed order.
ANSWERS = (("yes", "no")
           + tuple(str(n) for n in range(MAX_COUNT + 1))
           + COLORS + SHAPES + SIZES)
ANSWER_INDEX = {a: i for i, a in enumerate(ANSWERS)}

# feature layout: [shape one-hot | color one-hot | size one-hot | row | col]
FEATURE_DIM = len(SHAPES) + len(COLORS) + len(SIZES) + 2
_SHAPE_OFF = 0
_COLOR_OFF = len(SHAPES)
_SIZE_OFF = len(SHAPES) + len(COLORS)
_POS_OFF = len(SHAPES) + len(COLORS) + len(SIZES)


class SceneError(ValueError):
    pass


class BindingError(ValueError):
    """A layout token lacks, or has an unusable, symbolic binding."""


class AmbiguityError(ValueError):
    """describe/compare applied to a non-singleton object set."""


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str
    size: str

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)


@dataclass(frozen=True)
class SceneGraph:
    grid_size: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        g = self.grid_size
        if g < 1:
            raise SceneError(f"grid_size must be positive, got {g}")
        if not self.objects:
            raise SceneError("scene needs at least one object")
        cells = set()
        for obj in self.objects:
            if not (0 <= obj.row < g and 0 <= obj.col < g):
                raise SceneError(f"object cell {obj.cell} outside grid {g}x{g}")
            if obj.cell in cells:
                raise SceneError(f"two objects share cell {obj.cell}")
            cells.add(obj.cell)
        # canonical row-major object order so scene equality is positional
        object.__setattr__(self, "objects",
                           tuple(sorted(self.objects, key=lambda o: o.cell)))

    def at(self, cell: tuple[int, int]) -> SceneObject:
        for obj in self.objects:
            if obj.cell == cell:
                return obj
        raise KeyError(cell)

    def occupied_cells(self) -> frozenset:
        return frozenset(obj.cell for obj in self.objects)

    def to_record(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "objects": [
                {"row": o.row, "col": o.col, "shape": o.shape,
                 "color": o.color, "size": o.size}
                for o in self.objects
            ],
        }

    @staticmethod
    def from_record(rec: dict) -> "SceneGraph":
        return SceneGraph(
            grid_size=int(rec["grid_size"]),
            objects=tuple(
                SceneObject(int(o["row"]), int(o["col"]), o["shape"],
                            o["color"], o["size"])
                for o in rec["objects"]))


@dataclass(frozen=True)
class SceneConfig:
    grid_size: int = 5
    min_objects: int = 3
    max_objects: int = 8

    def __post_init__(self):
        g2 = self.grid_size * self.grid_size
        if not (1 <= self.min_objects <= self.max_objects <= g2):
            raise SceneError(
                f"need 1 <= min_objects <= max_objects <= {g2}, got "
                f"[{self.min_objects}, {self.max_objects}]")


def generate_scene(config: SceneConfig, seed) -> SceneGraph:
    """Deterministic scene from (config, seed): object count uniform in
    [min, max], cells without replacement, attributes uniform."""
    rng = np.random.default_rng(seed)
    g = config.grid_size
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(g * g, size=n, replace=False)
    objects = []
    for cell in cells:
        objects.append(SceneObject(
            row=int(cell) // g,
            col=int(cell) % g,
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
        ))
    return SceneGraph(g, tuple(objects))


def scene_features(scene: SceneGraph) -> np.ndarray:
    """G x G x FEATURE_DIM float64 map. Empty cells carry all-zero
    attribute blocks but still get position channels."""
    g = scene.grid_size
    fm = np.zeros((g, g, FEATURE_DIM))
    denom = float(g - 1) if g > 1 else 1.0
    rows = np.arange(g) / denom
    fm[:, :, _POS_OFF] = rows[:, None]
    fm[:, :, _POS_OFF + 1] = rows[None, :]
    for obj in scene.objects:
        fm[obj.row, obj.col, _SHAPE_OFF + SHAPES.index(obj.shape)] = 1.0
        fm[obj.row, obj.col, _COLOR_OFF + COLORS.index(obj.color)] = 1.0
        fm[obj.row, obj.col, _SIZE_OFF + SIZES.index(obj.size)] = 1.0
    return fm


def decode_features(fm: np.ndarray) -> SceneGraph:
    """Inverse one-hot lookup; exact round trip of scene_features."""
    g = fm.shape[0]
    objects = []
    for r in range(g):
        for c in range(g):
            block = fm[r, c]
            if block[_SHAPE_OFF:_SHAPE_OFF + len(SHAPES)].sum() == 0:
                continue
            objects.append(SceneObject(
                r, c,
                shape=SHAPES[int(np.argmax(block[_SHAPE_OFF:_COLOR_OFF]))],
                color=COLORS[int(np.argmax(block[_COLOR_OFF:_SIZE_OFF]))],
                size=SIZES[int(np.argmax(block[_SIZE_OFF:_POS_OFF]))],
            ))
    return SceneGraph(g, tuple(objects))


# ---------------------------------------------------------------------------
# symbolic executor


def _parse_attr_binding(token: ModuleToken) -> tuple[str, str]:
    if token.binding is None or "=" not in token.binding:
        raise BindingError(f"{token.kind} needs an attr=value binding, "
                           f"got {token.binding!r}")
    attr, _, value = token.binding.partition("=")
    if attr not in ATTRIBUTES:
        raise BindingError(f"unknown attribute {attr!r} on {token.kind}")
    if value not in ATTRIBUTES[attr]:
        raise BindingError(f"unknown {attr} value {value!r} on {token.kind}")
    return attr, value


def _parse_name_binding(token: ModuleToken, allowed, what: str) -> str:
    if token.binding is None or token.binding not in allowed:
        raise BindingError(f"{token.kind} needs a {what} binding, "
                           f"got {token.binding!r}")
    return token.binding


def _matching_cells(scene: SceneGraph, attr: str, value: str) -> frozenset:
    return frozenset(o.cell for o in scene.objects
                     if getattr(o, attr) == value)


_REL_TESTS = {
    "left_of": lambda c, ref: c[1] < ref[1],
    "right_of": lambda c, ref: c[1] > ref[1],
    "above": lambda c, ref: c[0] < ref[0],
    "below": lambda c, ref: c[0] > ref[0],
}


def _single(scene: SceneGraph, cells: frozenset, kind: str) -> SceneObject:
    if len(cells) != 1:
        raise AmbiguityError(
            f"{kind} needs exactly one object, set has {len(cells)}")
    return scene.at(next(iter(cells)))


def symbolic_execute(tokens, scene: SceneGraph) -> str:
    """Set-based evaluation of a fully bound layout; the answer oracle.

    Attention-typed tokens produce sets of occupied cells; the final
    prediction-typed token maps its operand sets to an answer string.
    """
    tokens = [t if isinstance(t, ModuleToken) else ModuleToken(t) for t in tokens]
    report = validate(tokens)
    if not report.ok:
        raise BindingError(
            f"invalid layout at token {report.error_index}: {report.reason}")
    stack: list[frozenset] = []
    for tok in tokens:
        arity = SIGNATURES[tok.kind].arity
        args = stack[len(stack) - arity:] if arity else []
        del stack[len(stack) - arity:]
        kind = tok.kind
        if kind == "find":
            attr, value = _parse_attr_binding(tok)
            result = _matching_cells(scene, attr, value)
        elif kind == "filter":
            attr, value = _parse_attr_binding(tok)
            result = args[0] & _matching_cells(scene, attr, value)
        elif kind == "and":
            result = args[0] & args[1]
        elif kind == "or":
            result = args[0] | args[1]
        elif kind == "relocate":
            rel = _parse_name_binding(tok, RELATIONS, "spatial relation")
            test = _REL_TESTS[rel]
            result = frozenset(
                c for c in scene.occupied_cells()
                if any(test(c, ref) for ref in args[0]))
        elif kind == "count":
            n = len(args[0])
            if n > MAX_COUNT:
                raise SceneError(f"count {n} exceeds the answer vocabulary")
            return str(n)
        elif kind in ("exist", "is_present"):
            return "yes" if args[0] else "no"
        elif kind == "describe":
            attr = _parse_name_binding(tok, ATTRIBUTES, "attribute")
            return getattr(_single(scene, args[0], kind), attr)
        elif kind == "compare":
            attr = _parse_name_binding(tok, ATTRIBUTES, "attribute")
            a = getattr(_single(scene, args[0], kind), attr)
            b = getattr(_single(scene, args[1], kind), attr)
            return "yes" if a == b else "no"
        elif kind == "greater_than":
            return "yes" if len(args[0]) > len(args[1]) else "no"
        elif kind == "less_than":
            return "yes" if len(args[0]) < len(args[1]) else "no"
        elif kind == "equal_to":
            return "yes" if len(args[0]) == len(args[1]) else "no"
        else:  # pragma: no cover
            raise BindingError(f"unhandled kind {kind}")
        stack.append(result)
    raise AssertionError("validated layout must end in a prediction token")
