"""Templated question generation with expert layouts, plus the JSON-lines
dataset format.

Every template renders a word sequence and an expert layout over sampled
attribute bindings, rejection-resampling until the layout's preconditions
hold on the scene (singleton referents, in-vocabulary counts). The stored
answer always comes from the symbolic executor, so regenerating a record
and re-executing its layout reproduces the answer exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .layout import ModuleToken, format_layout_text, parse_layout_text
from .scene import (AmbiguityError, COLORS, SceneConfig, SceneError,
                    SceneGraph, SHAPES, SIZES, generate_scene,
                    symbolic_execute)

CATEGORIES = ("exist", "count", "yes_no", "compare")

CATEGORY_BY_ROOT = {
    "count": "count",
    "exist": "exist",
    "is_present": "exist",
    "greater_than": "yes_no",
    "less_than": "yes_no",
    "equal_to": "yes_no",
    "compare": "compare",
    "describe": "compare",
}

_REL_WORDS = {
    "left_of": ("left", "of"),
    "right_of": ("right", "of"),
    "above": ("above",),
    "below": ("below",),
}


class TemplateInapplicable(RuntimeError):
    """No satisfying binding was found within the retry budget."""


@dataclass(frozen=True)
class QuestionInstance:
    question: tuple[str, ...]
    layout: tuple[ModuleToken, ...]
    answer: str
    category: str
    scene_id: int
    template_id: str


def _tok(kind: str, binding: str | None = None) -> ModuleToken:
    return ModuleToken(kind, binding)


def _referent_is_single(scene, color=None, shape=None, size=None) -> bool:
    n = sum(1 for o in scene.objects
            if (color is None or o.color == color)
            and (shape is None or o.shape == shape)
            and (size is None or o.size == size))
    return n == 1


# Each template: (id, sampler). The sampler draws bindings from rng and
# returns (question words, layout tokens) or None when the draw cannot
# satisfy the template's preconditions on this scene.


def _t_count_color_shape(scene, rng):
    c, s = _pick(rng, COLORS), _pick(rng, SHAPES)
    words = ("how", "many", c, s, "objects", "are", "there")
    return words, (_tok("find", f"color={c}"), _tok("filter", f"shape={s}"),
                   _tok("count"))


def _t_count_color(scene, rng):
    c = _pick(rng, COLORS)
    words = ("how", "many", c, "objects", "are", "there")
    return words, (_tok("find", f"color={c}"), _tok("count"))


def _t_exist_color_shape(scene, rng):
    c, s = _pick(rng, COLORS), _pick(rng, SHAPES)
    words = ("is", "there", "a", c, s, "object")
    return words, (_tok("find", f"color={c}"), _tok("find", f"shape={s}"),
                   _tok("and"), _tok("exist"))


def _t_present_color_or_color(scene, rng):
    c1, c2 = _pick_two(rng, COLORS)
    words = ("is", "there", "a", c1, "object", "or", "a", c2, "object")
    return words, (_tok("find", f"color={c1}"), _tok("find", f"color={c2}"),
                   _tok("or"), _tok("is_present"))


def _t_count_color_or_color(scene, rng):
    c1, c2 = _pick_two(rng, COLORS)
    words = ("how", "many", "objects", "are", c1, "or", c2)
    return words, (_tok("find", f"color={c1}"), _tok("find", f"color={c2}"),
                   _tok("or"), _tok("count"))


def _t_more_color(scene, rng):
    c1, c2 = _pick_two(rng, COLORS)
    words = ("are", "there", "more", c1, "objects", "than", c2, "objects")
    return words, (_tok("find", f"color={c1}"), _tok("find", f"color={c2}"),
                   _tok("greater_than"))


def _t_fewer_shape(scene, rng):
    s1, s2 = _pick_two(rng, SHAPES)
    words = ("are", "there", "fewer", s1, "objects", "than", s2, "objects")
    return words, (_tok("find", f"shape={s1}"), _tok("find", f"shape={s2}"),
                   _tok("less_than"))


def _t_same_count_colors(scene, rng):
    c1, c2 = _pick_two(rng, COLORS)
    words = ("are", "there", "as", "many", c1, "objects", "as", c2, "objects")
    return words, (_tok("find", f"color={c1}"), _tok("find", f"color={c2}"),
                   _tok("equal_to"))


def _t_compare_size(scene, rng):
    c1, s1 = _pick(rng, COLORS), _pick(rng, SHAPES)
    c2, s2 = _pick(rng, COLORS), _pick(rng, SHAPES)
    if (c1, s1) == (c2, s2):
        return None
    if not (_referent_is_single(scene, color=c1, shape=s1)
            and _referent_is_single(scene, color=c2, shape=s2)):
        return None
    words = ("do", "the", c1, s1, "and", "the", c2, s2, "have",
             "the", "same", "size")
    return words, (_tok("find", f"color={c1}"), _tok("filter", f"shape={s1}"),
                   _tok("find", f"color={c2}"), _tok("filter", f"shape={s2}"),
                   _tok("compare", "size"))


def _t_describe_color(scene, rng):
    z, s = _pick(rng, SIZES), _pick(rng, SHAPES)
    if not _referent_is_single(scene, size=z, shape=s):
        return None
    words = ("what", "color", "is", "the", z, s)
    return words, (_tok("find", f"size={z}"), _tok("filter", f"shape={s}"),
                   _tok("describe", "color"))


def _t_count_relation(scene, rng):
    c, s = _pick(rng, COLORS), _pick(rng, SHAPES)
    rel = _pick(rng, tuple(_REL_WORDS))
    if not _referent_is_single(scene, color=c, shape=s):
        return None
    words = ("how", "many", "objects", "are") + _REL_WORDS[rel] + ("the", c, s)
    return words, (_tok("find", f"color={c}"), _tok("filter", f"shape={s}"),
                   _tok("relocate", rel), _tok("count"))


def _t_exist_relation(scene, rng):
    s1 = _pick(rng, SHAPES)
    c2, s2 = _pick(rng, COLORS), _pick(rng, SHAPES)
    rel = _pick(rng, tuple(_REL_WORDS))
    if not _referent_is_single(scene, color=c2, shape=s2):
        return None
    words = ("is", "there", "a", s1) + _REL_WORDS[rel] + ("the", c2, s2)
    return words, (_tok("find", f"color={c2}"), _tok("filter", f"shape={s2}"),
                   _tok("relocate", rel), _tok("find", f"shape={s1}"),
                   _tok("and"), _tok("exist"))


def _t_exist_relation_full(scene, rng):
    c1, s1 = _pick(rng, COLORS), _pick(rng, SHAPES)
    c2, s2 = _pick(rng, COLORS), _pick(rng, SHAPES)
    rel = _pick(rng, tuple(_REL_WORDS))
    if not _referent_is_single(scene, color=c2, shape=s2):
        return None
    words = ("is", "there", "a", c1, s1) + _REL_WORDS[rel] + ("the", c2, s2)
    return words, (_tok("find", f"color={c1}"), _tok("filter", f"shape={s1}"),
                   _tok("find", f"color={c2}"), _tok("filter", f"shape={s2}"),
                   _tok("relocate", rel), _tok("and"), _tok("exist"))


TEMPLATES = {
    "count_color_shape": _t_count_color_shape,
    "count_color": _t_count_color,
    "exist_color_shape": _t_exist_color_shape,
    "present_color_or_color": _t_present_color_or_color,
    "count_color_or_color": _t_count_color_or_color,
    "more_color": _t_more_color,
    "fewer_shape": _t_fewer_shape,
    "same_count_colors": _t_same_count_colors,
    "compare_size": _t_compare_size,
    "describe_color": _t_describe_color,
    "count_relation": _t_count_relation,
    "exist_relation": _t_exist_relation,
    "exist_relation_full": _t_exist_relation_full,
}

TEMPLATE_IDS = tuple(TEMPLATES)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _pick_two(rng, options):
    i = int(rng.integers(len(options)))
    j = int(rng.integers(len(options) - 1))
    if j >= i:
        j += 1
    return options[i], options[j]


def generate_question(scene: SceneGraph, template_id: str, seed,
                      scene_id: int = 0, max_tries: int = 100) -> QuestionInstance:
    """Fill one template on a scene; deterministic given (args, seed)."""
    if template_id not in TEMPLATES:
        raise KeyError(f"unknown template {template_id!r}")
    sampler = TEMPLATES[template_id]
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        drawn = sampler(scene, rng)
        if drawn is None:
            continue
        words, tokens = drawn
        try:
            answer = symbolic_execute(tokens, scene)
        except (AmbiguityError, SceneError):
            continue
        root = tokens[-1].kind
        return QuestionInstance(
            question=tuple(words), layout=tuple(tokens), answer=answer,
            category=CATEGORY_BY_ROOT[root], scene_id=scene_id,
            template_id=template_id)
    raise TemplateInapplicable(
        f"template {template_id!r} found no valid binding in {max_tries} tries")


# ---------------------------------------------------------------------------
# dataset assembly and JSON-lines format


@dataclass(frozen=True)
class DataConfig:
    scene: SceneConfig = SceneConfig()
    questions_per_scene: int = 4
    train_questions: int = 2000
    val_questions: int = 400
    test_questions: int = 400

    def split_sizes(self) -> dict:
        return {"train": self.train_questions, "val": self.val_questions,
                "test": self.test_questions}


@dataclass(frozen=True)
class Example:
    scene: SceneGraph
    instance: QuestionInstance
    split: str


def build_dataset(config: DataConfig, seed: int) -> dict[str, list[Example]]:
    """Scenes are split-disjoint; everything is a pure function of
    (config, seed)."""
    splits: dict[str, list[Example]] = {}
    scene_id = 0
    for split, n_questions in config.split_sizes().items():
        examples: list[Example] = []
        while len(examples) < n_questions:
            scene = generate_scene(config.scene, [seed, scene_id])
            take = min(config.questions_per_scene, n_questions - len(examples))
            for slot in range(take):
                rng = np.random.default_rng([seed, scene_id, slot])
                for attempt in range(200):
                    tid = _pick(rng, TEMPLATE_IDS)
                    try:
                        inst = generate_question(
                            scene, tid, [seed, scene_id, slot, attempt],
                            scene_id=scene_id)
                    except TemplateInapplicable:
                        continue
                    examples.append(Example(scene, inst, split))
                    break
                else:  # pragma: no cover
                    raise RuntimeError("no applicable template after 200 tries")
            scene_id += 1
        splits[split] = examples
    return splits


def example_to_record(ex: Example) -> dict:
    return {
        "scene": ex.scene.to_record(),
        "scene_id": ex.instance.scene_id,
        "question": list(ex.instance.question),
        "layout": format_layout_text(ex.instance.layout),
        "answer": ex.instance.answer,
        "category": ex.instance.category,
        "template_id": ex.instance.template_id,
        "split": ex.split,
    }


def example_from_record(rec: dict) -> Example:
    scene = SceneGraph.from_record(rec["scene"])
    inst = QuestionInstance(
        question=tuple(rec["question"]),
        layout=tuple(parse_layout_text(rec["layout"])),
        answer=rec["answer"],
        category=rec["category"],
        scene_id=int(rec["scene_id"]),
        template_id=rec.get("template_id", ""),
    )
    return Example(scene, inst, rec["split"])


def write_examples(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex), sort_keys=True,
                                separators=(",", ":")))
            fh.write("\n")


def read_examples(path) -> list[Example]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(example_from_record(json.loads(line)))
    return out
