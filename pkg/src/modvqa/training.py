"""Joint training: behavioral cloning on expert layouts, then Monte-Carlo
policy-gradient fine-tuning of the layout policy together with the
modules.

The per-question objective during the policy-gradient phase is

    (1/K) sum_k [ L_k + (L_k - b) * log P(layout_k | q) ]

where L_k is the answer cross-entropy of rollout k, the coefficient
(L_k - b) is treated as a constant, and b is an exponential moving
average of batch losses. Differentiating gives the pathwise gradient
through module parameters and contexts plus the score-function gradient
through the policy.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ParamStore, Tape, Tensor, clip_global_norm
from . import layout as L
from .modules import ModuleSet, assemble_and_execute, features_tensor
from .policy import LayoutPolicy, PolicySample, Vocabulary
from .questions import CATEGORIES, Example
from .scene import ANSWERS, ANSWER_INDEX, SceneGraph, scene_features

ABLATIONS = ("full", "baseline1", "baseline2")


class ConfigError(ValueError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    grid_size: int = 5
    d_emb: int = 64
    d_enc: int = 128
    d_att: int = 64
    d_txt: int = 64
    d_hid: int = 64
    max_len: int = 9
    use_attention: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    clone_epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rollouts: int = 4           # Monte-Carlo rollouts per question
    baseline_beta: float = 0.9  # moving-average decay for the reward baseline
    clip_norm: float = 5.0
    ablation: str = "full"
    seed: int = 0
    eval_beam: int = 1
    model: ModelConfig = ModelConfig()

    def validate(self) -> None:
        if self.rollouts < 1:
            raise ConfigError("rollouts must be >= 1")
        if not (0.0 <= self.baseline_beta < 1.0):
            raise ConfigError("baseline_beta must be in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.epochs < 0 or not (0 <= self.clone_epochs <= self.epochs):
            raise ConfigError("need 0 <= clone_epochs <= epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


class QAModel:
    """Modules + layout policy over one shared parameter store."""

    def __init__(self, vocab: Vocabulary, config: ModelConfig, seed: int = 0,
                 ablation: str = "full"):
        use_attention = config.use_attention and ablation != "baseline1"
        self.vocab = vocab
        self.config = config
        self.ablation = ablation
        self.store = ParamStore(np.random.default_rng([seed, 0xC0FFEE]))
        self.modules = ModuleSet(self.store, config.grid_size,
                                 d_txt=config.d_txt, d_hid=config.d_hid)
        self.policy = LayoutPolicy(
            self.store, len(vocab), d_emb=config.d_emb, d_enc=config.d_enc,
            d_att=config.d_att, d_txt=config.d_txt, max_len=config.max_len,
            use_attention=use_attention)
        self._feature_cache: dict[SceneGraph, Tensor] = {}

    def features(self, scene: SceneGraph) -> Tensor:
        cached = self._feature_cache.get(scene)
        if cached is None:
            if scene.grid_size != self.config.grid_size:
                raise DatasetError(
                    f"scene grid {scene.grid_size} does not match model grid "
                    f"{self.config.grid_size}")
            cached = features_tensor(scene_features(scene))
            self._feature_cache[scene] = cached
        return cached

    def encode_question(self, words):
        return self.policy.encode(self.vocab.encode(words))

    def execute(self, kinds, contexts, scene: SceneGraph):
        tree = L.parse_rpn(list(kinds))
        return assemble_and_execute(tree, contexts, self.features(scene),
                                    self.modules)

    def predict(self, scene: SceneGraph, words, beam_width: int = 1):
        """Greedy/beam inference: (answer, sample, logits, trace)."""
        enc = self.encode_question(words)
        sample = self.policy.argmax_layout(enc, beam_width)
        logits, trace = self.execute(sample.kinds, sample.contexts, scene)
        answer = ANSWERS[int(np.argmax(logits.data))]
        return answer, sample, logits, trace

    def snapshot(self) -> dict:
        return {name: t.data.copy() for name, t in self.store.items()}

    def restore(self, snap: dict) -> None:
        for name, t in self.store.items():
            t.data[...] = snap[name]

    def save(self, path) -> None:
        extra = {
            "model_config": self.config.to_dict(),
            "ablation": self.ablation,
            "vocab": list(self.vocab.words[1:]),  # UNK is implicit
            "answers": list(ANSWERS),
        }
        ad.save_checkpoint(path, self.store, extra=extra)

    @classmethod
    def load(cls, path) -> "QAModel":
        arrays, extra = ad.load_checkpoint(path)
        if tuple(extra.get("answers", ())) != ANSWERS:
            raise DatasetError("checkpoint answer vocabulary mismatch")
        model = cls(Vocabulary(extra["vocab"]),
                    ModelConfig.from_dict(extra["model_config"]),
                    ablation=extra.get("ablation", "full"))
        model.store.load_arrays(arrays)
        return model


def answer_loss(logits: Tensor, answer) -> Tensor:
    """Softmax cross-entropy of the answer index against the logits."""
    if isinstance(answer, str):
        if answer not in ANSWER_INDEX:
            raise DatasetError(f"answer {answer!r} outside the vocabulary")
        answer = ANSWER_INDEX[answer]
    n = logits.shape[0]
    if not (0 <= answer < n):
        raise DatasetError(f"answer index {answer} outside logits of size {n}")
    p = ad.softmax(logits, axis=0)
    return -ad.log(p[answer])


class RewardBaseline:
    """Exponential moving average of observed batch losses."""

    def __init__(self, beta: float):
        self.beta = beta
        self.value: float | None = None

    def current(self) -> float:
        return 0.0 if self.value is None else self.value

    def update(self, mean_loss: float) -> float:
        if self.value is None:
            self.value = mean_loss
        else:
            self.value = self.beta * self.value + (1.0 - self.beta) * mean_loss
        return self.value


def _expert_objective(model: QAModel, ex: Example, token_ce: bool) -> Tensor:
    enc = model.encode_question(ex.instance.question)
    kinds = [t.kind for t in ex.instance.layout]
    forced = model.policy.logprob(enc, kinds)
    logits, _ = model.execute(kinds, forced.contexts, ex.scene)
    loss = answer_loss(logits, ex.instance.answer)
    if token_ce:
        loss = ad.add(loss, -forced.total_logp)
    return loss


def cloning_step(model: QAModel, batch, opt: Adam,
                 clip_norm: float = 5.0) -> float:
    """One supervised step: policy token cross-entropy against the expert
    layout plus answer cross-entropy through the executed expert layout.
    """
    if not batch:
        raise DatasetError("empty batch")
    with Tape():
        total = None
        for ex in batch:
            obj = ad.mul(_expert_objective(model, ex, token_ce=True),
                         1.0 / len(batch))
            total = obj if total is None else ad.add(total, obj)
        value = total.item()
        ad.backward(total)
    clip_global_norm(model.store.params, clip_norm)
    opt.step()
    return value


def _expert_answer_step(model: QAModel, batch, opt: Adam,
                        clip_norm: float) -> float:
    # baseline2: layouts come from the dataset, the policy trains only
    # through the pathwise gradient of its context vectors
    with Tape():
        total = None
        for ex in batch:
            obj = ad.mul(_expert_objective(model, ex, token_ce=False),
                         1.0 / len(batch))
            total = obj if total is None else ad.add(total, obj)
        value = total.item()
        ad.backward(total)
    clip_global_norm(model.store.params, clip_norm)
    opt.step()
    return value


@dataclass
class ReinforceStats:
    mean_loss: float
    baseline_before: float
    baseline_after: float
    rollout_losses: list = field(default_factory=list)
    rollout_layouts: list = field(default_factory=list)


def reinforce_step(model: QAModel, batch, opt: Adam, rng,
                   baseline: RewardBaseline, rollouts: int = 4,
                   clip_norm: float = 5.0) -> ReinforceStats:
    """One Monte-Carlo policy-gradient step over a batch of questions."""
    if rollouts < 1:
        raise ConfigError("rollouts must be >= 1")
    b = baseline.current()
    stats = ReinforceStats(0.0, b, b)
    with Tape():
        total = None
        weight = 1.0 / (len(batch) * rollouts)
        loss_sum = 0.0
        for ex in batch:
            enc = model.encode_question(ex.instance.question)
            for _ in range(rollouts):
                sample = model.policy.sample(enc, rng)
                logits, _ = model.execute(sample.kinds, sample.contexts,
                                          ex.scene)
                l_hat = answer_loss(logits, ex.instance.answer)
                l_val = l_hat.item()
                loss_sum += l_val
                stats.rollout_losses.append(l_val)
                stats.rollout_layouts.append(sample.kinds)
                obj = ad.add(l_hat, ad.mul(sample.total_logp, l_val - b))
                obj = ad.mul(obj, weight)
                total = obj if total is None else ad.add(total, obj)
        mean_loss = loss_sum * weight
        ad.backward(total)
    clip_global_norm(model.store.params, clip_norm)
    opt.step()
    stats.mean_loss = mean_loss
    stats.baseline_after = baseline.update(mean_loss)
    return stats


def evaluate(model: QAModel, examples, beam_width: int = 1,
             use_expert_layouts: bool = False) -> dict:
    """Accuracy overall, per category, and layout exact-match vs expert."""
    if not examples:
        raise DatasetError("no examples to evaluate")
    correct = {c: 0 for c in CATEGORIES}
    counts = {c: 0 for c in CATEGORIES}
    layout_hits = 0
    for ex in examples:
        enc = model.encode_question(ex.instance.question)
        expert_kinds = tuple(t.kind for t in ex.instance.layout)
        if use_expert_layouts:
            sample = model.policy.logprob(enc, expert_kinds)
        else:
            sample = model.policy.argmax_layout(enc, beam_width)
        logits, _ = model.execute(sample.kinds, sample.contexts, ex.scene)
        answer = ANSWERS[int(np.argmax(logits.data))]
        cat = ex.instance.category
        counts[cat] += 1
        if answer == ex.instance.answer:
            correct[cat] += 1
        if sample.kinds == expert_kinds:
            layout_hits += 1
    n = len(examples)
    result = {"n": n,
              "overall": sum(correct.values()) / n,
              "layout_exact_match": layout_hits / n}
    for c in CATEGORIES:
        result[c] = correct[c] / counts[c] if counts[c] else 0.0
        result[f"n_{c}"] = counts[c]
    return result


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = 0.0
    config: dict = field(default_factory=dict)

    CSV_COLUMNS = ("epoch", "phase", "answer_loss", "layout_accuracy",
                   "val_overall", "val_exist", "val_count", "val_yes_no",
                   "val_compare", "seconds")

    def to_csv_text(self, include_seconds: bool = True) -> str:
        cols = self.CSV_COLUMNS if include_seconds else self.CSV_COLUMNS[:-1]
        lines = [",".join(cols)]
        for row in self.rows:
            lines.append(",".join(_csv_cell(row[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {"best_epoch": self.best_epoch, "best_val": self.best_val,
                "epochs": len(self.rows), "config": self.config}


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


def train(config: TrainConfig, dataset: dict, log=None):
    """Full training protocol; deterministic given config.seed.

    Returns (model, report) with the model restored to its best
    validation epoch.
    """
    config.validate()
    if "train" not in dataset or "val" not in dataset:
        raise DatasetError("dataset needs train and val splits")
    train_set, val_set = dataset["train"], dataset["val"]
    for ex in train_set:
        if not L.validate([t.kind for t in ex.instance.layout]).ok:
            raise DatasetError(f"invalid expert layout in {ex.instance}")
    rng = np.random.default_rng([config.seed, 0x5EED])
    vocab = Vocabulary.from_examples(train_set)
    model = QAModel(vocab, config.model, seed=config.seed,
                    ablation=config.ablation)
    opt = Adam(model.store.params, lr=config.lr, beta1=config.beta1,
               beta2=config.beta2, eps=config.eps)
    baseline = RewardBaseline(config.baseline_beta)
    report = TrainReport(config={"train": _config_dict(config)})
    best_snap = None
    expert_eval = config.ablation == "baseline2"
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if config.ablation == "baseline2":
            phase = "expert"
        else:
            phase = "clone" if epoch < config.clone_epochs else "reinforce"
        order = rng.permutation(len(train_set))
        losses = []
        for idx_batch in _batches(order, config.batch_size):
            batch = [train_set[i] for i in idx_batch]
            if phase == "clone":
                losses.append(cloning_step(model, batch, opt, config.clip_norm))
            elif phase == "expert":
                losses.append(_expert_answer_step(model, batch, opt,
                                                  config.clip_norm))
            else:
                stats = reinforce_step(model, batch, opt, rng, baseline,
                                       config.rollouts, config.clip_norm)
                losses.append(stats.mean_loss)
        val = evaluate(model, val_set, beam_width=config.eval_beam,
                       use_expert_layouts=expert_eval)
        row = {
            "epoch": epoch,
            "phase": phase,
            "answer_loss": float(np.mean(losses)),
            "layout_accuracy": val["layout_exact_match"],
            "val_overall": val["overall"],
            "val_exist": val["exist"],
            "val_count": val["count"],
            "val_yes_no": val["yes_no"],
            "val_compare": val["compare"],
            "seconds": time.perf_counter() - t0,
        }
        report.rows.append(row)
        if log:
            log(row)
        if not np.isfinite(val["overall"]):
            raise RuntimeError("non-finite validation accuracy")
        _check_finite(model)
        if best_snap is None or val["overall"] >= report.best_val + 1e-12:
            report.best_val = val["overall"]
            report.best_epoch = epoch
            best_snap = model.snapshot()
    if best_snap is not None:
        model.restore(best_snap)
    return model, report


def _check_finite(model: QAModel) -> None:
    for name, t in model.store.items():
        if not np.all(np.isfinite(t.data)):
            raise RuntimeError(f"parameter {name!r} became non-finite")


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    return d
