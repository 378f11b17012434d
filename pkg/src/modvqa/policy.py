"""Question-to-layout policy: LSTM encoder over words, attention LSTM
decoder over module tokens, with legality masks from the layout language.

The decoder emits one module token per step. Each step's soft attention
over encoder word states yields a context vector; its projection is the
text vector handed to the neural module instantiated by that token.
Masked softmax gives illegal tokens probability exactly zero, so every
sampled or decoded sequence validates by construction and terminates
within max_len tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from . import layout as L

UNK = "<unk>"


class PolicyError(ValueError):
    pass


class Vocabulary:
    """Word-to-index map; index 0 is the unknown word, rest sorted."""

    def __init__(self, words):
        self.words = (UNK,) + tuple(sorted(set(words) - {UNK}))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, tokens) -> list[int]:
        return [self.index.get(t, 0) for t in tokens]

    @staticmethod
    def from_examples(examples) -> "Vocabulary":
        words = set()
        for ex in examples:
            words.update(ex.instance.question)
        return Vocabulary(words)


@dataclass
class Encoding:
    """Per-word encoder states for one question."""

    word_states: Tensor       # [n_words, d_enc]
    final_h: Tensor           # [1, d_enc]
    final_c: Tensor           # [1, d_enc]
    n_words: int


@dataclass
class PolicySample:
    """One decoded layout with everything needed for training and traces."""

    kinds: tuple[str, ...]
    step_logps: list           # scalar Tensors, one per module token
    contexts: list              # d_txt Tensors, one per module token
    total_logp: Tensor
    word_attentions: list = field(default_factory=list)  # np arrays or None

    @property
    def logp_value(self) -> float:
        return self.total_logp.item()


def _lstm_step(x, h, c, Wx, Wh, b, width):
    z = ad.add(ad.add(ad.matmul(x, Wx), ad.matmul(h, Wh)), b)
    i = ad.sigmoid(z[:, 0:width])
    f = ad.sigmoid(z[:, width:2 * width])
    g = ad.tanh(z[:, 2 * width:3 * width])
    o = ad.sigmoid(z[:, 3 * width:4 * width])
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    return h2, c2


class LayoutPolicy:
    """P(layout | question) with per-step text vectors for the modules."""

    def __init__(self, store: ParamStore, n_words: int, d_emb: int = 64,
                 d_enc: int = 128, d_att: int = 64, d_txt: int = 64,
                 max_len: int = 9, use_attention: bool = True,
                 prefix: str = "policy"):
        if max_len < 2:
            raise PolicyError("max_len must be at least 2")
        self.d_emb = d_emb
        self.d_enc = d_enc
        self.d_att = d_att
        self.d_txt = d_txt
        self.max_len = max_len
        self.use_attention = use_attention
        self.prefix = prefix
        w, b = store.weight, store.bias
        w(f"{prefix}.word_emb", (n_words, d_emb))
        w(f"{prefix}.enc.Wx", (d_emb, 4 * d_enc))
        w(f"{prefix}.enc.Wh", (d_enc, 4 * d_enc))
        b(f"{prefix}.enc.b", (1, 4 * d_enc))
        # decoder input: previous token embedding; row N_TOKENS is the start
        w(f"{prefix}.tok_emb", (L.N_TOKENS + 1, d_emb))
        w(f"{prefix}.dec.Wx", (d_emb, 4 * d_enc))
        w(f"{prefix}.dec.Wh", (d_enc, 4 * d_enc))
        b(f"{prefix}.dec.b", (1, 4 * d_enc))
        w(f"{prefix}.att.W_enc", (d_enc, d_att))
        w(f"{prefix}.att.W_dec", (d_enc, d_att))
        w(f"{prefix}.att.v", (d_att,))
        w(f"{prefix}.out.W", (2 * d_enc, L.N_TOKENS))
        b(f"{prefix}.out.b", (L.N_TOKENS,))
        w(f"{prefix}.txt.W", (d_enc, d_txt))
        self.store = store

    def p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    # -- encoder --------------------------------------------------------

    def encode(self, word_ids) -> Encoding:
        if len(word_ids) == 0:
            raise PolicyError("cannot encode an empty question")
        emb = self.p("word_emb")
        h = Tensor(np.zeros((1, self.d_enc)))
        c = Tensor(np.zeros((1, self.d_enc)))
        rows = []
        for wid in word_ids:
            x = emb[wid:wid + 1]
            h, c = _lstm_step(x, h, c, self.p("enc.Wx"), self.p("enc.Wh"),
                              self.p("enc.b"), self.d_enc)
            rows.append(h)
        states = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
        return Encoding(states, h, c, len(word_ids))

    # -- one decoder step -------------------------------------------------

    def _decode_step(self, enc: Encoding, h, c, prev_idx: int):
        """Returns (h2, c2, unmasked token logits, context, alpha)."""
        x = self.p("tok_emb")[prev_idx:prev_idx + 1]
        h2, c2 = _lstm_step(x, h, c, self.p("dec.Wx"), self.p("dec.Wh"),
                            self.p("dec.b"), self.d_enc)
        if self.use_attention:
            scores = ad.matmul(
                ad.tanh(ad.add(ad.matmul(enc.word_states, self.p("att.W_enc")),
                               ad.matmul(h2, self.p("att.W_dec")))),
                self.p("att.v"))
            alpha = ad.softmax(scores, axis=0)
            context = ad.matmul(alpha, enc.word_states)
        else:
            alpha = None
            context = enc.final_h[0]
        joint = ad.concat([h2[0], context])
        logits = ad.add(ad.matmul(joint, self.p("out.W")), self.p("out.b"))
        return h2, c2, logits, context, alpha

    def _masked_dist(self, logits: Tensor, mask, temperature: float = 1.0):
        penal = np.where(mask, 0.0, -np.inf)
        masked = ad.add(logits, Tensor(penal))
        if temperature != 1.0:
            masked = ad.mul(masked, 1.0 / temperature)
        return ad.softmax(masked, axis=0)

    def text_vector(self, context: Tensor) -> Tensor:
        return ad.matmul(context, self.p("txt.W"))

    # -- rollouts ---------------------------------------------------------

    def _rollout(self, enc: Encoding, choose) -> PolicySample:
        """Shared decode loop; `choose(probs_data, mask) -> token index`."""
        h, c = enc.final_h, enc.final_c
        prev = L.N_TOKENS  # start row
        state = L.StackState()
        kinds: list[str] = []
        step_logps, contexts, alphas = [], [], []
        total = None
        while True:
            mask = L.legal_next_tokens(state, len(kinds), self.max_len)
            if state.finished:
                break  # END is forced with probability one; nothing to record
            h, c, logits, context, alpha = self._decode_step(enc, h, c, prev)
            probs = self._masked_dist(logits, mask)
            idx = choose(probs.data, mask, len(kinds))
            if not mask[idx]:
                raise PolicyError(f"chose masked token index {idx}")
            logp = ad.log(probs[idx])
            kind = L.KINDS[idx]
            kinds.append(kind)
            step_logps.append(logp)
            contexts.append(self.text_vector(context))
            alphas.append(None if alpha is None else alpha.data.copy())
            total = logp if total is None else ad.add(total, logp)
            state = L.advance(state, kind)
            prev = idx
        return PolicySample(tuple(kinds), step_logps, contexts, total, alphas)

    def sample(self, enc_or_ids, rng, temperature: float = 1.0) -> PolicySample:
        """Ancestral sampling under the legality mask."""
        enc = self._as_encoding(enc_or_ids)
        if temperature == 0.0:
            return self.greedy(enc)

        def choose(p, mask, _step):
            if temperature != 1.0:
                logits = np.where(np.asarray(mask), np.log(np.maximum(p, 1e-300)), -np.inf)
                p = np.exp(logits / temperature - (logits / temperature).max())
                p = p / p.sum()
            cum = np.cumsum(p)
            return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))

        return self._rollout(enc, choose)

    def greedy(self, enc_or_ids) -> PolicySample:
        enc = self._as_encoding(enc_or_ids)
        return self._rollout(enc, lambda p, mask, _s: int(np.argmax(p)))

    def logprob(self, enc_or_ids, kinds) -> PolicySample:
        """Teacher-forced log P(kinds | question) with per-step contexts."""
        kinds = tuple(k.kind if hasattr(k, "kind") else k for k in kinds)
        report = L.validate(kinds)
        if not report.ok:
            raise PolicyError(
                f"cannot score invalid layout at token {report.error_index}: "
                f"{report.reason}")
        if len(kinds) > self.max_len:
            raise PolicyError(
                f"layout length {len(kinds)} exceeds max_len {self.max_len}")
        enc = self._as_encoding(enc_or_ids)
        it = iter(kinds)
        sample = self._rollout(
            enc, lambda _p, _m, _s: L.KIND_INDEX[next(it)])
        return sample

    def argmax_layout(self, enc_or_ids, beam_width: int = 1) -> PolicySample:
        """Masked beam search by total log-probability.

        Ties break toward lower token indices. beam_width=1 is greedy.
        """
        if beam_width < 1:
            raise PolicyError("beam_width must be >= 1")
        if beam_width == 1:
            return self.greedy(enc_or_ids)
        enc = self._as_encoding(enc_or_ids)
        start = {
            "h": enc.final_h, "c": enc.final_c, "prev": L.N_TOKENS,
            "state": L.StackState(), "path": (), "kinds": (),
            "logp": 0.0, "step_logps": [], "contexts": [], "alphas": [],
            "total": None,
        }
        active = [start]
        finished: list[dict] = []
        for _ in range(self.max_len):
            if not active:
                break
            expansions = []
            for hyp in active:
                mask = L.legal_next_tokens(hyp["state"], len(hyp["kinds"]),
                                           self.max_len)
                h, c, logits, context, alpha = self._decode_step(
                    enc, hyp["h"], hyp["c"], hyp["prev"])
                probs = self._masked_dist(logits, mask)
                for idx, legal in enumerate(mask[:L.END_INDEX]):
                    if not legal:
                        continue
                    logp = ad.log(probs[idx])
                    kind = L.KINDS[idx]
                    expansions.append({
                        "h": h, "c": c, "prev": idx,
                        "state": L.advance(hyp["state"], kind),
                        "path": hyp["path"] + (idx,),
                        "kinds": hyp["kinds"] + (kind,),
                        "logp": hyp["logp"] + logp.item(),
                        "step_logps": hyp["step_logps"] + [logp],
                        "contexts": hyp["contexts"] + [self.text_vector(context)],
                        "alphas": hyp["alphas"]
                                  + [None if alpha is None else alpha.data.copy()],
                        "total": logp if hyp["total"] is None
                                 else ad.add(hyp["total"], logp),
                    })
            expansions.sort(key=lambda e: (-e["logp"], e["path"]))
            finished.extend(e for e in expansions if e["state"].finished)
            active = [e for e in expansions if not e["state"].finished][:beam_width]
        if not finished:  # pragma: no cover - masks guarantee completions
            raise PolicyError("beam search found no complete layout")
        finished.sort(key=lambda e: (-e["logp"], e["path"]))
        best = finished[0]
        return PolicySample(best["kinds"], best["step_logps"], best["contexts"],
                            best["total"], best["alphas"])

    def _as_encoding(self, enc_or_ids) -> Encoding:
        if isinstance(enc_or_ids, Encoding):
            return enc_or_ids
        return self.encode(enc_or_ids)
