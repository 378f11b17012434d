"""Module-layout language: RPN token sequences, stack validation, syntax
trees, and per-step legality masks for constrained decoding.

A layout is a postfix (operands-first) sequence of module tokens. Each
token pops `arity` attention values from the stack and pushes one value.
Attention-typed tokens may appear anywhere; a prediction-typed token is
only legal as the final token, consuming the whole stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field

ATTENTION = "attention"
PREDICTION = "prediction"

# Canonical token order. Mask indices, tie-breaking and embeddings all use it.
KINDS = (
    "find",
    "compare",
    "describe",
    "exist",
    "equal_to",
    "and",
    "filter",
    "relocate",
    "or",
    "greater_than",
    "less_than",
    "is_present",
    "count",
)

END = "<end>"
N_TOKENS = len(KINDS) + 1  # kinds + END
END_INDEX = len(KINDS)

KIND_INDEX = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class Signature:
    arity: int
    output: str  # ATTENTION or PREDICTION
    uses_features: bool


SIGNATURES = {
    "find": Signature(0, ATTENTION, True),
    "compare": Signature(2, PREDICTION, True),
    "describe": Signature(1, PREDICTION, True),
    "exist": Signature(1, PREDICTION, False),
    "equal_to": Signature(2, PREDICTION, False),
    "and": Signature(2, ATTENTION, False),
    "filter": Signature(1, ATTENTION, True),
    "relocate": Signature(1, ATTENTION, True),
    "or": Signature(2, ATTENTION, False),
    "greater_than": Signature(2, PREDICTION, False),
    "less_than": Signature(2, PREDICTION, False),
    "is_present": Signature(1, PREDICTION, False),
    "count": Signature(1, PREDICTION, False),
}

ATTENTION_KINDS = tuple(k for k in KINDS if SIGNATURES[k].output == ATTENTION)
PREDICTION_KINDS = tuple(k for k in KINDS if SIGNATURES[k].output == PREDICTION)


class LayoutError(ValueError):
    """Invalid layout sequence or unparsable layout text."""


@dataclass(frozen=True)
class ModuleToken:
    """One layout token. `binding` is the symbolic argument used only by
    the oracle executor, e.g. "color=red" for find, "left_of" for relocate.
    """

    kind: str
    binding: str | None = None

    def __post_init__(self):
        if self.kind not in SIGNATURES:
            raise LayoutError(f"unknown module kind {self.kind!r}")

    def __str__(self) -> str:
        return self.kind if self.binding is None else f"{self.kind}[{self.binding}]"


def _kind_of(token) -> str:
    return token.kind if isinstance(token, ModuleToken) else token


@dataclass(frozen=True)
class ValidityReport:
    ok: bool
    error_index: int | None = None
    reason: str | None = None
    # stack depth after each token, for diagnostics
    depths: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


def validate(tokens) -> ValidityReport:
    """Stack-simulate an RPN sequence of kinds or ModuleTokens.

    Accepts iff every token finds `arity` operands on the stack and the
    single prediction-typed token appears last, leaving depth one.
    """
    tokens = list(tokens)
    if not tokens:
        return ValidityReport(False, 0, "empty sequence")
    depth = 0
    depths = []
    last = len(tokens) - 1
    for i, tok in enumerate(tokens):
        kind = _kind_of(tok)
        if kind not in SIGNATURES:
            return ValidityReport(False, i, f"not a module token: {kind!r}",
                                  tuple(depths))
        sig = SIGNATURES[kind]
        if depth < sig.arity:
            return ValidityReport(
                False, i,
                f"{kind} needs {sig.arity} operands, stack has {depth}",
                tuple(depths))
        if sig.output == PREDICTION:
            if i != last:
                return ValidityReport(
                    False, i, f"prediction token {kind} before end of sequence",
                    tuple(depths))
            if depth - sig.arity != 0:
                return ValidityReport(
                    False, i,
                    f"{kind} leaves {depth - sig.arity} unconsumed operands",
                    tuple(depths))
        depth = depth - sig.arity + 1
        depths.append(depth)
    final_kind = _kind_of(tokens[-1])
    if SIGNATURES[final_kind].output != PREDICTION:
        return ValidityReport(False, len(tokens),
                              "sequence ends without a prediction token",
                              tuple(depths))
    return ValidityReport(True, depths=tuple(depths))


@dataclass
class SyntaxNode:
    token: ModuleToken
    children: list["SyntaxNode"] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return self.token.kind


def _as_token(tok) -> ModuleToken:
    return tok if isinstance(tok, ModuleToken) else ModuleToken(tok)


def parse_rpn(tokens) -> SyntaxNode:
    """Build the syntax tree of a valid RPN sequence.

    A token of arity k pops k subtrees; the first-pushed subtree becomes
    the first child.
    """
    tokens = [_as_token(t) for t in tokens]
    report = validate(tokens)
    if not report.ok:
        raise LayoutError(
            f"invalid layout at token {report.error_index}: {report.reason}")
    stack: list[SyntaxNode] = []
    for tok in tokens:
        arity = SIGNATURES[tok.kind].arity
        children = stack[len(stack) - arity:] if arity else []
        del stack[len(stack) - arity:]
        stack.append(SyntaxNode(tok, children))
    return stack[0]


def linearize(tree: SyntaxNode) -> list[ModuleToken]:
    """Post-order traversal; exact inverse of parse_rpn."""
    out: list[ModuleToken] = []

    def visit(node: SyntaxNode):
        for child in node.children:
            visit(child)
        out.append(node.token)

    visit(tree)
    return out


@dataclass(frozen=True)
class StackState:
    """Decoder-side stack typing state: count of unconsumed attention
    values, plus whether the prediction token has already been emitted.
    """

    depth: int = 0
    finished: bool = False


def advance(state: StackState, kind: str) -> StackState:
    """State after emitting `kind`; caller must have checked legality."""
    sig = SIGNATURES[kind]
    if sig.output == PREDICTION:
        return StackState(1, True)
    return StackState(state.depth - sig.arity + 1, False)


def _min_steps_to_finish(depth: int) -> int:
    # Cheapest completion: binary attention ops reduce the stack to depth
    # two, then one binary prediction token; from depth one a unary
    # prediction token finishes in a single step.
    if depth <= 1:
        return 1
    return depth - 1


def legal_next_tokens(state: StackState, emitted_len: int, max_len: int):
    """Boolean mask (length N_TOKENS, END last) of tokens that keep the
    rollout completable within max_len module tokens.
    """
    mask = [False] * N_TOKENS
    if state.finished:
        mask[END_INDEX] = True
        return mask
    budget = max_len - emitted_len  # module tokens still allowed
    for i, kind in enumerate(KINDS):
        sig = SIGNATURES[kind]
        if sig.arity > state.depth:
            continue
        if sig.output == PREDICTION:
            # must terminate: consume the whole stack in one step
            mask[i] = state.depth == sig.arity and budget >= 1
        else:
            new_depth = state.depth - sig.arity + 1
            mask[i] = budget >= 1 + _min_steps_to_finish(new_depth)
    return mask


def enumerate_valid(max_len: int) -> list[tuple[str, ...]]:
    """All valid kind sequences of length <= max_len, depth-first in
    canonical token order.
    """
    if max_len > 9:
        raise LayoutError("enumerate_valid supports max_len <= 9")
    out: list[tuple[str, ...]] = []
    prefix: list[str] = []

    def walk(state: StackState):
        mask = legal_next_tokens(state, len(prefix), max_len)
        for i, kind in enumerate(KINDS):
            if not mask[i]:
                continue
            prefix.append(kind)
            nxt = advance(state, kind)
            if nxt.finished:
                out.append(tuple(prefix))
            else:
                walk(nxt)
            prefix.pop()

    walk(StackState())
    return out


def parse_layout_text(text: str) -> list[ModuleToken]:
    """Parse whitespace-separated layout syntax, e.g.
    "find[color=red] find[shape=circle] and count".

    Raises LayoutError with a 1-based column position on bad input.
    """
    tokens: list[ModuleToken] = []
    i, n = 0, len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        start = i
        while i < n and not text[i].isspace() and text[i] != "[":
            i += 1
        name = text[start:i]
        if name not in SIGNATURES:
            raise LayoutError(f"column {start + 1}: unknown token {name!r}")
        binding = None
        if i < n and text[i] == "[":
            close = text.find("]", i)
            if close < 0:
                raise LayoutError(f"column {i + 1}: unclosed '[' binding")
            binding = text[i + 1:close]
            if not binding:
                raise LayoutError(f"column {i + 1}: empty binding")
            i = close + 1
        if i < n and not text[i].isspace():
            raise LayoutError(f"column {i + 1}: expected whitespace after token")
        tokens.append(ModuleToken(name, binding))
    if not tokens:
        raise LayoutError("column 1: empty layout")
    return tokens


def format_layout_text(tokens) -> str:
    return " ".join(str(_as_token(t)) for t in tokens)
