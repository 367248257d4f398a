"""Byte-level causal decoder that reads a visual prefix, plus conversation rendering."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .golden import load_text
from .nn import Attention, FeedForward, LayerNorm, Module, param
from .tensor import ContractError, Tensor

BOS, EOS, PAD, IMG = 256, 257, 258, 259
VOCAB_SIZE = 260
SPECIALS = frozenset({BOS, EOS, PAD, IMG})


class CapacityError(ContractError):
    """Sequence does not fit the decoder's positional table."""


class TruncationError(CapacityError):
    pass


class ConversationFormatError(ValueError):
    def __init__(self, index: int, message: str):
        super().__init__(f"turn {index}: {message}")
        self.index = index


# ---------------------------------------------------------------------------
# vocabulary


def encode_bytes(data: bytes) -> list[int]:
    return list(data)


def decode_bytes(ids) -> bytes:
    return bytes(i for i in ids if i not in SPECIALS)


def encode(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode(ids) -> str:
    return decode_bytes(ids).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# conversation rendering


@dataclass(frozen=True)
class ConversationTemplate:
    preamble: str
    user: str = "USER"
    assistant: str = "ASSISTANT"
    sep: str = " "

    @classmethod
    def default(cls) -> "ConversationTemplate":
        return cls(preamble=load_text("conversation_preamble.txt"))

    def round_head(self, user_text: str, first: bool) -> str:
        lead = self.sep if first and self.preamble else ""
        return f"{lead}{self.user}: {user_text}{self.sep}{self.assistant}: "


@dataclass
class ConversationSnippet:
    token_ids: list[int]
    loss_mask: list[int]
    turns: list[tuple[str, str]] = field(default_factory=list)
    instruction: str | None = None

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def answer_tokens(self) -> int:
        # targets are shifted by one, so position 0 is never predicted
        return int(sum(self.loss_mask[1:]))


def _check_roles(dialogue) -> None:
    for i, (role, _) in enumerate(dialogue):
        want = "user" if i % 2 == 0 else "assistant"
        if role != want:
            raise ConversationFormatError(i, f"expected role {want!r}, got {role!r}")


def render_conversation(dialogue, template: ConversationTemplate | None = None) -> ConversationSnippet:
    """Render alternating (role, text) turns; the loss mask covers answers and their EOS."""
    template = template or ConversationTemplate.default()
    dialogue = [(r, t) for r, t in dialogue]
    if not dialogue:
        raise ConversationFormatError(0, "empty dialogue")
    _check_roles(dialogue)
    if len(dialogue) % 2:
        raise ConversationFormatError(len(dialogue) - 1, "dialogue ends on a user turn")
    ids = [BOS] + encode(template.preamble)
    mask = [0] * len(ids)
    for r in range(0, len(dialogue), 2):
        head = encode(template.round_head(dialogue[r][1], first=r == 0))
        answer = encode(dialogue[r + 1][1]) + [EOS]
        ids += head + answer
        mask += [0] * len(head) + [1] * len(answer)
    return ConversationSnippet(ids, mask, dialogue, instruction=dialogue[0][1])


def render_prompt(instruction: str, template: ConversationTemplate | None = None) -> list[int]:
    template = template or ConversationTemplate.default()
    return [BOS] + encode(template.preamble) + encode(template.round_head(instruction, first=True))


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderConfig:
    d_lm: int = 48
    layers: int = 2
    heads: int = 2
    V: int = VOCAB_SIZE
    max_seq_len: int = 320
    ffn_mult: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_lm % self.heads:
            raise ValueError(f"d_lm={self.d_lm} not divisible by heads={self.heads}")
        if self.V < VOCAB_SIZE:
            raise ValueError(f"vocabulary must hold the {VOCAB_SIZE} byte+special ids")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(**d)


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng):
        self.ln_attn = LayerNorm(cfg.d_lm)
        self.attn = Attention(cfg.d_lm, cfg.heads, rng)
        self.ln_ffn = LayerNorm(cfg.d_lm)
        self.ffn = FeedForward(cfg.d_lm, cfg.ffn_mult, rng)

    def __call__(self, x: Tensor, allowed) -> Tensor:
        x = x + self.attn(self.ln_attn(x), allowed=allowed)
        return x + self.ffn(self.ln_ffn(x))


def causal_allowed(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class DecoderLM(Module):
    """Pre-norm causal transformer with tied input/output embeddings.

    The prefix rows take positions 0..n-1 and the text tokens follow; the
    lower-triangular mask therefore lets every text position see the whole
    prefix and the text up to itself.
    """

    def __init__(self, cfg: DecoderConfig, rng):
        self.cfg = cfg
        self.tok = param(rng, (cfg.V, cfg.d_lm), cfg.init_std)
        self.pos = param(rng, (cfg.max_seq_len, cfg.d_lm), cfg.init_std)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.d_lm)

    def __call__(self, prefix: Tensor | None, token_ids) -> Tensor:
        token_ids = list(token_ids)
        n = 0 if prefix is None else prefix.shape[0]
        length = n + len(token_ids)
        if length > self.cfg.max_seq_len:
            raise CapacityError(
                f"prefix {n} + text {len(token_ids)} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if prefix is not None and prefix.shape[1] != self.cfg.d_lm:
            raise T.ShapeError(f"prefix width {prefix.shape[1]} != d_lm {self.cfg.d_lm}")
        emb = T.take_rows(self.tok, token_ids)
        x = emb if prefix is None else T.concat_rows([prefix, emb])
        x = x + T.slice_rows(self.pos, 0, length)
        allowed = causal_allowed(length)
        for layer in self.layers:
            x = layer(x, allowed)
        h = self.ln_f(T.slice_rows(x, n, length))
        return h @ self.tok.T


def lm_loss(logits: Tensor, snippet: ConversationSnippet) -> Tensor:
    """Summed answer-span NLL; logits row t is scored against token t+1."""
    if logits.shape[0] != len(snippet.token_ids):
        raise ContractError(
            f"lm_loss: {logits.shape[0]} logit rows for {len(snippet.token_ids)} tokens"
        )
    return T.cross_entropy(
        T.slice_rows(logits, 0, logits.shape[0] - 1),
        snippet.token_ids[1:],
        snippet.loss_mask[1:],
    )


def greedy_generate(
    decoder: DecoderLM,
    prefix: Tensor | None,
    instruction: str,
    max_new_tokens: int,
    template: ConversationTemplate | None = None,
) -> str:
    """Argmax decoding of one assistant answer; stops at EOS or the token budget."""
    ids = render_prompt(instruction, template)
    n = 0 if prefix is None else prefix.shape[0]
    room = decoder.cfg.max_seq_len - n - len(ids)
    if room < 0:
        raise TruncationError(f"prompt needs {n + len(ids)} positions, have {decoder.cfg.max_seq_len}")
    out: list[int] = []
    with T.no_grad():
        for _ in range(min(max_new_tokens, room)):
            logits = decoder(prefix, ids + out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
    return decode(out)
