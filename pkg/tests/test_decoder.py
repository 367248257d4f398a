import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bridgelm import tensor as T
from bridgelm.decoder import (
    BOS,
    EOS,
    VOCAB_SIZE,
    CapacityError,
    ConversationFormatError,
    ConversationSnippet,
    ConversationTemplate,
    DecoderConfig,
    DecoderLM,
    TruncationError,
    decode_bytes,
    encode,
    encode_bytes,
    greedy_generate,
    lm_loss,
    render_conversation,
    render_prompt,
)
from bridgelm.golden import load_text
from bridgelm.tensor import ContractError, Tensor


def model(seed=0, **kw):
    base = dict(d_lm=12, layers=1, heads=2, max_seq_len=64, ffn_mult=2, init_std=0.3)
    base.update(kw)
    return DecoderLM(DecoderConfig(**base), np.random.default_rng(seed))


def regions(mask):
    """Count maximal runs of 1s (scanning oracle)."""
    count, prev = 0, 0
    for m in mask:
        if m and not prev:
            count += 1
        prev = m
    return count


class TestTokenizer:
    @given(st.binary(max_size=64))
    def test_roundtrip(self, data):
        assert decode_bytes(encode_bytes(data)) == data

    def test_thousand_random_strings(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            data = rng.integers(0, 256, size=rng.integers(0, 40)).astype(np.uint8).tobytes()
            assert decode_bytes(encode_bytes(data)) == data

    def test_specials_dropped(self):
        assert decode_bytes([BOS, 104, 105, EOS]) == b"hi"


class TestRenderConversation:
    def test_default_template_text(self):
        snip = render_conversation([("user", "hi"), ("assistant", "hello")])
        text = bytes(t for t in snip.token_ids if t < 256).decode()
        assert text == load_text("conversation_preamble.txt") + " USER: hi ASSISTANT: hello"
        assert snip.token_ids[0] == BOS and snip.token_ids[-1] == EOS

    def test_single_round_mask(self):
        snip = render_conversation([("user", "hi"), ("assistant", "hello")])
        masked = [t for t, m in zip(snip.token_ids, snip.loss_mask) if m]
        assert masked == encode("hello") + [EOS]

    def test_empty_answer_masks_eos_only(self):
        snip = render_conversation([("user", "hi"), ("assistant", "")])
        assert [t for t, m in zip(snip.token_ids, snip.loss_mask) if m] == [EOS]

    def test_three_rounds_three_regions(self):
        d = [("user", "a"), ("assistant", "b"), ("user", "c"), ("assistant", "d"), ("user", "e"), ("assistant", "f")]
        snip = render_conversation(d)
        assert regions(snip.loss_mask) == 3

    @given(st.lists(st.tuples(st.text(max_size=8), st.text(max_size=8)), min_size=1, max_size=4))
    def test_mask_never_covers_user_text(self, rounds):
        tpl = ConversationTemplate(preamble="sys")
        dialogue = [x for u, a in rounds for x in (("user", u), ("assistant", a))]
        snip = render_conversation(dialogue, tpl)
        assert regions(snip.loss_mask) == len(rounds)
        # masked tokens, read back, are exactly the answers each followed by EOS
        masked = [t for t, m in zip(snip.token_ids, snip.loss_mask) if m]
        want = [t for _, a in rounds for t in encode(a) + [EOS]]
        assert masked == want

    @pytest.mark.parametrize("dialogue,index", [
        ([("assistant", "x"), ("user", "y")], 0),
        ([("user", "x"), ("user", "y")], 1),
        ([("user", "x"), ("assistant", "y"), ("user", "z")], 2),
    ])
    def test_role_errors(self, dialogue, index):
        with pytest.raises(ConversationFormatError) as exc:
            render_conversation(dialogue)
        assert exc.value.index == index

    def test_prompt_is_prefix_of_rendering(self):
        snip = render_conversation([("user", "hi"), ("assistant", "yo")])
        prompt = render_prompt("hi")
        assert snip.token_ids[: len(prompt)] == prompt


class TestDecoderForward:
    def test_shape(self):
        m = model()
        out = m(Tensor(np.zeros((3, 12))), [BOS, 1, 2, 3])
        assert out.shape == (4, VOCAB_SIZE)

    def test_capacity(self):
        with pytest.raises(CapacityError):
            model(max_seq_len=8)(Tensor(np.zeros((4, 12))), list(range(5)))

    def test_prefix_visibility(self):
        m = model()
        rng = np.random.default_rng(1)
        h = rng.normal(size=(3, 12))
        ids = [BOS, 5, 6, 7]
        a = m(Tensor(h), ids).data
        h2 = h.copy()
        h2[0, 0] += 1.0
        b = m(Tensor(h2), ids).data
        assert np.all(np.any(a != b, axis=1))

    @given(st.integers(0, 7), st.integers(0, 255), st.integers(0, 100))
    def test_causality(self, i, new_tok, seed):
        m = model()
        rng = np.random.default_rng(seed)
        ids = [int(x) for x in rng.integers(0, 256, size=8)]
        h = Tensor(rng.normal(size=(2, 12)))
        base = m(h, ids).data
        changed = list(ids)
        j = min(7, i + 1)
        changed[j] = new_tok
        out = m(h, changed).data
        assert np.array_equal(out[:j], base[:j])

    def test_tied_embeddings(self):
        m = model()
        names = [n for n, _ in m.named_parameters()]
        assert not any("head" in n for n in names)


class TestLoss:
    def test_all_masked_zero(self):
        snip = ConversationSnippet([BOS, 1, 2], [0, 0, 0])
        with pytest.warns(RuntimeWarning):
            assert lm_loss(Tensor(np.random.default_rng(0).normal(size=(3, VOCAB_SIZE))), snip).item() == 0.0

    def test_uniform(self):
        snip = ConversationSnippet([BOS, 7], [0, 1])
        assert lm_loss(Tensor(np.zeros((2, VOCAB_SIZE))), snip).item() == pytest.approx(math.log(260), abs=1e-12)

    def test_bruteforce(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(5, VOCAB_SIZE))
        ids, mask = [BOS, 10, 11, 12, EOS], [0, 0, 1, 1, 1]
        want = 0.0
        for t in range(4):
            if mask[t + 1]:
                row = z[t]
                want -= row[ids[t + 1]] - math.log(np.exp(row).sum())
        assert lm_loss(Tensor(z), ConversationSnippet(ids, mask)).item() == pytest.approx(want, abs=1e-10)

    def test_alignment_error(self):
        with pytest.raises(ContractError):
            lm_loss(Tensor(np.zeros((3, VOCAB_SIZE))), ConversationSnippet([1, 2], [0, 1]))

    def test_gradient_zero_on_unmasked_positions(self):
        snip = render_conversation([("user", "q"), ("assistant", "ab"), ("user", "c"), ("assistant", "d")],
                                   ConversationTemplate(preamble="s"))
        logits = Tensor(np.random.default_rng(0).normal(size=(len(snip), VOCAB_SIZE)), requires_grad=True)
        lm_loss(logits, snip).backward()
        for t in range(len(snip)):
            predicts_answer = t + 1 < len(snip) and snip.loss_mask[t + 1] == 1
            assert np.any(logits.grad[t] != 0) == predicts_answer


class TestGenerate:
    def test_zero_budget(self):
        assert greedy_generate(model(), None, "hi", 0, ConversationTemplate(preamble="")) == ""

    def test_deterministic(self):
        m = model()
        h = Tensor(np.random.default_rng(0).normal(size=(2, 12)))
        tpl = ConversationTemplate(preamble="")
        assert greedy_generate(m, h, "hi", 10, tpl) == greedy_generate(m, h, "hi", 10, tpl)

    def test_prompt_overflow(self):
        with pytest.raises(TruncationError):
            greedy_generate(model(max_seq_len=8), None, "a long instruction", 4, ConversationTemplate(preamble=""))
