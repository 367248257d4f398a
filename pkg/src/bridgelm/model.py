"""Bridge + projection + decoder assembled into one trainable model."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import checkpoint
from .bridge import BridgeConfig, FusionBridge, Projection, synth_image
from .decoder import (
    ConversationSnippet,
    ConversationTemplate,
    DecoderConfig,
    DecoderLM,
    greedy_generate,
    lm_loss,
)
from .nn import Module
from .tensor import ContractError, Tensor

GROUPS = ("bridge", "projection", "llm")


@dataclass(frozen=True)
class ModelConfig:
    bridge: BridgeConfig = BridgeConfig()
    decoder: DecoderConfig = DecoderConfig()
    seed: int = 0

    def __post_init__(self):
        if self.bridge.d_lm != self.decoder.d_lm:
            raise ContractError(
                f"bridge projects to d_lm={self.bridge.d_lm} but decoder width is {self.decoder.d_lm}"
            )

    def to_dict(self) -> dict:
        return {"bridge": self.bridge.to_dict(), "decoder": self.decoder.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            bridge=BridgeConfig.from_dict(d.get("bridge", {})),
            decoder=DecoderConfig.from_dict(d.get("decoder", {})),
            seed=d.get("seed", 0),
        )

    @classmethod
    def tiny(cls, seed: int = 0, init_std: float = 0.3) -> "ModelConfig":
        """Under 5k parameters; meant for exhaustive finite-difference checks."""
        bridge = BridgeConfig(
            d=4, n=2, num_blocks=1, num_heads=1, patch_size=4, image_size=8,
            d_lm=6, ffn_mult=2, init_std=init_std,
        )
        decoder = DecoderConfig(d_lm=6, layers=1, heads=1, max_seq_len=24, ffn_mult=2, init_std=init_std)
        return cls(bridge, decoder, seed)


@lru_cache(maxsize=4096)
def _image(image_id: str, size: int) -> np.ndarray:
    img = synth_image(image_id, size)
    img.setflags(write=False)
    return img


def image_for(image_id: str, size: int) -> np.ndarray:
    return _image(image_id, size)


class BridgeLM(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.bridge = FusionBridge(cfg.bridge, rng)
        self.projection = Projection(cfg.bridge, rng)
        self.llm = DecoderLM(cfg.decoder, rng)
        self.template = ConversationTemplate.default()

    def group(self, name: str) -> Module:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def named_groups(self) -> dict[str, dict[str, Tensor]]:
        return {g: dict(self.group(g).named_parameters(f"{g}.")) for g in GROUPS}

    def config_dict(self) -> dict:
        d = self.cfg.to_dict()
        d["bridge"]["image_size"] = self.bridge.cfg.image_size
        return d

    def set_image_size(self, size: int) -> None:
        self.bridge.set_image_size(size)

    @property
    def image_size(self) -> int:
        return self.bridge.cfg.image_size

    def prefix(self, image) -> Tensor:
        return self.projection(self.bridge(image))

    def prefix_for(self, image_id: str) -> Tensor:
        return self.prefix(image_for(image_id, self.image_size))

    def logits(self, image, token_ids) -> Tensor:
        return self.llm(self.prefix(image), token_ids)

    def loss(self, image, snippet: ConversationSnippet) -> Tensor:
        return lm_loss(self.logits(image, snippet.token_ids), snippet)

    def fits(self, snippet: ConversationSnippet) -> bool:
        return self.cfg.bridge.n + len(snippet) <= self.cfg.decoder.max_seq_len

    def generate(self, image, instruction: str, max_new_tokens: int = 64) -> str:
        return greedy_generate(self.llm, self.prefix(image), instruction, max_new_tokens, self.template)

    # persistence

    def save(self, path, extra: dict | None = None):
        return checkpoint.save_checkpoint(path, self.state_dict(), self.config_dict(), extra)

    @classmethod
    def load(cls, path) -> tuple["BridgeLM", dict]:
        params, manifest = checkpoint.load_checkpoint(path)
        cfg = manifest["config"]
        size = cfg["bridge"]["image_size"]
        model = cls(ModelConfig.from_dict(cfg))
        model.set_image_size(size)
        model.load_state_dict(params)
        return model, manifest

    def group_digest(self, name: str) -> str:
        return checkpoint.params_digest({k: p.data for k, p in self.named_groups()[name].items()})
