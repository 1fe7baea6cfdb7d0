"""Low-rank adapters for the transformer backbone's attention projections."""

import hashlib

import torch
import torch.nn.functional as F
from torch import nn

from .config import LowRankAdapterSpec
from .encoder import EncoderError, ModelState
from .vit import VisionTransformer


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank residual.

    The residual is scaled by alpha / rank. The down-projection starts from
    small gaussian noise and the up-projection from zeros, so the wrapped
    layer initially computes exactly what the base layer did.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        if rank < 1:
            raise EncoderError(f"adapter rank must be >= 1, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad = False
        self.rank = rank
        self.scale = alpha / rank
        self.lora_a = nn.Parameter(torch.randn(rank, base.in_features) * 0.02)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x):
        return self.base(x) + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scale


_TARGET_ATTRS = {"q": "q", "k": "k", "v": "v", "o": "o"}


def wrap_with_low_rank_adapters(state: ModelState, spec: LowRankAdapterSpec) -> ModelState:
    """Replace the targeted attention projections with adapted versions and
    freeze everything else in the backbone."""
    backbone = state.model.backbone
    if not isinstance(backbone, VisionTransformer):
        raise EncoderError("low-rank adapters only apply to the transformer backbone")
    for name in spec.target_blocks:
        if name not in _TARGET_ATTRS:
            raise EncoderError(
                f"unknown adapter target {name!r}; expected one of {sorted(_TARGET_ATTRS)}"
            )
    for p in backbone.parameters():
        p.requires_grad = False
    for block in backbone.blocks:
        for name in spec.target_blocks:
            attr = _TARGET_ATTRS[name]
            layer = getattr(block.attn, attr)
            if isinstance(layer, LoRALinear):
                raise EncoderError(f"attention projection {name!r} is already adapted")
            setattr(block.attn, attr, LoRALinear(layer, spec.rank, spec.alpha))
    state.base_digest = base_weight_digest(state.model)
    return state


def base_weight_digest(model: nn.Module) -> str:
    """Checksum over every frozen parameter, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if not p.requires_grad:
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def adapter_parameter_count(model: nn.Module) -> int:
    n = 0
    for m in model.modules():
        if isinstance(m, LoRALinear):
            n += m.lora_a.numel() + m.lora_b.numel()
    return n
