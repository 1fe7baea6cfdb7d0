"""Plain vision transformer backbone emitting dense patch-token feature maps."""

import torch
import torch.nn.functional as F
from torch import nn

from .config import ViTParams


class Attention(nn.Module):
    """Multi-head self-attention with separate q/k/v/o projections."""

    def __init__(self, dim, num_heads):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q = self.q(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.o(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VisionTransformer(nn.Module):
    """Patch-embedding transformer; forward returns a (B, D, H/p, W/p) map.

    Position embeddings are learned on a base grid and bicubically
    interpolated when the input grid differs, so train and test
    resolutions can diverge.
    """

    def __init__(self, params: ViTParams, in_chans=3):
        super().__init__()
        self.params = params
        self.patch_size = params.patch_size
        self.patch_embed = nn.Conv2d(
            in_chans, params.embed_dim, kernel_size=params.patch_size,
            stride=params.patch_size,
        )
        gh, gw = params.pos_grid
        self.pos_embed = nn.Parameter(torch.zeros(1, gh * gw, params.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            Block(params.embed_dim, params.num_heads, params.mlp_ratio)
            for _ in range(params.depth)
        )
        self.norm = nn.LayerNorm(params.embed_dim)

    @property
    def stride(self):
        return self.patch_size

    def _positions(self, gh, gw):
        base_h, base_w = self.params.pos_grid
        pos = self.pos_embed
        if (gh, gw) == (base_h, base_w):
            return pos
        grid = pos.reshape(1, base_h, base_w, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bicubic", align_corners=False)
        return grid.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)

    def forward(self, x):
        b, _, h, w = x.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"input {h}x{w} not divisible by patch size {self.patch_size}"
            )
        gh, gw = h // self.patch_size, w // self.patch_size
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, N, D)
        tokens = tokens + self._positions(gh, gw)
        for block in self.blocks:
            tokens = block(tokens)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(b, -1, gh, gw)


def vit_large(pos_grid=(18, 18)):
    """~300M-parameter configuration used with externally provided weights."""
    return VisionTransformer(
        ViTParams(
            patch_size=14, embed_dim=1024, depth=24, num_heads=16,
            mlp_ratio=4.0, pos_grid=pos_grid,
        )
    )
