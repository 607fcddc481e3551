"""Per-modality shifted-window transformer encoder.

Inside transformer blocks, token grids are channels-last, `(B, H, W, D, C)`. Everything
crossing a module boundary (patch embedding output, pyramid outputs) is channels-first,
`(B, C, H, W, D)`, like the convolutional parts of the network.
"""

import logging
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from einops import rearrange
from timm.layers import DropPath, trunc_normal_
from torch import nn

from fuseg3d import VERBOSE, Grid, Shift
from fuseg3d.core import FeatureMap5D, ModelConfig

logger = logging.getLogger(__name__)


class WindowPartition(NamedTuple):
    """Result of cutting a token grid into cubic windows.

    Attributes:
        windows: `(B * num_windows, M**3, C)` tokens.
        mask: `(num_windows, M**3, M**3)` boolean, `True` where a query may attend to a
            key; `None` if every pair is allowed.
        grid: Spatial shape before padding.
        padded: Spatial shape after padding to multiples of `M`.
        shift: Cyclic shift actually applied per axis.
        window_size: `M`.
    """

    windows: torch.Tensor
    mask: Optional[torch.Tensor]
    grid: Grid
    padded: Grid
    shift: Shift
    window_size: int


def _effective_shift(padded: Grid, window_size: int, shift: Shift) -> Shift:
    # A single window along an axis has nothing to exchange with.
    h, w, d = (s if p > window_size else 0 for p, s in zip(padded, shift))
    return (h, w, d)


def _window_mask(
    grid: Grid, padded: Grid, window_size: int, shift: Shift, device: torch.device
) -> Optional[torch.Tensor]:
    if grid == padded and not any(shift):
        return None

    # Per axis: which shifted positions wrapped around the border, and which are real
    # (not padding) tokens.
    labels, valid = [], []
    for n, p, s in zip(grid, padded, shift):
        source = torch.arange(p, device=device) + s
        labels.append((source >= p).long())
        valid.append((source % p) < n)

    label = labels[0][:, None, None] * 4 + labels[1][None, :, None] * 2 + labels[2][None, None, :]
    is_valid = valid[0][:, None, None] & valid[1][None, :, None] & valid[2][None, None, :]

    m = window_size
    pattern = "(h m1) (w m2) (d m3) -> (h w d) (m1 m2 m3)"
    label = rearrange(label, pattern, m1=m, m2=m, m3=m)
    is_valid = rearrange(is_valid, pattern, m1=m, m2=m, m3=m)
    return (label[:, :, None] == label[:, None, :]) & is_valid[:, None, :]


def window_partition(x: torch.Tensor, window_size: int, shift: Shift = (0, 0, 0)) -> WindowPartition:
    """Pads a channels-last grid to multiples of `window_size`, shifts it cyclically by
    `-shift` and cuts it into non-overlapping cubic windows.

    Padded tokens and token pairs that were not neighbours before the cyclic shift are
    excluded from attention through the returned mask.
    """
    _, h, w, d, _ = x.shape
    m = window_size
    grid = (h, w, d)
    ph, pw, pd = (-(-n // m) * m for n in grid)
    padded = (ph, pw, pd)
    effective = _effective_shift(padded, m, shift)

    x = F.pad(x, (0, 0, 0, pd - d, 0, pw - w, 0, ph - h))
    if any(effective):
        x = torch.roll(x, shifts=tuple(-s for s in effective), dims=(1, 2, 3))

    windows = rearrange(x, "b (h m1) (w m2) (d m3) c -> (b h w d) (m1 m2 m3) c", m1=m, m2=m, m3=m)
    mask = _window_mask(grid, padded, m, effective, x.device)
    logger.log(
        level=VERBOSE,
        msg=f"Partitioned {grid} (padded {padded}, shift {effective}) into {windows.shape[0]} windows",
    )
    return WindowPartition(windows, mask, grid, padded, effective, m)


def window_unpartition(windows: torch.Tensor, part: WindowPartition) -> torch.Tensor:
    """Exact inverse of `window_partition` for tensors laid out like `part.windows`."""
    m = part.window_size
    ph, pw, pd = part.padded
    x = rearrange(
        windows,
        "(b h w d) (m1 m2 m3) c -> b (h m1) (w m2) (d m3) c",
        h=ph // m,
        w=pw // m,
        d=pd // m,
        m1=m,
        m2=m,
        m3=m,
    )
    if any(part.shift):
        x = torch.roll(x, shifts=part.shift, dims=(1, 2, 3))
    h, w, d = part.grid
    return x[:, :h, :w, :d, :]


def attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    mask: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over windows.

    Args:
        q: Queries, `(B * nW, heads, N, head_dim)`.
        k: Keys, same shape.
        v: Values, same shape.
        bias: Additive `(heads, N, N)` bias.
        mask: Boolean `(nW, N, N)`, `True` where attending is allowed.

    Returns:
        The attended values and the attention probabilities.
    """
    scores = (q * q.shape[-1] ** -0.5) @ k.transpose(-2, -1)
    if bias is not None:
        scores = scores + bias.unsqueeze(0)
    if mask is not None:
        num_windows = mask.shape[0]
        bw, heads, n, _ = scores.shape
        scores = scores.view(bw // num_windows, num_windows, heads, n, n)
        scores = scores.masked_fill(~mask[None, :, None], torch.finfo(scores.dtype).min)
        scores = scores.view(bw, heads, n, n)
    probs = scores.softmax(dim=-1)
    return probs @ v, probs


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    return rearrange(x, "b n (h d) -> b h n d", h=heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    return rearrange(x, "b h n d -> b n (h d)")


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class RelativePositionBias(nn.Module):
    """Learned bias per head for every relative offset inside a cubic window."""

    def __init__(self, window_size: int, num_heads: int) -> None:
        super().__init__()
        m = window_size
        self.num_tokens = m**3
        self.table = nn.Parameter(torch.zeros((2 * m - 1) ** 3, num_heads))
        trunc_normal_(self.table, std=0.02)

        coords = torch.stack(torch.meshgrid([torch.arange(m)] * 3, indexing="ij")).flatten(1)
        relative = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (m - 1)
        index = relative[..., 0] * (2 * m - 1) ** 2 + relative[..., 1] * (2 * m - 1) + relative[..., 2]
        self.register_buffer("index", index, persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.num_tokens
        return self.table[self.index.view(-1)].view(n, n, -1).permute(2, 0, 1)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window."""

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int,
        qkv_bias: bool = True,
        relative_position_bias: bool = True,
    ) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.bias = RelativePositionBias(window_size, num_heads) if relative_position_bias else None
        self.record_attention = False
        self.last_attention: Optional[torch.Tensor] = None

    def forward(self, windows: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = (split_heads(t, self.num_heads) for t in self.qkv(windows).chunk(3, dim=-1))
        bias = self.bias() if self.bias is not None else None
        out, probs = attention(q, k, v, bias=bias, mask=mask)
        if self.record_attention:
            self.last_attention = probs.detach()
        return self.proj(merge_heads(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float) -> None:
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """Pre-norm (shifted-)window attention block with an MLP, both residual.

    `x = x + W-MSA(LN(x))`, then `x = x + MLP(LN(x))`. The shifted variant moves the
    window grid by `window_size // 2` on every axis.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int,
        shifted: bool,
        mlp_ratio: float = 4.0,
        qkv_bias: bool = True,
        relative_position_bias: bool = True,
        drop_path: float = 0.0,
    ) -> None:
        super().__init__()
        self.window_size = window_size
        s = window_size // 2 if shifted else 0
        self.shift: Shift = (s, s, s)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, qkv_bias, relative_position_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path) if drop_path > 0 else nn.Identity()

        self.apply(init_weights)
        nn.init.zeros_(self.mlp.fc2.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        part = window_partition(self.norm1(x), self.window_size, self.shift)
        attended = window_unpartition(self.attn(part.windows, part.mask), part)
        x = x + self.drop_path(attended)
        return x + self.drop_path(self.mlp(self.norm2(x)))


class PatchEmbed(nn.Module):
    """Non-overlapping convolutional patch embedding.

    A convolution with kernel and stride `patch_size` maps to `stem_channels`, a
    pointwise convolution then projects to the token dimension. Inputs not divisible by
    the patch size are zero-padded at the far end.
    """

    def __init__(self, in_channels: int, stem_channels: int, embed_dim: int, patch_size: int) -> None:
        super().__init__()
        self.patch_size = patch_size
        self.stem = nn.Conv3d(in_channels, stem_channels, kernel_size=patch_size, stride=patch_size)
        self.proj = nn.Conv3d(stem_channels, embed_dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.patch_size
        h, w, d = x.shape[-3:]
        pads = [(-n) % p for n in (d, w, h)]
        if any(pads):
            x = F.pad(x, (0, pads[0], 0, pads[1], 0, pads[2]))
        return self.proj(self.stem(x))


class PatchMerging(nn.Module):
    """Concatenates 2x2x2 token neighbourhoods (8C) and projects them to 2C.

    Odd spatial sizes are padded by reflection (by replication for size 1).
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)
        self.apply(init_weights)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        sizes = x.shape[1:4]
        if any(n % 2 for n in sizes):
            x = x.permute(0, 4, 1, 2, 3)
            # F.pad orders padding from the last axis backwards: (d, w, h).
            for position, n in zip((4, 2, 0), sizes):
                if n % 2:
                    pad = [0] * 6
                    pad[position + 1] = 1
                    x = F.pad(x, tuple(pad), mode="reflect" if n > 1 else "replicate")
            x = x.permute(0, 2, 3, 4, 1)
        x = rearrange(x, "b (h p1) (w p2) (d p3) c -> b h w d (p1 p2 p3 c)", p1=2, p2=2, p3=2)
        return self.reduction(self.norm(x))


class EncoderStage(nn.Module):
    """`depth` alternating W-MSA / SW-MSA blocks followed by patch merging."""

    def __init__(self, dim: int, depth: int, cfg: ModelConfig, drop_paths: list[float]) -> None:
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(
                dim,
                cfg.num_heads,
                cfg.window_size,
                shifted=i % 2 == 1,
                mlp_ratio=cfg.mlp_ratio,
                qkv_bias=cfg.qkv_bias,
                relative_position_bias=cfg.relative_position_bias,
                drop_path=drop_paths[i],
            )
            for i in range(depth)
        )
        self.merge = PatchMerging(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return self.merge(x)


class EncoderOutput(NamedTuple):
    embedding: torch.Tensor
    pyramid: list[FeatureMap5D]


class Encoder(nn.Module):
    """Shifted-window encoder for one modality.

    Returns the patch embedding (`C` channels at half resolution) and a four-level
    pyramid with channels `2C, 4C, 8C, 16C` at `1/4 ... 1/32` of the input resolution.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(
            cfg.num_input_channels_per_modality,
            cfg.conv_stem_channels,
            cfg.embed_dim,
            cfg.patch_size,
        )
        rates = torch.linspace(0, cfg.drop_path, sum(cfg.depths)).tolist()
        stages = []
        start = 0
        for i, depth in enumerate(cfg.depths):
            stages.append(EncoderStage(cfg.embed_dim * 2**i, depth, cfg, rates[start : start + depth]))
            start += depth
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        embedding = self.patch_embed(x)
        tokens = embedding.permute(0, 2, 3, 4, 1)
        pyramid = []
        for i, stage in enumerate(self.stages):
            tokens = stage(tokens)
            pyramid.append(FeatureMap5D(tokens.permute(0, 4, 1, 2, 3), i))
            logger.log(level=VERBOSE, msg=f"Encoder stage {i} output {tuple(pyramid[-1].data.shape)}")
        return EncoderOutput(embedding, pyramid)
