"""Multi-scale information fusion of PET and CT feature maps.

Per pyramid level, both modalities pass through parallel convolutions of several kernel
sizes. For every kernel branch, shifted-window cross-attention relates the two
modalities, a gated fusion combines them, and channel then spatial attention refine the
result. A final gated sum merges the branches.
"""

import logging
from typing import NamedTuple, Optional

import torch
from torch import nn

from fuseg3d import Kernels
from fuseg3d.backbone import (
    Mlp,
    attention,
    init_weights,
    merge_heads,
    split_heads,
    window_partition,
    window_unpartition,
)
from fuseg3d.core import FeatureMap5D, ModelConfig, MsifConfig
from fuseg3d.errors import ConfigError, FusionError

logger = logging.getLogger(__name__)


class CrossAttentionPair(NamedTuple):
    """Cross-attended features of both modalities, laid out like their inputs."""

    att1: torch.Tensor
    att2: torch.Tensor


def _channels_last(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 4, 1)


def _channels_first(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 4, 1, 2, 3)


def _check_same_shape(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise FusionError(f"Fusion inputs must share one shape, got {sorted(shapes)}")


class MultiScaleConv(nn.Module):
    """Parallel same-padded 3D convolutions, one per kernel size, channels preserved."""

    def __init__(self, channels: int, kernels: Kernels) -> None:
        super().__init__()
        even = [k for k in kernels if k < 1 or k % 2 == 0]
        if even:
            raise ConfigError(f"Multi-scale kernels must be positive and odd, got {even}")
        self.kernels = tuple(kernels)
        self.convs = nn.ModuleList(
            nn.Conv3d(channels, channels, kernel_size=k, padding=k // 2) for k in kernels
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [conv(x) for conv in self.convs]


class CrossWindowAttention(nn.Module):
    """Window attention where each modality queries the other's keys.

    Queries, keys and values of both modalities come from one shared projection. As
    written for this model, each modality keeps its own values:
    `Att1 = softmax(Q1 K2^T / sqrt(d)) V1` and `Att2 = softmax(Q2 K1^T / sqrt(d)) V2`.
    With `conventional_values`, the values are swapped (`V2` resp. `V1`).
    """

    def __init__(self, dim: int, num_heads: int, conventional_values: bool = False, qkv_bias: bool = True) -> None:
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"Channels ({dim}) not divisible by heads ({num_heads})")
        self.num_heads = num_heads
        self.conventional_values = conventional_values
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.record_attention = False
        self.last_attention: Optional[tuple[torch.Tensor, torch.Tensor]] = None

    def forward(
        self, w1: torch.Tensor, w2: torch.Tensor, mask: Optional[torch.Tensor] = None
    ) -> CrossAttentionPair:
        q1, k1, v1 = (split_heads(t, self.num_heads) for t in self.qkv(w1).chunk(3, dim=-1))
        q2, k2, v2 = (split_heads(t, self.num_heads) for t in self.qkv(w2).chunk(3, dim=-1))
        if self.conventional_values:
            v1, v2 = v2, v1

        att1, probs1 = attention(q1, k2, v1, mask=mask)
        att2, probs2 = attention(q2, k1, v2, mask=mask)
        if self.record_attention:
            self.last_attention = (probs1.detach(), probs2.detach())
        return CrossAttentionPair(merge_heads(att1), merge_heads(att2))


def cross_window_attention(
    f1: torch.Tensor,
    f2: torch.Tensor,
    module: CrossWindowAttention,
    window_size: int,
    shifted: bool = False,
) -> CrossAttentionPair:
    """Cross-attention of two channels-first maps over one shared window partition.

    Odd layers (`shifted`) move the windows by `window_size // 2` on every axis.

    Raises:
        FusionError: The maps differ in shape.
    """
    _check_same_shape(f1, f2)
    s = window_size // 2 if shifted else 0
    part1 = window_partition(_channels_last(f1), window_size, (s, s, s))
    part2 = window_partition(_channels_last(f2), window_size, (s, s, s))
    pair = module(part1.windows, part2.windows, part1.mask)
    return CrossAttentionPair(
        _channels_first(window_unpartition(pair.att1, part1)),
        _channels_first(window_unpartition(pair.att2, part2)),
    )


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention followed by a residual MLP.

    Normalization, attention and MLP weights are shared between the two modalities, so
    exchanging the inputs exchanges the outputs.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int,
        window_size: int,
        shifted: bool,
        conventional_values: bool = False,
        mlp_ratio: float = 4.0,
        qkv_bias: bool = True,
    ) -> None:
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossWindowAttention(dim, num_heads, conventional_values, qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

        self.apply(init_weights)
        nn.init.zeros_(self.mlp.fc2.weight)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> CrossAttentionPair:
        x1, x2 = _channels_last(f1), _channels_last(f2)
        pair = cross_window_attention(
            _channels_first(self.norm1(x1)),
            _channels_first(self.norm1(x2)),
            self.attn,
            self.window_size,
            self.shifted,
        )
        x1 = x1 + _channels_last(pair.att1)
        x2 = x2 + _channels_last(pair.att2)
        x1 = x1 + self.mlp(self.norm2(x1))
        x2 = x2 + self.mlp(self.norm2(x2))
        return CrossAttentionPair(_channels_first(x1), _channels_first(x2))


class Gate(nn.Module):
    """Pointwise convolution followed by a sigmoid; outputs lie in (0, 1)."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(x))


class ChannelLayerNorm(nn.LayerNorm):
    """Layer normalization over the channel axis of a channels-first map."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _channels_first(super().forward(_channels_last(x)))


class CrossModalFusion(nn.Module):
    """`Conv(gate1(LN1(Att1 * F2)) + gate2(LN2(Att2 * F1)))`, products taken elementwise.

    Without gating, the two normalized branches are summed directly.
    """

    def __init__(self, channels: int, gated: bool = True) -> None:
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.norm2 = ChannelLayerNorm(channels)
        self.gate1: Optional[Gate] = Gate(channels) if gated else None
        self.gate2: Optional[Gate] = Gate(channels) if gated else None
        self.out = nn.Conv3d(channels, channels, kernel_size=1)

    def forward(self, att: CrossAttentionPair, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        _check_same_shape(att.att1, att.att2, f1, f2)
        fusion1 = self.norm1(att.att1 * f2)
        fusion2 = self.norm2(att.att2 * f1)
        if self.gate1 is not None and self.gate2 is not None:
            fusion1, fusion2 = self.gate1(fusion1), self.gate2(fusion2)
        return self.out(fusion1 + fusion2)


class ChannelAttention(nn.Module):
    """Rescales channels by a sigmoid of a shared MLP over average- and max-pooled
    descriptors."""

    def __init__(self, channels: int, reduction_ratio: int = 4) -> None:
        super().__init__()
        hidden = max(1, channels // reduction_ratio)
        self.mlp = nn.Sequential(
            nn.Conv3d(channels, hidden, kernel_size=1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv3d(hidden, channels, kernel_size=1, bias=False),
        )

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        avg = self.mlp(x.mean(dim=(2, 3, 4), keepdim=True))
        peak = self.mlp(x.amax(dim=(2, 3, 4), keepdim=True))
        return torch.sigmoid(avg + peak)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)


class SpatialAttention(nn.Module):
    """Rescales voxels by a sigmoid map convolved from channelwise average and maximum."""

    def __init__(self, kernel_size: int = 7) -> None:
        super().__init__()
        self.conv = nn.Conv3d(2, 1, kernel_size=kernel_size, padding=kernel_size // 2, bias=False)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)


class GatedMultiScaleFusion(nn.Module):
    """`Conv(sum_k gate_k(F_k))` with an independent gate per scale."""

    def __init__(self, channels: int, num_scales: int, gated: bool = True) -> None:
        super().__init__()
        self.gates = nn.ModuleList(Gate(channels) for _ in range(num_scales)) if gated else None
        self.out = nn.Conv3d(channels, channels, kernel_size=1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        _check_same_shape(*features)
        if self.gates is not None:
            if len(features) != len(self.gates):
                raise FusionError(f"Expected {len(self.gates)} scales, got {len(features)}")
            features = [gate(f) for gate, f in zip(self.gates, features)]
        return self.out(torch.stack(features).sum(dim=0))


def active_kernels(kernels: Kernels, multiscale: bool) -> Kernels:
    """All kernels, or only the middle one for single-scale fusion."""
    if multiscale:
        return kernels
    ordered = sorted(kernels)
    return (ordered[len(ordered) // 2],)


class FusionBranch(nn.Module):
    """Cross-attention, cross-modal fusion and channel/spatial attention for one kernel
    size."""

    def __init__(self, channels: int, num_heads: int, window_size: int, cfg: MsifConfig, mlp_ratio: float) -> None:
        super().__init__()
        self.blocks: Optional[nn.ModuleList] = None
        self.channel: Optional[ChannelAttention] = None
        self.spatial: Optional[SpatialAttention] = None
        if cfg.cross_attention:
            self.blocks = nn.ModuleList(
                CrossAttentionBlock(
                    channels,
                    num_heads,
                    window_size,
                    shifted=i % 2 == 1,
                    conventional_values=cfg.conventional_values,
                    mlp_ratio=mlp_ratio,
                )
                for i in range(cfg.cross_attention_depth)
            )
            self.channel = ChannelAttention(channels, cfg.reduction_ratio)
            self.spatial = SpatialAttention(cfg.spatial_kernel)
        self.fuse = CrossModalFusion(channels, gated=cfg.gated)

    def forward(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        att = CrossAttentionPair(f1, f2)
        if self.blocks is not None:
            for block in self.blocks:
                att = block(*att)
        fused = self.fuse(att, f1, f2)
        if self.channel is not None and self.spatial is not None:
            fused = self.spatial(self.channel(fused))
        return fused


class MSIF(nn.Module):
    """Fuses same-level PET and CT feature maps into one map with the same channels."""

    def __init__(self, channels: int, cfg: ModelConfig, scale_index: int = 0) -> None:
        super().__init__()
        self.scale_index = scale_index
        self.channels = channels
        kernels = active_kernels(cfg.fusion_kernels, cfg.msif.multiscale)
        self.multiscale = MultiScaleConv(channels, kernels)
        self.branches = nn.ModuleList(
            FusionBranch(channels, cfg.num_heads, cfg.window_size, cfg.msif, cfg.mlp_ratio) for _ in kernels
        )
        self.aggregate = GatedMultiScaleFusion(channels, len(kernels), gated=cfg.msif.gated)

    def forward(self, f_pet: FeatureMap5D, f_ct: FeatureMap5D) -> FeatureMap5D:
        if f_pet.scale_index != f_ct.scale_index or f_pet.scale_index != self.scale_index:
            raise FusionError(
                f"Scale mismatch: PET {f_pet.scale_index}, CT {f_ct.scale_index}, module {self.scale_index}"
            )
        _check_same_shape(f_pet.data, f_ct.data)
        if f_pet.data.shape[1] != self.channels:
            raise FusionError(f"Expected {self.channels} channels, got {f_pet.data.shape[1]}")

        pet_branches = self.multiscale(f_pet.data)
        ct_branches = self.multiscale(f_ct.data)
        fused = [branch(p, c) for branch, p, c in zip(self.branches, pet_branches, ct_branches)]
        return FeatureMap5D(self.aggregate(fused), self.scale_index)
