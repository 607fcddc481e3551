"""U-shaped decoder and the assembled two-encoder segmentation network."""

import logging

import torch
from torch import nn

from fuseg3d.backbone import Encoder
from fuseg3d.core import ModelConfig, Modality, Volume3D, tensor_to_volume, volume_to_tensor
from fuseg3d.errors import AlignmentError, ConfigError, ModelError
from fuseg3d.msif import MSIF

logger = logging.getLogger(__name__)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization over the spatial axes, with affine parameters.

    Uses the biased variance. A single-voxel map normalizes to zero, leaving the bias;
    `nn.InstanceNorm3d` and `nn.GroupNorm` reject such maps, which the deepest level of
    small inputs produces.
    """

    def __init__(self, channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        var, mean = torch.var_mean(x, dim=(2, 3, 4), correction=0, keepdim=True)
        normalized = (x - mean) * torch.rsqrt(var + self.eps)
        return normalized * self.weight.view(1, -1, 1, 1, 1) + self.bias.view(1, -1, 1, 1, 1)


class ResidualBlock(nn.Module):
    """Two rounds of conv-norm-activation with an additive shortcut.

    The shortcut is the identity when channels are preserved and a pointwise
    conv-norm otherwise.
    """

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float = 0.01) -> None:
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel_size=3, padding=1),
            InstanceNorm(out_channels),
            nn.LeakyReLU(negative_slope),
            nn.Conv3d(out_channels, out_channels, kernel_size=3, padding=1),
            InstanceNorm(out_channels),
            nn.LeakyReLU(negative_slope),
        )
        self.shortcut: nn.Module = nn.Identity()
        if in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv3d(in_channels, out_channels, kernel_size=1),
                InstanceNorm(out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.shortcut(x)


class UpsampleBlock(nn.Module):
    """Transposed convolution doubling every spatial axis, then norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.deconv = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)
        self.norm = InstanceNorm(out_channels)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.deconv(x)))


def crop_to(x: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    h, w, d = shape[-3:]
    return x[..., :h, :w, :d]


class DecoderLevel(nn.Module):
    """Upsample, concatenate skips, reduce channels with a residual block."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int) -> None:
        super().__init__()
        self.up = UpsampleBlock(in_channels, out_channels)
        self.res = ResidualBlock(out_channels + skip_channels, out_channels)

    def forward(self, x: torch.Tensor, *skips: torch.Tensor) -> torch.Tensor:
        x = crop_to(self.up(x), skips[0].shape)
        return self.res(torch.cat([x, *skips], dim=1))


class SegmentationModel(nn.Module):
    """Two modality encoders, one fusion module per pyramid level and a U-shaped decoder.

    The decoder starts from a residual bottleneck on the deepest fused map, walks up the
    fused pyramid and, at half resolution, additionally receives the patch embeddings of
    both modalities. A final upsampling, pointwise convolution and sigmoid yield a
    lesion probability per input voxel.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        if cfg.embed_dim < 2:
            raise ConfigError(f"embed_dim must be at least 2, got {cfg.embed_dim}")
        self.cfg = cfg
        c = cfg.embed_dim
        channels = cfg.stage_channels()

        self.encoder_pet = Encoder(cfg)
        self.encoder_ct = Encoder(cfg)
        self.fusions = nn.ModuleList(MSIF(ch, cfg, scale_index=i) for i, ch in enumerate(channels))

        self.bottleneck = ResidualBlock(channels[3], channels[3])
        self.levels = nn.ModuleList(
            DecoderLevel(channels[i + 1], channels[i], channels[i]) for i in reversed(range(3))
        )
        self.embedding_level = DecoderLevel(channels[0], 2 * c, c)
        self.final_up = UpsampleBlock(c, c // 2)
        self.head = nn.Conv3d(c // 2, 1, kernel_size=1)
        self._check_wiring()

    def _check_wiring(self) -> None:
        for i, fusion in enumerate(self.fusions):
            expected = self.encoder_pet.stages[i].merge.reduction.out_features
            if fusion.channels != expected:
                raise ModelError(f"Fusion level {i} has {fusion.channels} channels, encoder gives {expected}")

    def forward(self, pet: torch.Tensor, ct: torch.Tensor) -> torch.Tensor:
        """Maps `(B, 1, H, W, D)` PET and CT tensors to `(B, 1, H, W, D)` probabilities."""
        if pet.ndim != 5 or pet.shape != ct.shape:
            raise ModelError(f"PET {tuple(pet.shape)} and CT {tuple(ct.shape)} must be equal 5D shapes")
        if pet.shape[1] != self.cfg.num_input_channels_per_modality:
            raise ModelError(
                f"Expected {self.cfg.num_input_channels_per_modality} channels per modality, got {pet.shape[1]}"
            )

        out_pet = self.encoder_pet(pet)
        out_ct = self.encoder_ct(ct)
        fused = [
            fusion(p, c).data for fusion, p, c in zip(self.fusions, out_pet.pyramid, out_ct.pyramid)
        ]

        x = self.bottleneck(fused[3])
        for level, skip in zip(self.levels, reversed(fused[:3])):
            x = level(x, skip)
        x = self.embedding_level(x, out_pet.embedding, out_ct.embedding)
        x = crop_to(self.final_up(x), pet.shape)
        return torch.sigmoid(self.head(x))

    @torch.no_grad()
    def predict(self, pet: Volume3D, ct: Volume3D) -> Volume3D:
        """Single forward pass on a preprocessed PET/CT pair."""
        if pet.shape != ct.shape:
            raise AlignmentError(f"PET {pet.shape} and CT {ct.shape} grids differ")
        was_training = self.training
        self.eval()
        try:
            device = next(self.parameters()).device
            prob = self(volume_to_tensor(pet).to(device), volume_to_tensor(ct).to(device))
        finally:
            self.train(was_training)
        return tensor_to_volume(prob, like=pet, modality=Modality.PROB)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
