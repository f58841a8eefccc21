"""Multi-scale textualizing block.

Projects one encoder stage's support-image feature pyramid into a single
text-space token row.  Every scale except the smallest is progressively
downsampled to the smallest grid by a chain of 3x3 stride-2 convolutions;
convolution k carries scale k to scale k+1 and is shared by every scale
whose path passes through it.  The downsampled scales are concatenated
row-wise and collapsed by a two-layer MLP: a spatial-aggregation affine
(all rows -> 1) and a channel affine (d_visual -> d_text), each followed
by ReLU.

Stages do not share parameters by default: each stage has its own conv
chain and its own MLP.  ``share_across_stages`` exists for experiments.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .config import OVLMConfig
from .errors import FeatureShapeError, InvalidConfigError, InvalidStageError
from .ovlm import MultiScaleFeatures


@dataclass
class TextualizedStageToken:
    """One support exemplar's text-space row from a single encoder stage."""

    stage_index: int
    row: Tensor            # 1 x d_T

    def __post_init__(self) -> None:
        if self.row.ndim != 2 or self.row.shape[0] != 1:
            raise FeatureShapeError("stage token must be a single 1 x d_T row")


class ConvChainSet(nn.Module):
    """Downsampling convolutions for one stage.

    With scale sharing there are exactly M-1 kernels regardless of how many
    scales feed through them; without sharing each source scale owns an
    independent chain down to the smallest grid.
    """

    def __init__(self, config: OVLMConfig, share_scales: bool, scale_subset: list[int]):
        super().__init__()
        self.share_scales = share_scales
        self.scale_subset = list(scale_subset)
        m, d = config.num_scales, config.d_visual

        def make_conv() -> nn.Conv2d:
            conv = nn.Conv2d(d, d, 3, stride=2, padding=1)
            nn.init.orthogonal_(conv.weight, gain=0.1)
            nn.init.zeros_(conv.bias)
            return conv

        if share_scales:
            self.convs = nn.ModuleList(make_conv() for _ in range(m - 1))
        else:
            self.chains = nn.ModuleDict({
                str(j): nn.ModuleList(make_conv() for _ in range(j, m - 1))
                for j in self.scale_subset if j != m - 1
            })
        self._num_scales = m

    def chain_for(self, j: int) -> list[nn.Conv2d]:
        if j == self._num_scales - 1:
            return []
        if self.share_scales:
            return list(self.convs[j:])
        return list(self.chains[str(j)])

    def downsample(self, grids: list[Tensor]) -> list[Tensor]:
        """Each subset scale carried to the smallest grid (no activations)."""
        out = []
        for j in self.scale_subset:
            g = grids[j]
            for conv in self.chain_for(j):
                g = conv(g)
            out.append(g)
        return out


class StageMLP(nn.Module):
    """Two affine+ReLU layers: spatial aggregation then channel transform."""

    def __init__(self, config: OVLMConfig, num_subset_scales: int):
        super().__init__()
        rows = num_subset_scales * config.smallest_h * config.smallest_w
        self.spatial = nn.Linear(rows, 1)
        self.channel = nn.Linear(config.d_visual, config.d_text)
        # Zero channel weight with unit bias: the initial token is the all-ones
        # row, matching the scale of the unit-variance text embeddings, and the
        # output ReLU stays active so gradients flow from step one.
        nn.init.zeros_(self.channel.weight)
        nn.init.ones_(self.channel.bias)

    def forward(self, concat_rows: Tensor) -> Tensor:
        x = torch.relu(self.spatial(concat_rows.transpose(-1, -2)).squeeze(-1))
        return torch.relu(self.channel(x))


class MultiScaleTextualizer(nn.Module):
    """Per-stage textualizers over all L+1 encoder stages."""

    def __init__(self, config: OVLMConfig, share_scale_convs: bool = True,
                 share_across_stages: bool = False, scale_subset: list[int] | None = None):
        super().__init__()
        self.config = config
        m = config.num_scales
        subset = sorted(scale_subset) if scale_subset is not None else list(range(m))
        if not subset or any(not 0 <= j < m for j in subset):
            raise InvalidConfigError(f"scale subset {subset} invalid for M={m}")
        self.scale_subset = subset
        self.share_scale_convs = share_scale_convs
        self.share_across_stages = share_across_stages
        n_sets = 1 if share_across_stages else config.num_stages + 1
        self.conv_sets = nn.ModuleList(
            ConvChainSet(config, share_scale_convs, subset) for _ in range(n_sets)
        )
        self.mlps = nn.ModuleList(
            StageMLP(config, len(subset)) for _ in range(config.num_stages + 1)
        )

    def conv_set_for(self, stage_index: int) -> ConvChainSet:
        return self.conv_sets[0 if self.share_across_stages else stage_index]

    def _check_stage(self, features: MultiScaleFeatures, stage_index: int) -> None:
        cfg = self.config
        if not 0 <= stage_index <= cfg.num_stages:
            raise InvalidStageError(f"stage {stage_index} outside [0, {cfg.num_stages}]")
        if features.num_scales != cfg.num_scales:
            raise FeatureShapeError(
                f"expected {cfg.num_scales} scales, got {features.num_scales}"
            )
        for j, (h, w) in enumerate(features.grid_shapes):
            if (h, w) != cfg.scale_shape(j):
                raise FeatureShapeError(
                    f"scale {j} grid {h}x{w} != configured {cfg.scale_shape(j)}"
                )

    def downsampled_scales(self, features: MultiScaleFeatures, stage_index: int
                           ) -> list[Tensor]:
        """Per-subset-scale features at the smallest grid, as row matrices."""
        self._check_stage(features, stage_index)
        d = self.config.d_visual
        grids = [
            t.transpose(-1, -2).reshape(-1, d, h, w)
            for t, (h, w) in zip(features.scales, features.grid_shapes)
        ]
        small = self.conv_set_for(stage_index).downsample(grids)
        return [g.flatten(2).transpose(1, 2) for g in small]

    def forward_stage(self, features: MultiScaleFeatures, stage_index: int) -> Tensor:
        """Batched textualization: (B, rows, d_I) pyramid -> (B, d_T)."""
        parts = self.downsampled_scales(features, stage_index)
        return self.mlps[stage_index](torch.cat(parts, dim=1))

    def textualize_stage(self, features: MultiScaleFeatures, stage_index: int
                         ) -> TextualizedStageToken:
        row = self.forward_stage(features, stage_index)
        if row.shape[0] != 1:
            raise FeatureShapeError("textualize_stage expects a single support")
        return TextualizedStageToken(stage_index=stage_index, row=row)


def mstb_param_count(config: OVLMConfig, sharing: bool) -> int:
    """Closed-form learnable parameter count of the textualizer.

    With sharing each stage owns M-1 convolutions; without it each source
    scale owns its chain, M*(M-1)/2 convolutions per stage.  Every stage has
    its own two-layer MLP either way.
    """
    m, d_i, d_t = config.num_scales, config.d_visual, config.d_text
    stages = config.num_stages + 1
    conv_params = 9 * d_i * d_i + d_i
    convs_per_stage = (m - 1) if sharing else m * (m - 1) // 2
    mlp_rows = m * config.smallest_h * config.smallest_w
    mlp_params = (mlp_rows + 1) + (d_i * d_t + d_t)
    return stages * (convs_per_stage * conv_params + mlp_params)
