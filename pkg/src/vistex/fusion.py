"""Non-parametric fusion of textualized tokens across stages and shots."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import FeatureShapeError, InvalidInputError
from .mstb import TextualizedStageToken

STAGE_FUSION_MODES = ("max", "average", "addition", "concat")
SHOT_FUSION_MODES = ("concat", "max", "average", "addition")


@dataclass
class TextualizedToken:
    """Text-space rows representing one support exemplar.

    One row for the elementwise stage-fusion modes; one row per fused stage
    for concat.  ``source`` records (support image id, class id).
    """

    rows: Tensor
    source: tuple[int, int]

    def __post_init__(self) -> None:
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise FeatureShapeError("token rows must be a non-empty 2-D matrix")


def _stack_rows(rows: list[Tensor]) -> Tensor:
    width = rows[0].shape[-1]
    if any(r.shape[-1] != width for r in rows):
        raise FeatureShapeError("token rows disagree on width")
    return torch.cat([r.reshape(-1, width) for r in rows], dim=0)


def fuse_stages(stage_tokens: list[TextualizedStageToken], mode: str = "max",
                source: tuple[int, int] = (-1, -1)) -> TextualizedToken:
    """Combine per-stage rows into one token; no learnable parameters.

    max / average / addition reduce elementwise over the stage axis to a
    single row; concat keeps one row per stage.
    """
    if not stage_tokens:
        raise InvalidInputError("no stage tokens to fuse")
    if mode not in STAGE_FUSION_MODES:
        raise InvalidInputError(f"unknown stage fusion mode {mode!r}")
    stacked = _stack_rows([t.row for t in stage_tokens])
    if mode == "concat":
        return TextualizedToken(rows=stacked, source=source)
    if mode == "max":
        fused = stacked.max(dim=0, keepdim=True).values
    elif mode == "average":
        fused = stacked.mean(dim=0, keepdim=True)
    else:
        fused = stacked.sum(dim=0, keepdim=True)
    return TextualizedToken(rows=fused, source=source)


def fuse_shots(shot_tokens: list[TextualizedToken], mode: str = "concat") -> Tensor:
    """Combine K shot tokens into prompt rows.

    concat (the default) stacks every shot's rows in input order, keeping
    each shot's identity; the elementwise modes reduce over the shot axis.
    """
    if not shot_tokens:
        raise InvalidInputError("no shot tokens to fuse")
    if mode not in SHOT_FUSION_MODES:
        raise InvalidInputError(f"unknown shot fusion mode {mode!r}")
    if mode == "concat":
        return _stack_rows([t.rows for t in shot_tokens])
    shapes = {tuple(t.rows.shape) for t in shot_tokens}
    if len(shapes) != 1:
        raise FeatureShapeError("elementwise shot fusion needs uniform row shapes")
    stacked = torch.stack([t.rows for t in shot_tokens], dim=0)
    if mode == "max":
        return stacked.max(dim=0).values
    if mode == "average":
        return stacked.mean(dim=0)
    return stacked.sum(dim=0)
