"""Training loops and gradient verification.

Pretraining fits the whole toy detector on the base split with text-only
prompts.  Textualizer training keeps the detector frozen (parameters not
updated, activations not detached) and optimizes only the textualizer with
decoupled-weight-decay Adam; supports are resampled every epoch.  The
full-fine-tune baseline updates every detector weight on one sampled
support set instead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import NO_OBJECT, OVLMConfig
from .errors import (
    ContaminationError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
)
from .fusion import fuse_shots
from .mstb import MultiScaleTextualizer
from .ovlm import (
    BatchGroundingOutput,
    GroundingOutput,
    TokenSequence,
    ToyOVLM,
    cell_centers,
)
from .prompting import (
    SupportExemplar,
    assemble_prompt,
    encode_support_features,
    shot_tokens_from_features,
)
from .synthdata import DatasetManifest, EpisodeSpec, sample_episode

BOX_LOSS_WEIGHT = 1.0


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Alignment targets and the grounding loss


@dataclass(frozen=True)
class ScaleGeometry:
    """Grid layout of a dense output, concatenated row-major over scales."""

    grid_shapes: tuple[tuple[int, int], ...]
    strides: tuple[int, ...]
    image_size: int

    @staticmethod
    def of_config(config: OVLMConfig) -> "ScaleGeometry":
        return ScaleGeometry(
            grid_shapes=tuple(config.scale_shape(j) for j in range(config.num_scales)),
            strides=tuple(config.stride(j) for j in range(config.num_scales)),
            image_size=config.image_size,
        )

    @staticmethod
    def of_output(out: GroundingOutput | BatchGroundingOutput) -> "ScaleGeometry":
        return ScaleGeometry(
            grid_shapes=tuple(tuple(g) for g in out.grid_shapes),
            strides=tuple(out.strides),
            image_size=out.image_size,
        )


@dataclass
class ImageTargets:
    """Per-image dense targets across all scale cells."""

    class_positive: dict[int, Tensor]   # class id -> (cells,) bool
    box_target: Tensor                  # (cells, 4), stride-normalized offsets
    positive: Tensor                    # (cells,) bool


def _flat_centers(geom: ScaleGeometry) -> tuple[Tensor, Tensor]:
    centers, strides = [], []
    for shape, stride in zip(geom.grid_shapes, geom.strides):
        c = cell_centers(shape, stride, dtype=torch.float64)
        centers.append(c)
        strides.append(torch.full((c.shape[0],), float(stride), dtype=torch.float64))
    return torch.cat(centers), torch.cat(strides)


def image_alignment_targets(boxes, labels, geom: ScaleGeometry) -> ImageTargets:
    """Cell is positive for a class iff its center lies inside one of that
    class's boxes; the smallest containing box supplies the regression target."""
    centers, strides = _flat_centers(geom)
    n = centers.shape[0]
    class_positive: dict[int, Tensor] = {}
    best_area = torch.full((n,), float("inf"), dtype=torch.float64)
    box_target = torch.zeros((n, 4), dtype=torch.float64)
    positive = torch.zeros(n, dtype=torch.bool)
    for (x0, y0, x1, y1), cid in zip(boxes, labels):
        inside = (
            (centers[:, 0] > x0) & (centers[:, 0] < x1)
            & (centers[:, 1] > y0) & (centers[:, 1] < y1)
        )
        if cid not in class_positive:
            class_positive[cid] = torch.zeros(n, dtype=torch.bool)
        class_positive[cid] |= inside
        positive |= inside
        area = (x1 - x0) * (y1 - y0)
        take = inside & (area < best_area)
        if take.any():
            best_area[take] = area
            offsets = torch.stack(
                [centers[:, 0] - x0, centers[:, 1] - y0, x1 - centers[:, 0], y1 - centers[:, 1]],
                dim=-1,
            ) / strides[:, None]
            box_target[take] = offsets[take]
    return ImageTargets(class_positive=class_positive, box_target=box_target,
                        positive=positive)


def targets_to_columns(targets: ImageTargets, token_class_map: list[int],
                       dtype: torch.dtype) -> Tensor:
    """(cells, T) 0/1 matrix; every token of a class is positive at its cells."""
    n = targets.positive.shape[0]
    out = torch.zeros((n, len(token_class_map)), dtype=dtype)
    for t, cid in enumerate(token_class_map):
        if cid != NO_OBJECT and cid in targets.class_positive:
            out[:, t] = targets.class_positive[cid].to(dtype)
    return out


def _loss_from_tensors(logits: Tensor, deltas: Tensor, cls_target: Tensor,
                       box_target: Tensor, positive: Tensor) -> Tensor:
    bce = F.binary_cross_entropy_with_logits(logits, cls_target, reduction="mean")
    if positive.any():
        l1 = (deltas[positive] - box_target[positive]).abs().mean()
    else:
        l1 = logits.new_zeros(())
    return bce + BOX_LOSS_WEIGHT * l1


def compute_grounding_loss(output: GroundingOutput, boxes, labels,
                           token_class_map: list[int]) -> Tensor:
    """Binary cross-entropy over every (cell, token) pair plus mean L1 box
    regression on positive cells, for a single image."""
    if not token_class_map:
        raise InvalidInputError("no prompt tokens")
    logits = torch.cat(output.logits, dim=0)
    deltas = torch.cat(output.box_deltas, dim=0)
    targets = image_alignment_targets(boxes, labels, ScaleGeometry.of_output(output))
    cls_target = targets_to_columns(targets, token_class_map, logits.dtype)
    return _loss_from_tensors(
        logits, deltas, cls_target, targets.box_target.to(deltas.dtype), targets.positive
    )


def batch_grounding_loss(batch: BatchGroundingOutput, image_targets: list[ImageTargets],
                         token_class_map: list[int]) -> Tensor:
    """Loss over a batch of images sharing one prompt."""
    logits = torch.cat(batch.logits, dim=1)
    deltas = torch.cat(batch.box_deltas, dim=1)
    cls_target = torch.stack(
        [targets_to_columns(t, token_class_map, logits.dtype) for t in image_targets]
    )
    box_target = torch.stack([t.box_target.to(deltas.dtype) for t in image_targets])
    positive = torch.stack([t.positive for t in image_targets])
    return _loss_from_tensors(logits, deltas, cls_target, box_target, positive)


# ---------------------------------------------------------------------------
# Shared training plumbing


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, loss: float, lr: float, seed: int) -> None:
        self.rows.append({"epoch": epoch, "loss": loss, "lr": lr, "seed": seed})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "lr", "seed"])
            writer.writeheader()
            writer.writerows(self.rows)


class ImageCache:
    """Pixels and dense targets per image id, shared across epochs."""

    def __init__(self, manifest: DatasetManifest, geom: ScaleGeometry):
        self.manifest = manifest
        self.geom = geom
        self._store: dict[int, tuple[Tensor, ImageTargets]] = {}

    def batch(self, ids: list[int], dtype: torch.dtype) -> tuple[Tensor, list[ImageTargets]]:
        tensors, targets = [], []
        for i in ids:
            if i not in self._store:
                img = self.manifest.load_image(i)
                px = torch.from_numpy(img.pixels).permute(2, 0, 1)
                self._store[i] = (
                    px, image_alignment_targets(img.boxes, img.labels, self.geom)
                )
            px, tg = self._store[i]
            tensors.append(px)
            targets.append(tg)
        return torch.stack(tensors).to(dtype), targets


def guard_against_novel(manifest: DatasetManifest, image_ids) -> None:
    novel = set(manifest.novel_ids)
    for image_id in image_ids:
        rec = manifest.record(image_id)
        if any(lab in novel for lab in rec.labels):
            raise ContaminationError(
                f"novel-class labels reached a training path (image {image_id})"
            )


def text_prompt_with_padding(model: ToyOVLM, manifest: DatasetManifest,
                             class_ids: list[int]) -> TokenSequence:
    """Class-name rows plus the two always-negative padding rows (the OOV
    word and the no-object word), matching the pretraining prompt shape."""
    names = [manifest.classes[c].name for c in class_ids]
    text = model.tokenize_text(names, class_ids)
    return TokenSequence.cat([text, model.padding_tokens()])


def support_exemplars(manifest: DatasetManifest, episode: EpisodeSpec,
                      method: str = "bg_blur") -> list[SupportExemplar]:
    out = []
    for cid in episode.class_subset:
        for image_id in episode.support_ids[cid]:
            img = manifest.load_image(image_id)
            target = [b for b, lab in zip(img.boxes, img.labels) if lab == cid]
            out.append(SupportExemplar(image=img, target_class=cid, target_boxes=target,
                                       engineering_method=method))
    return out


# ---------------------------------------------------------------------------
# Pretraining (text prompts only, base split)


@dataclass
class PretrainResult:
    model: ToyOVLM
    log: TrainLog


def pretrain(manifest: DatasetManifest, config: OVLMConfig, epochs: int = 40,
             seed: int = 0, lr: float = 1e-3, weight_decay: float = 1e-4,
             batch_size: int = 8) -> PretrainResult:
    """Fit the detector on base classes with the text prompt listing every
    base class name.  Never reads novel-class annotations."""
    from .ovlm import build_vocab

    seed_everything(seed)
    vocab = build_vocab(manifest.base_class_names, config.vocab_size)
    model = ToyOVLM(config, vocab)
    image_ids = [r.image_id for c in manifest.base_ids
                 for r in manifest.records_for_class(c)]
    if not image_ids:
        raise InvalidInputError("base split is empty")
    guard_against_novel(manifest, image_ids)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    log = TrainLog()
    cache = ImageCache(manifest, ScaleGeometry.of_config(config))
    rng = np.random.default_rng([seed, 0x7247])
    for epoch in range(epochs):
        order = rng.permutation(len(image_ids))
        epoch_loss, steps = 0.0, 0
        for lo in range(0, len(order), batch_size):
            ids = [image_ids[i] for i in order[lo:lo + batch_size]]
            images, targets = cache.batch(ids, model.param_dtype)
            prompt = text_prompt_with_padding(model, manifest, manifest.base_ids)
            batch, _, _ = model.forward_batch(images, prompt)
            loss = batch_grounding_loss(batch, targets, prompt.token_class_map)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        log.add(epoch + 1, epoch_loss / max(steps, 1), lr, seed)
    return PretrainResult(model=model, log=log)


# ---------------------------------------------------------------------------
# Textualizer training (frozen detector) and the full-fine-tune baseline


@dataclass
class TrainResult:
    model: ToyOVLM
    textualizer: MultiScaleTextualizer | None
    log: TrainLog
    ovlm_bytes_unchanged: bool


def module_bytes(module: torch.nn.Module) -> bytes:
    """Little-endian float32 bytes of all state tensors, sorted by name."""
    parts = []
    for _, tensor in sorted(module.state_dict().items()):
        parts.append(tensor.detach().cpu().numpy().astype("<f4", copy=False).tobytes())
    return b"".join(parts)


def train(model: ToyOVLM, manifest: DatasetManifest, trainable: str,
          k: int = 2, epochs: int = 30, lr: float = 1e-4, weight_decay: float = 0.01,
          seed: int = 0, batch_size: int = 8,
          textualizer: MultiScaleTextualizer | None = None,
          msf_mode: str = "max", shot_fusion_mode: str = "concat",
          prompt_eng: str = "bg_blur",
          queries_per_epoch: int | None = None) -> TrainResult:
    """Train the textualizer through the frozen detector (``mstb_only``) or
    fine-tune every detector weight on one sampled support set, text prompts
    only (``all_weights``)."""
    if trainable not in ("mstb_only", "all_weights"):
        raise InvalidConfigError(f"unknown trainable mode {trainable!r}")
    if trainable == "mstb_only" and textualizer is None:
        raise InvalidConfigError("mstb_only training requires an initialized textualizer")
    seed_everything(seed)
    before = module_bytes(model)
    base_ids = manifest.base_ids
    log = TrainLog()
    cache = ImageCache(manifest, ScaleGeometry.of_config(model.config))
    rng = np.random.default_rng([seed, 0x3EA1])

    if trainable == "mstb_only":
        for p in model.parameters():
            p.requires_grad_(False)
        params = list(textualizer.parameters())
    else:
        params = list(model.parameters())
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)

    base_names = [manifest.classes[c].name for c in base_ids]
    fixed_episode: EpisodeSpec | None = None
    if trainable == "all_weights":
        fixed_episode = sample_episode(manifest, k, base_ids,
                                       seed=int(rng.integers(0, 2**31 - 1)))

    for epoch in range(epochs):
        if trainable == "all_weights":
            episode = fixed_episode
            train_ids = [i for ids in episode.support_ids.values() for i in ids]
        else:
            episode = sample_episode(manifest, k, base_ids,
                                     seed=int(rng.integers(0, 2**31 - 1)))
            train_ids = list(episode.query_ids)
            if queries_per_epoch is not None and queries_per_epoch < len(train_ids):
                pick = rng.choice(len(train_ids), size=queries_per_epoch, replace=False)
                train_ids = [train_ids[i] for i in sorted(pick)]
        guard_against_novel(
            manifest, [i for ids in episode.support_ids.values() for i in ids]
        )
        guard_against_novel(manifest, train_ids)
        order = rng.permutation(len(train_ids))

        support_feats = exemplars = None
        if trainable == "mstb_only":
            exemplars = support_exemplars(manifest, episode, method=prompt_eng)
            support_feats = encode_support_features(
                model, exemplars, text_prompt_with_padding(model, manifest, base_ids)
            )

        epoch_loss, steps = 0.0, 0
        for lo in range(0, len(order), batch_size):
            ids = [train_ids[i] for i in order[lo:lo + batch_size]]
            images, targets = cache.batch(ids, model.param_dtype)
            if trainable == "mstb_only":
                shot_tokens = shot_tokens_from_features(
                    textualizer, support_feats, exemplars, msf_mode=msf_mode
                )
                per_class: dict[int, list] = {}
                for ex, tok in zip(exemplars, shot_tokens):
                    per_class.setdefault(ex.target_class, []).append(tok)
                rows = {c: fuse_shots(t, shot_fusion_mode) for c, t in per_class.items()}
                prompt = assemble_prompt(model.tokenize_text(base_names, base_ids), rows)
                prompt = TokenSequence.cat([prompt, model.padding_tokens()])
            else:
                prompt = text_prompt_with_padding(model, manifest, base_ids)
            batch, _, _ = model.forward_batch(images, prompt)
            loss = batch_grounding_loss(batch, targets, prompt.token_class_map)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            steps += 1
        log.add(epoch + 1, epoch_loss / max(steps, 1), lr, seed)

    for p in model.parameters():
        p.requires_grad_(True)
    unchanged = module_bytes(model) == before
    if trainable == "mstb_only" and not unchanged:
        raise NumericError("frozen detector weights changed during textualizer training")
    return TrainResult(model=model, textualizer=textualizer, log=log,
                       ovlm_bytes_unchanged=unchanged)


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


def finite_diff_grad_check(loss_fn, params: list[Tensor], step: float = 1e-5,
                           num_coords: int = 64, seed: int = 0) -> float:
    """Max relative error between analytic gradients and central differences
    over a random subset of parameter coordinates.

    The denominator is max(|analytic|, |numeric|, 1e-8).  Run the model in
    64-bit mode for meaningful results.
    """
    if not 1e-7 <= step <= 1.0:
        raise InvalidInputError("step outside the supported range")
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError("loss is not finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng([seed, 0xFD1F])
    picks = rng.choice(total, size=min(num_coords, total), replace=False)
    worst = 0.0
    for flat_idx in sorted(int(i) for i in picks):
        pi = 0
        while flat_idx >= sizes[pi]:
            flat_idx -= sizes[pi]
            pi += 1
        p = params[pi]
        with torch.no_grad():
            orig = float(p.view(-1)[flat_idx])
            p.view(-1)[flat_idx] = orig + step
            up = float(loss_fn())
            p.view(-1)[flat_idx] = orig - step
            down = float(loss_fn())
            p.view(-1)[flat_idx] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = float(grads[pi].view(-1)[flat_idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
