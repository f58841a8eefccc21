"""Detection metrics, episode evaluation and alignment-drift analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import NO_OBJECT
from .decode import Detection, decode_detections
from .errors import InvalidInputError, ProtocolError
from .fusion import fuse_shots
from .mstb import MultiScaleTextualizer
from .ovlm import TokenSequence, ToyOVLM
from .prompting import assemble_prompt, encode_support_features, shot_tokens_from_features
from .synthdata import DatasetManifest, EpisodeSpec

EVAL_MODES = ("zero_shot", "vistex", "full_ft")


def iou(box_a, box_b) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes."""
    area_a = max(box_a[2] - box_a[0], 0.0) * max(box_a[3] - box_a[1], 0.0)
    area_b = max(box_b[2] - box_b[0], 0.0) * max(box_b[3] - box_b[1], 0.0)
    if area_a == 0.0 or area_b == 0.0:
        warnings.warn("degenerate box in IoU", stacklevel=2)
        return 0.0
    ix = max(0.0, min(box_a[2], box_b[2]) - max(box_a[0], box_b[0]))
    iy = max(0.0, min(box_a[3], box_b[3]) - max(box_a[1], box_b[1]))
    inter = ix * iy
    if inter == 0.0:
        return 0.0
    return inter / (area_a + area_b - inter)


@dataclass
class APResult:
    per_class: dict[int, float]
    skipped_classes: list[int] = field(default_factory=list)

    def mean_over(self, class_ids) -> float:
        values = [self.per_class[c] for c in class_ids if c in self.per_class]
        return float(np.mean(values)) if values else 0.0


def average_precision(detections: dict[int, list[Detection]],
                      ground_truth: dict[int, list[tuple[tuple, int]]],
                      iou_threshold: float = 0.5) -> APResult:
    """Per-class all-points-interpolated AP at one IoU threshold.

    Detections are greedily matched in score order to the not-yet-matched
    ground-truth box of highest IoU.  Classes without any ground truth are
    recorded as skipped rather than scored.
    """
    classes_gt: dict[int, int] = {}
    for gts in ground_truth.values():
        for _, cid in gts:
            classes_gt[cid] = classes_gt.get(cid, 0) + 1
    det_classes = {d.class_id for dets in detections.values() for d in dets}

    result = APResult(per_class={}, skipped_classes=sorted(det_classes - set(classes_gt)))
    for cid, n_gt in sorted(classes_gt.items()):
        scored: list[tuple[float, int, int]] = []     # (score, image, det index)
        for image_id, dets in detections.items():
            for di, d in enumerate(dets):
                if d.class_id == cid:
                    scored.append((d.score, image_id, di))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        matched: dict[int, set[int]] = {}
        tps = np.zeros(len(scored))
        for rank, (_, image_id, di) in enumerate(scored):
            det = detections[image_id][di]
            gts = [g for g in ground_truth.get(image_id, []) if g[1] == cid]
            used = matched.setdefault(image_id, set())
            best_iou, best_gi = 0.0, -1
            for gi, (gbox, _) in enumerate(gts):
                if gi in used:
                    continue
                v = iou(det.box, gbox)
                if v > best_iou:
                    best_iou, best_gi = v, gi
            if best_gi >= 0 and best_iou >= iou_threshold:
                used.add(best_gi)
                tps[rank] = 1.0
        tp_cum = np.cumsum(tps)
        fp_cum = np.cumsum(1.0 - tps)
        recall = tp_cum / n_gt
        precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
        result.per_class[cid] = _all_points_ap(recall, precision)
    return result


def _all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope across all recall change points."""
    if recall.size == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# ---------------------------------------------------------------------------
# Episode evaluation


@dataclass
class MetricsReport:
    mode: str
    k: int
    seed: int
    ap50: float
    bap50: float
    nap50: float
    per_class: dict[int, float]
    skipped_classes: list[int] = field(default_factory=list)
    config_hash: str = ""

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode, "K": self.k, "seed": self.seed,
            "AP50": self.ap50, "bAP50": self.bap50, "nAP50": self.nap50,
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "config_hash": self.config_hash,
        }


def build_eval_prompt(model: ToyOVLM, textualizer: MultiScaleTextualizer | None,
                      manifest: DatasetManifest, episode: EpisodeSpec, mode: str,
                      prompt_eng: str = "bg_blur", msf_mode: str = "max",
                      shot_fusion_mode: str = "concat",
                      stage_subset: list[int] | None = None) -> TokenSequence:
    """Assemble the query-time prompt for an evaluation mode."""
    from .training import support_exemplars, text_prompt_with_padding

    if mode not in EVAL_MODES:
        raise InvalidInputError(f"unknown evaluation mode {mode!r}")
    class_ids = list(episode.class_subset)
    if mode in ("zero_shot", "full_ft"):
        return text_prompt_with_padding(model, manifest, class_ids)
    if textualizer is None:
        raise InvalidInputError("vistex mode requires a textualizer checkpoint")
    exemplars = support_exemplars(manifest, episode, method=prompt_eng)
    encode_tokens = text_prompt_with_padding(model, manifest, class_ids)
    with torch.no_grad():
        feats = encode_support_features(model, exemplars, encode_tokens)
        tokens = shot_tokens_from_features(textualizer, feats, exemplars,
                                           msf_mode=msf_mode, stage_subset=stage_subset)
        per_class: dict[int, list] = {}
        for ex, tok in zip(exemplars, tokens):
            per_class.setdefault(ex.target_class, []).append(tok)
        rows = {c: fuse_shots(t, shot_fusion_mode) for c, t in per_class.items()}
        names = [manifest.classes[c].name for c in class_ids]
        prompt = assemble_prompt(model.tokenize_text(names, class_ids), rows)
        return TokenSequence.cat([prompt, model.padding_tokens()])


def evaluate_fsod(model: ToyOVLM, textualizer: MultiScaleTextualizer | None,
                  manifest: DatasetManifest, episode: EpisodeSpec, mode: str,
                  prompt_eng: str = "bg_blur", msf_mode: str = "max",
                  shot_fusion_mode: str = "concat",
                  stage_subset: list[int] | None = None,
                  score_threshold: float = 0.3, nms_iou: float = 0.5,
                  seed: int = 0, batch_size: int = 16) -> MetricsReport:
    """Run one episode and report AP50 with base/novel splits.

    No weights are updated in any mode; the prompt is built once and reused
    for every query image.
    """
    support = {i for ids in episode.support_ids.values() for i in ids}
    if support & set(episode.query_ids):
        raise ProtocolError("support images leaked into the query set")
    prompt = build_eval_prompt(model, textualizer, manifest, episode, mode,
                               prompt_eng=prompt_eng, msf_mode=msf_mode,
                               shot_fusion_mode=shot_fusion_mode,
                               stage_subset=stage_subset)
    detections: dict[int, list[Detection]] = {}
    ground_truth: dict[int, list[tuple[tuple, int]]] = {}
    queries = list(episode.query_ids)
    with torch.no_grad():
        for lo in range(0, len(queries), batch_size):
            ids = queries[lo:lo + batch_size]
            images = torch.stack([
                torch.from_numpy(manifest.load_image(i).pixels).permute(2, 0, 1)
                for i in ids
            ]).to(model.param_dtype)
            batch, _, _ = model.forward_batch(images, prompt)
            for bi, image_id in enumerate(ids):
                detections[image_id] = decode_detections(
                    batch.image(bi), prompt.token_class_map,
                    score_threshold=score_threshold, nms_iou=nms_iou,
                )
                rec = manifest.record(image_id)
                ground_truth[image_id] = list(zip(rec.boxes, rec.labels))
    ap = average_precision(detections, ground_truth, iou_threshold=0.5)
    subset = set(episode.class_subset)
    base = [c for c in manifest.base_ids if c in subset]
    novel = [c for c in manifest.novel_ids if c in subset]
    return MetricsReport(
        mode=mode, k=episode.k, seed=seed,
        ap50=ap.mean_over(sorted(subset)),
        bap50=ap.mean_over(base),
        nap50=ap.mean_over(novel),
        per_class=ap.per_class,
        skipped_classes=ap.skipped_classes,
    )


# ---------------------------------------------------------------------------
# Alignment-drift analysis


@dataclass
class AlignmentReport:
    bin_edges: np.ndarray
    freq_a: np.ndarray
    freq_b: np.ndarray
    sym_kl: float
    emd: float

    def stats_dict(self) -> dict:
        return {"sym_kl": self.sym_kl, "emd": self.emd}


def collect_alignment_samples(manifest: DatasetManifest, limit: int = 200
                              ) -> list[tuple[int, tuple, int]]:
    """(image id, box, class id) triples from the base split, in id order."""
    samples = []
    for cid in manifest.base_ids:
        for rec in manifest.records_for_class(cid):
            for box, lab in zip(rec.boxes, rec.labels):
                samples.append((rec.image_id, box, lab))
    samples.sort()
    return samples[:limit]


def _object_text_cosines(model: ToyOVLM, manifest: DatasetManifest,
                         samples: list[tuple[int, tuple, int]],
                         batch_size: int = 16) -> np.ndarray:
    """Cosine between each object's text-space region feature and its class
    token, both taken from the final encoder stage.

    The object feature is the grounding head's text-space projection of the
    final-stage region row at the box's center cell on the largest scale.
    """
    from .training import text_prompt_with_padding

    prompt = text_prompt_with_padding(model, manifest, manifest.base_ids)
    col_of_class = {c: i for i, c in enumerate(prompt.token_class_map) if c != NO_OBJECT}
    by_image: dict[int, list[tuple[tuple, int]]] = {}
    for image_id, box, cid in samples:
        by_image.setdefault(image_id, []).append((box, cid))
    image_ids = sorted(by_image)
    cfg = model.config
    stride = cfg.stride(0)
    cosines = []
    with torch.no_grad():
        for lo in range(0, len(image_ids), batch_size):
            ids = image_ids[lo:lo + batch_size]
            images = torch.stack([
                torch.from_numpy(manifest.load_image(i).pixels).permute(2, 0, 1)
                for i in ids
            ]).to(model.param_dtype)
            batch_out, region_stages, token_stages = model.forward_batch(images, prompt)
            final_rows = region_stages[-1].scales[0]           # B x cells x d_I
            text_space = model.head.text_space_region(final_rows)
            tokens = token_stages[-1]                          # B x T x d_T
            for bi, image_id in enumerate(ids):
                for box, cid in by_image[image_id]:
                    cx = min(int((box[0] + box[2]) / 2 / stride), cfg.grid_w - 1)
                    cy = min(int((box[1] + box[3]) / 2 / stride), cfg.grid_h - 1)
                    feat = text_space[bi, cy * cfg.grid_w + cx]
                    tok = tokens[bi, col_of_class[cid]]
                    denom = feat.norm() * tok.norm()
                    cosines.append(float(feat @ tok / denom) if denom > 0 else 0.0)
    return np.asarray(cosines)


def alignment_histogram(model_a: ToyOVLM, model_b: ToyOVLM, manifest: DatasetManifest,
                        samples: list[tuple[int, tuple, int]], bins: int = 64
                        ) -> AlignmentReport:
    """Object-text cosine-similarity distributions of two checkpoints on the
    same base-domain samples, with symmetric KL and earth-mover distances."""
    if not samples:
        raise InvalidInputError("no alignment samples given")
    cos_a = _object_text_cosines(model_a, manifest, samples)
    cos_b = _object_text_cosines(model_b, manifest, samples)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    freq_a = np.histogram(cos_a, bins=edges)[0] / len(cos_a)
    freq_b = np.histogram(cos_b, bins=edges)[0] / len(cos_b)
    return AlignmentReport(
        bin_edges=edges, freq_a=freq_a, freq_b=freq_b,
        sym_kl=symmetric_kl(freq_a, freq_b),
        emd=earth_mover_distance(freq_a, freq_b, edges),
    )


def symmetric_kl(p: np.ndarray, q: np.ndarray, eps: float = 1e-12) -> float:
    """KL(p||q) + KL(q||p) on epsilon-smoothed histograms; exactly 0 iff equal."""
    if np.array_equal(p, q):
        return 0.0
    ps = (p + eps) / (p + eps).sum()
    qs = (q + eps) / (q + eps).sum()
    return float(np.sum(ps * np.log(ps / qs)) + np.sum(qs * np.log(qs / ps)))


def earth_mover_distance(p: np.ndarray, q: np.ndarray, edges: np.ndarray) -> float:
    """1-D Wasserstein distance between two binned distributions."""
    widths = np.diff(edges)
    return float(np.sum(np.abs(np.cumsum(p) - np.cumsum(q)) * widths))
