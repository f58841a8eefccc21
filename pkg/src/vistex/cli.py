"""Command-line entry point.

Subcommands: gen-data, pretrain, train, eval, ablate, analyze-alignment.
Exit codes: 0 success, 1 usage error, 2 data / contamination error.
Flag values take precedence over --config file entries, which take
precedence over built-in defaults; every output embeds the effective
config hash.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .config import DataConfig, OVLMConfig, config_hash
from .errors import VistexError
from .fusion import SHOT_FUSION_MODES, STAGE_FUSION_MODES
from .prompting import ENGINEERING_METHODS

MODE_NAMES = {"zs": "zero_shot", "vistex": "vistex", "ff": "full_ft"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _apply_thread_cap() -> None:
    cap = os.environ.get("VISTEX_THREADS")
    if cap:
        import torch

        torch.set_num_threads(max(int(cap), 1))


def parse_stage_subset(spec: str | None, num_stages: int) -> list[int] | None:
    """Parse stage subsets like "0-2", "2" or "0,2"."""
    if spec is None:
        return None
    parts = []
    for chunk in spec.split(","):
        if "-" in chunk:
            lo, hi = chunk.split("-", 1)
            parts.extend(range(int(lo), int(hi) + 1))
        else:
            parts.append(int(chunk))
    subset = sorted(set(parts))
    if any(not 0 <= i <= num_stages for i in subset):
        raise UsageError(f"stage subset {spec!r} outside 0..{num_stages}")
    return subset


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults, for every key in ``defaults``."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def build_parser() -> _Parser:
    parser = _Parser(prog="vistex", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, dest="num_classes", default=None)
    p.add_argument("--num-novel", type=int, dest="num_novel", default=None)
    p.add_argument("--images-per-class", type=int, dest="images_per_class", default=None)

    p = sub.add_parser("pretrain", help="pretrain the detector on base classes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("train", help="train the textualizer or fine-tune everything")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ovlm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trainable", choices=["mstb", "all"], required=True)
    p.add_argument("--shots", "-k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, dest="weight_decay", default=None)
    p.add_argument("--msf", choices=STAGE_FUSION_MODES, default=None)
    p.add_argument("--shot-fusion", choices=SHOT_FUSION_MODES, dest="shot_fusion", default=None)
    p.add_argument("--prompt-eng", choices=ENGINEERING_METHODS, dest="prompt_eng", default=None)
    p.add_argument("--no-sharing", action="store_true",
                   help="independent conv chains per scale (ablation)")

    p = sub.add_parser("eval", help="evaluate an episode")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ovlm", required=True)
    p.add_argument("--mstb", default=None)
    p.add_argument("--mode", choices=sorted(MODE_NAMES), required=True)
    p.add_argument("--shots", "-k", type=int, default=None)
    p.add_argument("--msf", choices=STAGE_FUSION_MODES, default=None)
    p.add_argument("--shot-fusion", choices=SHOT_FUSION_MODES, dest="shot_fusion", default=None)
    p.add_argument("--prompt-eng", choices=ENGINEERING_METHODS, dest="prompt_eng", default=None)
    p.add_argument("--stages", default=None, help="stage subset, e.g. 0-2")
    p.add_argument("--score-threshold", type=float, dest="score_threshold", default=None)
    p.add_argument("--json", dest="json_out", default=None)

    p = sub.add_parser("ablate", help="run one ablation sweep")
    common(p)
    p.add_argument("--what", required=True,
                   choices=["scales", "stages", "msf", "shot-fusion", "prompt-eng", "sharing"])
    p.add_argument("--data", required=True)
    p.add_argument("--ovlm", required=True)
    p.add_argument("--mstb", default=None, help="trained textualizer for eval-time sweeps")
    p.add_argument("--out", required=True)
    p.add_argument("--shots", "-k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="epochs for retraining sweeps")

    p = sub.add_parser("analyze-alignment", help="object-text cosine drift of two checkpoints")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ovlm", required=True, help="checkpoint A")
    p.add_argument("--ovlm-b", dest="ovlm_b", required=True, help="checkpoint B")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--csv", dest="csv_out", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations


def _cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset, validate_manifest

    cfg = _resolve(args, {"seed": 0, "num_classes": 16, "num_novel": 4,
                          "images_per_class": 80})
    data_cfg = DataConfig(num_classes=cfg["num_classes"], num_novel=cfg["num_novel"],
                          images_per_class=cfg["images_per_class"])
    manifest = generate_dataset(data_cfg, args.out, seed=cfg["seed"])
    validate_manifest(manifest)
    print(f"wrote {len(manifest.images)} images to {args.out} "
          f"(config {config_hash(data_cfg.to_dict(), {'seed': cfg['seed']})})")
    return 0


def _cmd_pretrain(args) -> int:
    from .checkpoint import save_ovlm
    from .synthdata import load_manifest
    from .training import pretrain

    cfg = _resolve(args, {"seed": 0, "epochs": 40, "lr": 1e-3})
    manifest = load_manifest(args.data)
    model_cfg = OVLMConfig()
    result = pretrain(manifest, model_cfg, epochs=cfg["epochs"], seed=cfg["seed"],
                      lr=cfg["lr"])
    meta = {"epochs": cfg["epochs"], "seed": cfg["seed"],
            "config_hash": config_hash(model_cfg.to_dict(), cfg)}
    out = save_ovlm(result.model, args.out, metadata=meta)
    result.log.write_csv(Path(args.out) / "train_log.csv")
    print(f"pretrained checkpoint at {out} (final loss {result.log.rows[-1]['loss']:.4f})")
    return 0


def _cmd_train(args) -> int:
    from .checkpoint import load_ovlm, save_mstb, save_ovlm
    from .mstb import MultiScaleTextualizer
    from .synthdata import load_manifest
    from .training import train

    cfg = _resolve(args, {"seed": 0, "shots": 2, "epochs": 30, "lr": 1e-4,
                          "weight_decay": 0.01, "msf": "max",
                          "shot_fusion": "concat", "prompt_eng": "bg_blur"})
    manifest = load_manifest(args.data)
    model, ovlm_ckpt = load_ovlm(args.ovlm)
    trainable = "mstb_only" if args.trainable == "mstb" else "all_weights"
    textualizer = None
    if trainable == "mstb_only":
        textualizer = MultiScaleTextualizer(
            model.config, share_scale_convs=not args.no_sharing
        )
    result = train(
        model, manifest, trainable, k=cfg["shots"], epochs=cfg["epochs"],
        lr=cfg["lr"], weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        textualizer=textualizer, msf_mode=cfg["msf"],
        shot_fusion_mode=cfg["shot_fusion"], prompt_eng=cfg["prompt_eng"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"epochs": cfg["epochs"], "seed": cfg["seed"], "k": cfg["shots"],
            "config_hash": config_hash(model.config.to_dict(), cfg)}
    if trainable == "mstb_only":
        save_mstb(result.textualizer, out / "mstb", metadata=meta)
        # re-serialize the detector with its original metadata: the result
        # must be byte-identical to the input checkpoint
        save_ovlm(result.model, out / "ovlm", metadata=ovlm_ckpt.metadata)
        print(f"textualizer at {out / 'mstb'}; detector bytes unchanged: "
              f"{result.ovlm_bytes_unchanged}")
    else:
        save_ovlm(result.model, out / "ovlm", metadata=meta)
        print(f"fine-tuned detector at {out / 'ovlm'}")
    result.log.write_csv(out / "train_log.csv")
    return 0


def _episode_for(manifest, k: int, seed: int):
    from .synthdata import sample_episode

    return sample_episode(manifest, k, manifest.all_class_ids, seed=seed)


def _run_eval(args, cfg, manifest, model, textualizer, mode,
              msf=None, shot_fusion=None, prompt_eng=None, stages=None):
    from .evaluation import evaluate_fsod

    episode = _episode_for(manifest, cfg["shots"], cfg["seed"])
    report = evaluate_fsod(
        model, textualizer, manifest, episode, mode,
        prompt_eng=prompt_eng or cfg["prompt_eng"],
        msf_mode=msf or cfg["msf"],
        shot_fusion_mode=shot_fusion or cfg["shot_fusion"],
        stage_subset=stages,
        score_threshold=cfg["score_threshold"],
        seed=cfg["seed"],
    )
    report.config_hash = config_hash(model.config.to_dict(), cfg)
    return report


def _cmd_eval(args) -> int:
    from .checkpoint import load_mstb, load_ovlm
    from .synthdata import load_manifest

    cfg = _resolve(args, {"seed": 0, "shots": 2, "msf": "max", "shot_fusion": "concat",
                          "prompt_eng": "bg_blur", "score_threshold": 0.3})
    manifest = load_manifest(args.data)
    model, _ = load_ovlm(args.ovlm)
    mode = MODE_NAMES[args.mode]
    textualizer = None
    if args.mstb:
        textualizer, _ = load_mstb(args.mstb)
    stages = parse_stage_subset(args.stages, model.config.num_stages)
    report = _run_eval(args, cfg, manifest, model, textualizer, mode, stages=stages)
    doc = json.dumps(report.to_json_dict(), indent=1, sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(doc)
    print(doc)
    return 0


def _cmd_ablate(args) -> int:
    from .checkpoint import load_mstb, load_ovlm
    from .mstb import MultiScaleTextualizer
    from .synthdata import load_manifest
    from .training import train

    cfg = _resolve(args, {"seed": 0, "shots": 2, "epochs": 10, "msf": "max",
                          "shot_fusion": "concat", "prompt_eng": "bg_blur",
                          "score_threshold": 0.3})
    manifest = load_manifest(args.data)
    model, _ = load_ovlm(args.ovlm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells: list[tuple[str, dict]] = []

    def eval_cell(name: str, textualizer, **kw) -> None:
        report = _run_eval(args, cfg, manifest, model, textualizer, "vistex", **kw)
        path = out / f"{name}.json"
        path.write_text(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
        cells.append((name, report.to_json_dict()))

    needs_ckpt = args.what in ("msf", "shot-fusion", "prompt-eng", "stages")
    if needs_ckpt:
        if not args.mstb:
            raise UsageError(f"--what {args.what} needs a trained --mstb checkpoint")
        textualizer, _ = load_mstb(args.mstb)
        if args.what == "msf":
            for mode in STAGE_FUSION_MODES:
                eval_cell(f"msf_{mode}", textualizer, msf=mode)
        elif args.what == "shot-fusion":
            for mode in SHOT_FUSION_MODES:
                eval_cell(f"shot_fusion_{mode}", textualizer, shot_fusion=mode)
        elif args.what == "prompt-eng":
            for method in ENGINEERING_METHODS:
                eval_cell(f"prompt_eng_{method}", textualizer, prompt_eng=method)
        else:
            n = model.config.num_stages
            subsets = {"first": [0], "first_half": list(range(n // 2 + 1)),
                       "all": list(range(n + 1)), "last_half": list(range(n // 2 + 1, n + 1)),
                       "last": [n]}
            for name, subset in subsets.items():
                eval_cell(f"stages_{name}", textualizer, stages=subset)
    elif args.what == "sharing":
        for share in (True, False):
            tex = MultiScaleTextualizer(model.config, share_scale_convs=share)
            train(model, manifest, "mstb_only", k=cfg["shots"], epochs=cfg["epochs"],
                  seed=cfg["seed"], textualizer=tex)
            eval_cell(f"sharing_{'on' if share else 'off'}", tex)
    else:  # scales
        m = model.config.num_scales
        subsets = [list(range(j + 1)) for j in range(m)]
        for subset in subsets:
            tex = MultiScaleTextualizer(model.config, share_scale_convs=False,
                                        scale_subset=subset)
            train(model, manifest, "mstb_only", k=cfg["shots"], epochs=cfg["epochs"],
                  seed=cfg["seed"], textualizer=tex)
            eval_cell(f"scales_{'-'.join(map(str, subset))}_nosharing", tex)
        tex = MultiScaleTextualizer(model.config, share_scale_convs=True)
        train(model, manifest, "mstb_only", k=cfg["shots"], epochs=cfg["epochs"],
              seed=cfg["seed"], textualizer=tex)
        eval_cell("scales_all_sharing", tex)

    for name, doc in cells:
        print(f"{name}: AP50={doc['AP50']:.3f} bAP50={doc['bAP50']:.3f} "
              f"nAP50={doc['nAP50']:.3f}")
    return 0


def _cmd_analyze_alignment(args) -> int:
    from .checkpoint import load_ovlm
    from .evaluation import alignment_histogram, collect_alignment_samples
    from .synthdata import load_manifest

    cfg = _resolve(args, {"seed": 0, "samples": 200, "bins": 64})
    manifest = load_manifest(args.data)
    model_a, _ = load_ovlm(args.ovlm)
    model_b, _ = load_ovlm(args.ovlm_b)
    samples = collect_alignment_samples(manifest, limit=cfg["samples"])
    report = alignment_histogram(model_a, model_b, manifest, samples, bins=cfg["bins"])
    if args.csv_out:
        with open(args.csv_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "freq_A", "freq_B"])
            for i in range(len(report.freq_a)):
                writer.writerow([report.bin_edges[i], report.bin_edges[i + 1],
                                 report.freq_a[i], report.freq_b[i]])
    doc = json.dumps(report.stats_dict(), indent=1, sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(doc)
    print(doc)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "analyze-alignment": _cmd_analyze_alignment,
}


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        _apply_thread_cap()
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (VistexError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
