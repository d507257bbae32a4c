"""
mask-fusion command line: corpus generation, training, inference, baselines,
evaluation, hyper-parameter sweeps and ablation reports.
"""

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..core import config as C
from ..core.classicreg import ClassicAligner
from ..core.error_trace import logger
from ..core.errors import CheckpointError, DataError, MaskFusionError
from ..core.fuse import fusion_report, infer_subset, write_fusion
from ..core.logging_config import setup_logging
from ..core.metrics import evaluate, summarize
from ..core.nets import AlignNet, Segmentor, load_checkpoint
from ..core.synth import Corpus, build_corpus
from ..core.train import (
    fusion_dsc,
    intertwined_finetune,
    load_grid,
    load_phase1,
    sweep,
    train_phase1,
    train_unet_hr,
    train_unet_lr,
    write_run,
)
from ..core.volume import read_volume

INFER_MANIFEST = "infer_manifest.json"
METRIC_KEYS = ("dsc", "us", "os", "rms", "mba")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file layered over the defaults")
    parser.add_argument(
        "--desk", action="store_true", help="use the scaled-down desk profile (N=64, d=8, short runs)"
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    parser.add_argument("--log-dir", help="log directory (default: MASK_FUSION_LOG_DIR or paths.log_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mask-fusion",
        description="Multi-view LR MRI registration, segmentation and Gaussian mask fusion",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    gen = sub.add_parser("gen-data", help="generate a synthetic phantom corpus")
    gen.add_argument("--n-train", type=int, help=f"training studies (default: {C.N_TRAIN})")
    gen.add_argument("--n-test", type=int, help=f"test studies (default: {C.N_TEST})")
    gen.add_argument("--n-eval", type=int, help=f"training studies held out for sweeps (default: {C.N_EVAL})")
    gen.add_argument("--d-vox", type=int, choices=C.SLICE_DISTANCES, help="slice distance in voxels (default: 8)")
    gen.add_argument("--size", type=int, help=f"grid extent N (default: {C.REFERENCE_GRID})")
    gen.add_argument("--seed", type=int, help="root seed (default: 0)")
    gen.add_argument("--workers", type=int, help="generator threads (default: 1)")
    gen.add_argument("--out", help="corpus directory (default: paths.data_dir)")
    _common(gen)

    train = sub.add_parser("train", help="train models", formatter_class=fmt)
    train.add_argument("stage", choices=("phase1", "phase2", "unet-lr", "unet-hr"))
    train.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    train.add_argument("--out", help="output directory (default: paths.runs_dir/<command>)")
    train.add_argument("--init", help="phase-1 run directory (required for phase2)")
    train.add_argument("--supervised", action="store_true", help="train the aligner with the mask term")
    train.add_argument("--cons2-target", choices=C.CONS2_TARGETS, default=None)
    _common(train)

    infer = sub.add_parser("infer", help="align, segment and fuse test studies", formatter_class=fmt)
    infer.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    infer.add_argument("--seg", required=True, help="segmentor checkpoint (.json)")
    infer.add_argument("--align", required=True, help="aligner checkpoint (.json)")
    infer.add_argument("--views", type=int, choices=(1, 2, 3), default=3)
    infer.add_argument("--fusion", choices=C.FUSION_METHODS, default="gaussian")
    infer.add_argument("--split", default="test")
    infer.add_argument("--out", help="output directory (default: paths.runs_dir/<command>)")
    _common(infer)

    baseline = sub.add_parser("baseline", help="classical-registration baselines", formatter_class=fmt)
    baseline.add_argument("kind", choices=("classic-reg",))
    baseline.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    baseline.add_argument("--seg", required=True, help="segmentor checkpoint, usually a unet-lr run")
    baseline.add_argument("--mode", choices=("img", "msk"), default="img")
    baseline.add_argument("--fusion", choices=("nearest", "vote"), default="nearest")
    baseline.add_argument("--views", type=int, choices=(1, 2, 3), default=3)
    baseline.add_argument("--split", default="test")
    baseline.add_argument("--out", help="output directory (default: paths.runs_dir/<command>)")
    _common(baseline)

    ev = sub.add_parser("eval", help="score fused masks against HR ground truth")
    ev.add_argument("--pred", required=True, nargs="+", help="one prediction directory per repeated run")
    ev.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    ev.add_argument("--split", default="test", help="corpus split to score (default: test)")
    ev.add_argument("--tau", type=int, default=None, help=f"boundary tolerance in voxels (default: {C.BOUNDARY_TOLERANCE})")
    ev.add_argument("--out", help="report JSON path (default: under paths.runs_dir)")
    _common(ev)

    sw = sub.add_parser("sweep", help="loss-weight sweep ranked on the eval split", formatter_class=fmt)
    sw.add_argument("--grid", required=True, help='JSON list of loss weights, or a file containing "reference"')
    sw.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    sw.add_argument("--out", help="output directory (default: paths.runs_dir/<command>)")
    _common(sw)

    report = sub.add_parser("report", help="comparison reports", formatter_class=fmt)
    report.add_argument("kind", choices=("ablation",))
    report.add_argument("--data", help="corpus directory (default: paths.data_dir)")
    report.add_argument("--phase1", required=True, help="phase-1 run directory")
    report.add_argument("--phase2", required=True, help="phase-2 run directory")
    report.add_argument("--split", default="test")
    report.add_argument("--out", help="report JSON path (default: under paths.runs_dir)")
    _common(report)
    return parser


def _config(args: argparse.Namespace, extra: Sequence[str] = ()) -> C.PipelineConfig:
    return C.load_config(args.config, args.desk, list(extra) + list(args.overrides))


def _data_dir(args: argparse.Namespace, cfg: C.PipelineConfig) -> str:
    return args.data or cfg.paths.data_dir


def _out_path(args: argparse.Namespace, cfg: C.PipelineConfig, name: str) -> str:
    """--out when given, otherwise name under paths.runs_dir."""
    return args.out or str(Path(cfg.paths.runs_dir) / name)


def _log_dir(args: argparse.Namespace) -> Optional[str]:
    if args.log_dir or os.getenv("MASK_FUSION_LOG_DIR"):
        return args.log_dir
    try:
        return _config(args).paths.log_dir
    except MaskFusionError:
        # the command reports the config error once logging is up
        return None


def _output_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DataError("output directory is not empty (use --force)", {"path": str(out)})
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _output_file(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise DataError("output file exists (use --force)", {"path": str(out)})
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Report written", {"path": str(path)})
    return path


def _load_model(path: str, kind: type) -> Any:
    model = load_checkpoint(path)
    if not isinstance(model, kind):
        raise CheckpointError(
            "checkpoint holds the wrong model", {"path": path, "expected": kind.__name__}
        )
    return model.eval()


def _studies(corpus: Corpus, split: str) -> list:
    studies = corpus.prepared(split)
    if not studies:
        raise DataError("no studies in split", {"split": split, "path": str(corpus.root)})
    return studies


GEN_FLAGS = ("n_train", "n_test", "d_vox", "size", "seed", "workers", "n_eval")


def cmd_gen_data(args: argparse.Namespace) -> int:
    extra = [f"data.{name}={getattr(args, name)}" for name in GEN_FLAGS if getattr(args, name) is not None]
    layered = _config(args).data
    n_train = args.n_train if args.n_train is not None else layered.n_train
    if args.n_eval is None and layered.n_eval >= n_train:
        # small corpora keep every training study for training
        extra.append("data.n_eval=0")
    cfg = _config(args, extra)
    data = cfg.data
    out = args.out or cfg.paths.data_dir
    manifest = build_corpus(
        out,
        n_train=data.n_train,
        n_test=data.n_test,
        d_vox=data.d_vox,
        seed=data.seed,
        size=data.size,
        n_eval=data.n_eval,
        noise_sigma=data.noise_sigma,
        max_rotation_deg=data.max_rotation_deg,
        max_translation_vox=data.max_translation_vox,
        contrast_jitter=data.contrast_jitter,
        force=args.force,
        workers=data.workers,
    )
    print(json.dumps({"studies": len(manifest["studies"]), "out": out}))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    extra = []
    if args.supervised:
        extra.append("train.supervised_aligner=true")
    if args.cons2_target:
        extra.append(f"fusion.cons2_target={json.dumps(args.cons2_target)}")
    cfg = _config(args, extra)
    corpus = Corpus.open(_data_dir(args, cfg))
    if args.stage == "phase2" and not args.init:
        raise CheckpointError("phase2 needs --init pointing at a phase-1 run directory")
    out = _output_dir(_out_path(args, cfg, args.stage), args.force)
    if args.stage == "phase1":
        result = train_phase1(corpus, cfg.train)
    elif args.stage == "phase2":
        S, G = load_phase1(args.init)
        result = intertwined_finetune(S, G, corpus, cfg.train, cfg.fusion.cons2_target)
        result.manifest.extra["init"] = str(args.init)
    elif args.stage == "unet-lr":
        result = train_unet_lr(corpus, cfg.train)
    else:
        result = train_unet_hr(corpus, cfg.train)
    result.manifest.config = cfg.to_dict()
    result.manifest.extra["command"] = ["train", args.stage]
    path = write_run(result, out)
    print(json.dumps({"manifest": str(path)}))
    return 0


def _run_inference(
    args: argparse.Namespace,
    cfg: C.PipelineConfig,
    S: Segmentor,
    aligner: Callable,
    method: str,
    order: str,
    checkpoints: Dict[str, str],
) -> int:
    corpus = Corpus.open(_data_dir(args, cfg))
    studies = _studies(corpus, args.split)
    out = _output_dir(_out_path(args, cfg, args.command), args.force)
    summary = []
    for study in studies:
        result = infer_subset(
            study.images,
            S,
            aligner,
            study.slice_distance_vox,
            args.views,
            method,
            cfg.fusion.sigma_vox,
            cfg.fusion.threshold,
            order,
        )
        report = fusion_report(result, study)
        write_fusion(result, out / study.study_id, report)
        summary.append({"study": study.study_id, "fused_dsc": report["fused_dsc"]})
    _write_json(
        out / INFER_MANIFEST,
        {
            "command": sys.argv[1:],
            "config": cfg.to_dict(),
            "dataset_hash": corpus.dataset_hash,
            "checkpoints": checkpoints,
            "views": args.views,
            "method": method,
            "order": order,
            "split": args.split,
            "studies": summary,
        },
    )
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = _config(args, [f"fusion.method={json.dumps(args.fusion)}", f"fusion.views={args.views}"])
    S = _load_model(args.seg, Segmentor)
    G = _load_model(args.align, AlignNet)
    return _run_inference(
        args, cfg, S, G, args.fusion, "align-then-segment", {"seg": args.seg, "align": args.align}
    )


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _config(args)
    S = _load_model(args.seg, Segmentor)
    aligner = ClassicAligner(cfg.classicreg, on_masks=args.mode == "msk")
    order = "segment-then-align" if args.mode == "msk" else "align-then-segment"
    return _run_inference(args, cfg, S, aligner, args.fusion, order, {"seg": args.seg})


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args, [f"eval.tau={args.tau}"] if args.tau is not None else [])
    tau = cfg.eval.tau
    corpus = Corpus.open(_data_dir(args, cfg))
    entries = corpus.entries(args.split)
    if not entries:
        raise DataError("no studies in split", {"split": args.split})
    out = _output_file(_out_path(args, cfg, "eval_report.json"), args.force)
    runs: List[Dict[str, Any]] = []
    for pred_dir in args.pred:
        rows = []
        for entry in entries:
            path = Path(pred_dir) / entry["id"] / "fused_msk.smv"
            if not path.exists():
                raise DataError("prediction missing for study", {"study": entry["id"], "path": str(path)})
            gt = read_volume(corpus.root / entry["files"]["hr_msk"])
            rows.append({"study": entry["id"], **evaluate(read_volume(path), gt, tau).to_dict()})
        runs.append({"pred": str(pred_dir), "rows": rows, "summary": summarize(rows, METRIC_KEYS)})
    across = {}
    for key in METRIC_KEYS:
        means = [r["summary"][key]["mean"] for r in runs if key in r["summary"]]
        if means:
            across[key] = {"mean": float(np.mean(means)), "std": float(np.std(means)), "n": len(means)}
    _write_json(
        out,
        {"dataset_hash": corpus.dataset_hash, "split": args.split, "tau": tau, "runs": runs, "across_runs": across},
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _config(args)
    corpus = Corpus.open(_data_dir(args, cfg))
    grid = load_grid(args.grid)
    out = _output_dir(_out_path(args, cfg, "sweep"), args.force)
    rows = sweep(grid, corpus, cfg.train, cfg.fusion, out)
    print(json.dumps({"best": rows[0]["weights"], "dsc": rows[0]["dsc_mean"]}))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    """Fusion-method, view-count and one- vs two-stage comparison with fixed models."""
    cfg = _config(args)
    corpus = Corpus.open(_data_dir(args, cfg))
    studies = _studies(corpus, args.split)
    out = _output_file(_out_path(args, cfg, f"{args.kind}_report.json"), args.force)
    S1, G1 = load_phase1(args.phase1)
    S2, G2 = load_phase1(args.phase2)

    def score(S: Segmentor, G: AlignNet, **overrides: Any) -> Dict[str, float]:
        fusion = dataclasses.replace(cfg.fusion, **overrides)
        values = fusion_dsc(S, G, studies, fusion)
        return {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}

    report = {
        "dataset_hash": corpus.dataset_hash,
        "split": args.split,
        "fusion": {m: score(S2, G2, method=m, views=3) for m in C.FUSION_METHODS},
        "views": {str(v): score(S2, G2, method="gaussian", views=v) for v in (1, 2, 3)},
        "stages": {
            "one-stage": score(S1, G1, method="gaussian", views=3),
            "two-stage": score(S2, G2, method="gaussian", views=3),
        },
    }
    _write_json(out, report)
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    setup_logging(log_dir=_log_dir(args))
    logger.info("Command started", {"command": args.command, "argv": list(argv or sys.argv[1:])})
    try:
        code = COMMANDS[args.command](args)
    except MaskFusionError as e:
        logger.error(e, {"command": args.command, **e.details}, exc_info=True)
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(e, {"command": args.command}, exc_info=True)
        print(
            json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": 1, "details": {}}),
            file=sys.stderr,
        )
        return 1
    logger.info("Command finished", {"command": args.command})
    return code
