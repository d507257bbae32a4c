"""
Training loops: phase-1 pretraining, phase-2 intertwined fine-tuning and the
single-view baselines.

Every loop is plain SGD with momentum over volcore primitives. The learning rate is
recomputed before each update from a global iteration counter, and every random
choice (weight init, batch order, augmentation) draws a seed from the root seed,
so a run is a pure function of (config, dataset).
"""

import csv
import dataclasses
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from . import volcore as vc
from .config import DECAY_EVERY, DECAY_GAMMA, FusionConfig, TrainConfig, derive_seed
from .error_trace import logger
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .fuse import infer_subset
from .geometry import warp_tensor
from .losses import (
    LossWeights,
    align_loss_sup,
    align_loss_unsup,
    cons1_loss,
    cons2_loss,
    dice_loss,
)
from .metrics import dsc
from .nets import AlignNet, Segmentor, load_checkpoint, save_checkpoint
from .synth import Corpus, PreparedStudy, sample_misalignment
from .volume import ViewAxis, Volume, normalize_intensity

Tensor = torch.Tensor

RUN_MANIFEST_NAME = "run_manifest.json"
CURVE_NAME = "loss_curve.csv"

# (alpha1, alpha2, lambda1, lambda2) rows of the reference hyper-parameter table
REFERENCE_SWEEP_GRID: Tuple[LossWeights, ...] = (
    LossWeights(alpha1=0.1, alpha2=0.1, lambda1=0.1, lambda2=0.1),
    LossWeights(alpha1=0.2, alpha2=0.2, lambda1=0.5, lambda2=0.5),
    LossWeights(alpha1=0.05, alpha2=0.05, lambda1=0.1, lambda2=0.05),
    LossWeights(alpha1=0.5, alpha2=0.5, lambda1=0.1, lambda2=0.05),
    LossWeights(alpha1=0.05, alpha2=0.05, lambda1=0.1, lambda2=0.05),
)


def lr_at(base: float, t: int, every: int = DECAY_EVERY, gamma: float = DECAY_GAMMA) -> float:
    """Step decay: base * gamma ** floor(t / every)."""
    return base * gamma ** (t // every)


class LossCurve:
    """Per-iteration loss values, written as (iteration, loss_name, value) rows."""

    def __init__(self) -> None:
        self.rows: List[Tuple[int, str, float]] = []
        self._epoch: Dict[str, List[float]] = {}

    def add(self, iteration: int, name: str, value: float) -> None:
        self.rows.append((iteration, name, value))
        self._epoch.setdefault(name, []).append(value)

    def close_epoch(self) -> Dict[str, float]:
        means = {name: float(np.mean(v)) for name, v in sorted(self._epoch.items())}
        self._epoch = {}
        return means

    def values(self, name: str) -> List[float]:
        return [v for _, n, v in self.rows if n == name]

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: Path) -> Path:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss_name", "value"])
            for it, name, value in self.rows:
                writer.writerow([it, name, repr(value)])
        return path


@dataclass
class RunManifest:
    kind: str
    config: Dict[str, Any]
    dataset_hash: str
    seed: int
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / RUN_MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path


@dataclass
class TrainResult:
    models: Dict[str, nn.Module]
    curve: LossCurve
    manifest: RunManifest


class _SGD:
    """Momentum SGD over a fixed parameter list; lr is supplied per step."""

    def __init__(self, model: nn.Module, cfg: TrainConfig) -> None:
        self.params = [p for p in model.parameters() if p.requires_grad]
        self.momentum = cfg.momentum if cfg.use_momentum else 0.0
        self.buffers: List[Optional[Tensor]] = [None] * len(self.params)

    def zero_grad(self) -> None:
        vc.zero_grad(self.params)

    def step(self, lr: float) -> None:
        vc.sgd_step(self.params, lr, self.momentum, self.buffers)


def _guard(loss: Tensor, lr: float, iteration: int, name: str) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NumericError(
            "non-finite loss; aborting run",
            {"loss": name, "value": value, "lr": lr, "iteration": iteration},
        )
    return value


def _update(loss: Tensor, opt: _SGD, lr: float, iteration: int, name: str) -> float:
    value = _guard(loss, lr, iteration, name)
    opt.zero_grad()
    vc.backward(loss)
    opt.step(lr)
    return value


def _batches(n: int, batch_size: int, seed: int) -> List[np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(volumes: Sequence[Volume]) -> Tensor:
    return torch.from_numpy(np.stack([v.data for v in volumes]).astype(np.float32))[:, None]


def _frozen(model: nn.Module) -> Callable:
    def call(*args: Tensor) -> Tensor:
        with torch.no_grad():
            return model(*args)

    return call


def _init_segmentor(cfg: TrainConfig) -> Segmentor:
    torch.manual_seed(derive_seed(cfg.seed, "segmentor-init"))
    return Segmentor(base_channels=cfg.base_channels)


def _init_aligner(cfg: TrainConfig, size: int) -> AlignNet:
    torch.manual_seed(derive_seed(cfg.seed, "aligner-init"))
    return AlignNet(size=size, base_channels=cfg.base_channels)


def _training_studies(corpus: Corpus) -> List[PreparedStudy]:
    studies = corpus.prepared("train")
    if not studies:
        raise DataError("corpus has no training studies", {"path": str(corpus.root)})
    return studies


def _log_epoch(kind: str, epoch: int, means: Dict[str, float], lr: float) -> Dict[str, Any]:
    row = {"epoch": epoch, "lr": lr, **means}
    logger.info(f"{kind} epoch finished", row)
    return row


# Pair sampling


@dataclass
class ViewPair:
    study_id: str
    moving: Volume
    fixed: Volume
    moving_mask: Volume
    fixed_mask: Volume


def view_pairs(studies: Sequence[PreparedStudy]) -> List[ViewPair]:
    """Every unordered pair of views per study, in canonical view order."""
    pairs = []
    for study in studies:
        axes = [a for a in ViewAxis.ordered() if a in study.images]
        for a, b in itertools.combinations(axes, 2):
            pairs.append(
                ViewPair(study.study_id, study.images[a], study.images[b], study.masks[a], study.masks[b])
            )
    return pairs


def _augment(
    pairs: Sequence[ViewPair], cfg: TrainConfig, size: int, seed: int
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Stack a batch, re-posing each moving view by a random rigid transform."""
    moving, fixed = _stack([p.moving for p in pairs]), _stack([p.fixed for p in pairs])
    moving_mask = _stack([p.moving_mask for p in pairs])
    fixed_mask = _stack([p.fixed_mask for p in pairs])
    rng = np.random.default_rng(seed)
    if cfg.augment_max_rotation_deg or cfg.augment_max_translation_vox:
        theta = torch.cat(
            [
                sample_misalignment(
                    rng, size, cfg.augment_max_rotation_deg, cfg.augment_max_translation_vox
                ).to_tensor()
                for _ in pairs
            ]
        )
        with torch.no_grad():
            moving = warp_tensor(moving, theta)
            moving_mask = warp_tensor(moving_mask, theta, mode="nearest")
    return moving, fixed, moving_mask, fixed_mask


def _align_objective(
    moving: Tensor,
    fixed: Tensor,
    moving_mask: Tensor,
    fixed_mask: Tensor,
    G: Callable,
    cfg: TrainConfig,
    terms: Dict[str, float],
) -> Tensor:
    w = cfg.weights
    if cfg.supervised_aligner:
        return align_loss_sup(
            moving, fixed, moving_mask, fixed_mask, G, w.lambda1, w.lambda2, cfg.cc_window, terms
        )
    return align_loss_unsup(moving, fixed, G, w.lambda1, cfg.cc_window, terms)


# Phase 1


def _fit_segmentor(
    S: Segmentor,
    samples: Sequence[Tuple[Volume, Volume]],
    epochs: int,
    base_lr: float,
    cfg: TrainConfig,
    kind: str,
) -> Tuple[LossCurve, List[Dict[str, Any]]]:
    opt = _SGD(S, cfg)
    curve, epoch_rows, t = LossCurve(), [], 0
    for epoch in range(epochs):
        lr = base_lr
        for idx in _batches(len(samples), cfg.batch_size, derive_seed(cfg.seed, kind, "order", epoch)):
            lr = lr_at(base_lr, t, cfg.decay_every, cfg.decay_gamma)
            x = _stack([samples[i][0] for i in idx])
            y = _stack([samples[i][1] for i in idx])
            loss = dice_loss(S(x), y)
            curve.add(t, "dice", _update(loss, opt, lr, t, "dice"))
            t += 1
        epoch_rows.append(_log_epoch(kind, epoch, curve.close_epoch(), lr))
    return curve, epoch_rows


def _segmentor_run(
    corpus: Corpus,
    cfg: TrainConfig,
    samples: Sequence[Tuple[Volume, Volume]],
    epochs: int,
    kind: str,
    out_dir: Optional[Union[str, Path]],
) -> TrainResult:
    start = time.perf_counter()
    vc.seed_everything(derive_seed(cfg.seed, kind))
    S = _init_segmentor(cfg)
    curve, rows = _fit_segmentor(S, samples, epochs, cfg.lr_phase1, cfg, kind)
    manifest = RunManifest(kind, {"train": dataclasses.asdict(cfg)}, corpus.dataset_hash, cfg.seed, rows)
    manifest.wall_clock_s = time.perf_counter() - start
    result = TrainResult({"segmentor": S}, curve, manifest)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def pretrain_segmentor(
    corpus: Corpus, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None
) -> TrainResult:
    """Dice training of S on every up-sampled view of every training study."""
    samples = [
        (study.images[a], study.masks[a])
        for study in _training_studies(corpus)
        for a in ViewAxis.ordered()
        if a in study.images
    ]
    return _segmentor_run(corpus, cfg, samples, cfg.phase1_epochs, "phase1-segmentor", out_dir)


def pretrain_aligner(
    corpus: Corpus,
    cfg: TrainConfig,
    supervised: Optional[bool] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Train G on all unordered view pairs with random rigid augmentation.

    supervised=True adds the mask-similarity term (lambda2); None defers to the config.
    """
    if supervised is not None:
        cfg = dataclasses.replace(cfg, supervised_aligner=supervised)
    start = time.perf_counter()
    kind = "phase1-aligner"
    vc.seed_everything(derive_seed(cfg.seed, kind))
    G = _init_aligner(cfg, corpus.size)
    pairs = view_pairs(_training_studies(corpus))
    opt = _SGD(G, cfg)
    curve, rows, t = LossCurve(), [], 0
    for epoch in range(cfg.phase1_epochs):
        lr = cfg.lr_phase1
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, derive_seed(cfg.seed, kind, "order", epoch))):
            lr = lr_at(cfg.lr_phase1, t, cfg.decay_every, cfg.decay_gamma)
            batch = _augment([pairs[i] for i in idx], cfg, corpus.size, derive_seed(cfg.seed, kind, "augment", epoch, b))
            terms: Dict[str, float] = {}
            loss = _align_objective(*batch, G, cfg, terms)
            curve.add(t, "align", _update(loss, opt, lr, t, "align"))
            for name, value in terms.items():
                curve.add(t, name, value)
            t += 1
        rows.append(_log_epoch(kind, epoch, curve.close_epoch(), lr))
    manifest = RunManifest(kind, {"train": dataclasses.asdict(cfg)}, corpus.dataset_hash, cfg.seed, rows)
    manifest.wall_clock_s = time.perf_counter() - start
    result = TrainResult({"aligner": G}, curve, manifest)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def train_phase1(
    corpus: Corpus, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None
) -> TrainResult:
    """Both phase-1 models, written side by side into one run directory."""
    seg = pretrain_segmentor(corpus, cfg)
    align = pretrain_aligner(corpus, cfg)
    curve = LossCurve()
    curve.rows = seg.curve.rows + align.curve.rows
    manifest = RunManifest(
        "phase1",
        {"train": dataclasses.asdict(cfg)},
        corpus.dataset_hash,
        cfg.seed,
        [{"model": "segmentor", **r} for r in seg.manifest.epochs]
        + [{"model": "aligner", **r} for r in align.manifest.epochs],
        wall_clock_s=seg.manifest.wall_clock_s + align.manifest.wall_clock_s,
    )
    result = TrainResult({**seg.models, **align.models}, curve, manifest)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


# Phase 2


def intertwined_finetune(
    S: Segmentor,
    G: AlignNet,
    corpus: Corpus,
    cfg: TrainConfig,
    cons2_target: str = "pose-consistent",
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    Alternate S and G updates batch by batch (S, G, S, G, ...).

    S minimizes Dice + alpha1 * cons1 with G frozen; G minimizes the alignment loss
    + alpha2 * cons2 with S frozen. Each unordered view pair is visited once per epoch.
    """
    if S is None or G is None:
        raise CheckpointError("phase-2 fine-tuning needs both phase-1 models")
    start = time.perf_counter()
    kind = "phase2"
    vc.seed_everything(derive_seed(cfg.seed, kind))
    pairs = view_pairs(_training_studies(corpus))
    opt_s, opt_g = _SGD(S, cfg), _SGD(G, cfg)
    frozen_s, frozen_g = _frozen(S), _frozen(G)
    w = cfg.weights
    curve, rows, t = LossCurve(), [], 0
    for epoch in range(cfg.phase2_epochs):
        lr = cfg.lr_phase2
        for b, idx in enumerate(_batches(len(pairs), cfg.batch_size, derive_seed(cfg.seed, kind, "order", epoch))):
            lr = lr_at(cfg.lr_phase2, t, cfg.decay_every, cfg.decay_gamma)
            I_i, I_j, Y_i, Y_j = _augment(
                [pairs[i] for i in idx], cfg, corpus.size, derive_seed(cfg.seed, kind, "augment", epoch, b)
            )
            if t % 2 == 0:
                n = I_i.shape[0]
                masks = S(torch.cat([I_i, I_j]))
                seg = dice_loss(masks, torch.cat([Y_i, Y_j]))
                f_j_to_i = warp_tensor(I_j, frozen_g(I_j, I_i))
                f_i_to_j = warp_tensor(I_i, frozen_g(I_i, I_j))
                cons1 = cons1_loss(S, f_j_to_i, f_i_to_j, masks[:n], masks[n:])
                loss = vc.add(seg, vc.scalar_mul(cons1, w.alpha1))
                curve.add(t, "seg2", _update(loss, opt_s, lr, t, "seg2"))
                curve.add(t, "dice", float(seg.detach()))
                curve.add(t, "cons1", float(cons1.detach()))
            else:
                terms: Dict[str, float] = {}
                align = _align_objective(I_i, I_j, Y_i, Y_j, G, cfg, terms)
                cons2 = cons2_loss(frozen_s, G, I_i, I_j, cons2_target)
                loss = vc.add(align, vc.scalar_mul(cons2, w.alpha2))
                curve.add(t, "align2", _update(loss, opt_g, lr, t, "align2"))
                curve.add(t, "align", float(align.detach()))
                curve.add(t, "cons2", float(cons2.detach()))
            t += 1
        rows.append(_log_epoch(kind, epoch, curve.close_epoch(), lr))
    manifest = RunManifest(
        kind,
        {"train": dataclasses.asdict(cfg), "cons2_target": cons2_target},
        corpus.dataset_hash,
        cfg.seed,
        rows,
        extra={"updates_segmentor": (t + 1) // 2, "updates_aligner": t // 2},
    )
    manifest.wall_clock_s = time.perf_counter() - start
    result = TrainResult({"segmentor": S, "aligner": G}, curve, manifest)
    if out_dir is not None:
        write_run(result, out_dir)
    return result


def load_phase1(run_dir: Union[str, Path]) -> Tuple[Segmentor, AlignNet]:
    run = Path(run_dir)
    S, G = load_checkpoint(run / "segmentor.json"), load_checkpoint(run / "aligner.json")
    if not isinstance(S, Segmentor) or not isinstance(G, AlignNet):
        raise CheckpointError("run directory does not hold a segmentor and an aligner", {"path": str(run)})
    return S, G


# Baselines


def train_unet_lr(
    corpus: Corpus, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None
) -> TrainResult:
    """Single-view U-Net on all up-sampled LR views, for baseline_epochs."""
    samples = [
        (study.images[a], study.masks[a])
        for study in _training_studies(corpus)
        for a in ViewAxis.ordered()
        if a in study.images
    ]
    return _segmentor_run(corpus, cfg, samples, cfg.baseline_epochs, "unet-lr", out_dir)


def train_unet_hr(
    corpus: Corpus, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None
) -> TrainResult:
    """Upper bound: the same U-Net trained directly on isotropic HR pairs."""
    samples = [
        (normalize_intensity(study.hr_image), study.hr_mask) for study in _training_studies(corpus)
    ]
    return _segmentor_run(corpus, cfg, samples, cfg.baseline_epochs, "unet-hr", out_dir)


# Output


def write_run(result: TrainResult, out_dir: Union[str, Path]) -> Path:
    """Checkpoints, loss curve and run manifest into out_dir; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, model in sorted(result.models.items()):
        path = save_checkpoint(
            model,
            out / name,
            {"run": result.manifest.kind, "dataset_hash": result.manifest.dataset_hash},
        )
        result.manifest.checkpoints[name] = path.name
    result.curve.write_csv(out / CURVE_NAME)
    path = result.manifest.write(out)
    logger.info("Run written", {"path": str(out), "kind": result.manifest.kind, "checkpoints": result.manifest.checkpoints})
    return path


# Hyper-parameter sweep


def fusion_dsc(
    S: Callable, G: Callable, studies: Sequence[PreparedStudy], fusion: FusionConfig
) -> List[float]:
    scores = []
    for study in studies:
        result = infer_subset(
            study.images,
            S,
            G,
            study.slice_distance_vox,
            fusion.views,
            fusion.method,
            fusion.sigma_vox,
            fusion.threshold,
        )
        scores.append(dsc(result.binary, study.hr_mask))
    return scores


def sweep(
    grid: Sequence[LossWeights],
    corpus: Corpus,
    cfg: TrainConfig,
    fusion: Optional[FusionConfig] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> List[Dict[str, Any]]:
    """
    Train phase 1 and phase 2 for every weight row and rank by fused DSC on the eval split.

    The segmentor's phase-1 run does not depend on the weights and is shared by all rows.
    """
    fusion = fusion or FusionConfig()
    studies = corpus.prepared("eval")
    if not studies:
        raise DataError("sweep needs evaluation studies; generate the corpus with n_eval > 0")
    base = pretrain_segmentor(corpus, cfg)
    state = {k: v.clone() for k, v in base.models["segmentor"].state_dict().items()}
    rows = []
    for index, weights in enumerate(grid):
        weights.validate()
        row_cfg = dataclasses.replace(cfg, weights=weights)
        S = _init_segmentor(row_cfg)
        S.load_state_dict(state)
        G = pretrain_aligner(corpus, row_cfg).models["aligner"]
        tuned = intertwined_finetune(S, G, corpus, row_cfg, fusion.cons2_target)
        scores = fusion_dsc(_frozen(S), _frozen(G), studies, fusion)
        row = {
            "index": index,
            "weights": dataclasses.asdict(weights),
            "dsc_mean": float(np.mean(scores)),
            "dsc_std": float(np.std(scores)),
            "n": len(scores),
        }
        rows.append(row)
        logger.info("Sweep row evaluated", row)
        if out_dir is not None:
            write_run(tuned, Path(out_dir) / f"row_{index}")
    ranked = sorted(rows, key=lambda r: (-r["dsc_mean"], r["index"]))
    for rank, row in enumerate(ranked, start=1):
        row["rank"] = rank
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep_report.json").write_text(
            json.dumps({"dataset_hash": corpus.dataset_hash, "rows": ranked}, indent=2, sort_keys=True),
            encoding="utf-8",
        )
    return ranked


def load_grid(path: Union[str, Path]) -> List[LossWeights]:
    """JSON list of {alpha1, alpha2, lambda1, lambda2} objects, or the string "reference"."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("sweep grid could not be read", {"path": str(path), "reason": str(e)}) from e
    if payload == "reference":
        return list(REFERENCE_SWEEP_GRID)
    if not isinstance(payload, list) or not payload:
        raise ConfigError("sweep grid must be a non-empty list", {"path": str(path)})
    try:
        return [LossWeights(**row) for row in payload]
    except TypeError as e:
        raise ConfigError("sweep grid row has unknown keys", {"reason": str(e)}) from e
