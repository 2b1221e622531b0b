"""End-to-end recipes behind the CLI: prepare, run, eval and search.

Output tree of ``run_plan``::

    <out>/plan.txt          the plan as executed (normalised text form)
    <out>/metrics.csv       epoch,phase,loss,top1,top5,lr
    <out>/pretrained.vlrc   SR network after pre-training      (II-V)
    <out>/model.vlrc        final classifier (dual for III-V)
    <out>/decoupled.vlrc    LR-channel inference network        (III-V)
    <out>/report.txt        test errors, parameter counts, checksums

Nothing written depends on wall-clock time, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DegradationSpec,
    ImageDataset,
    PairSet,
    corrupt_salt_pepper,
    corrupted_pixel_count,
    downsample_area,
    make_pair_set,
    normalize,
    upscale_nn,
)
from .dataset_io import load_dataset, save_dataset
from .errors import ConfigError, FormatError
from .losses import cross_entropy_loss
from .models import (
    CouplingConfig,
    Network,
    attach_classifier_head,
    build_model_i,
    build_pcsrn,
    build_sr_subnet,
    decouple_for_inference,
)
from .plan import ExperimentPlan, with_overrides
from .rng import RandomState
from .search import GRID, grid_search_coupled_ratios
from .training import Curves, evaluate_topk, finetune, pretrain_sr, topk_errors

log = logging.getLogger(__name__)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- prepare ----------------------------------------------------------------

PAIRS_MAGIC = b"VLRP"


def save_pairs(pairs: PairSet, path) -> str:
    """Float64 pair archive: magic, version u8, count u32, H u16, W u16,
    class_count u16, then lr, hr (count*H*W f64 each), mean, scale (count f64),
    labels (count u16). Little-endian throughout."""
    n, _, h, w = pairs.lr.shape
    labels = pairs.labels if pairs.labels is not None else np.zeros(n, dtype=np.int64)
    blob = b"".join([
        PAIRS_MAGIC,
        struct.pack("<BIHHH", 1, n, h, w, pairs.class_count or 0),
        pairs.lr.astype("<f8").tobytes(),
        pairs.hr.astype("<f8").tobytes(),
        np.asarray(pairs.mean, dtype="<f8").tobytes(),
        np.asarray(pairs.scale, dtype="<f8").tobytes(),
        np.asarray(labels).astype("<u2").tobytes(),
    ])
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_pairs(path) -> PairSet:
    blob = Path(path).read_bytes()
    head = struct.Struct("<4sBIHHH")
    if len(blob) < head.size or blob[:4] != PAIRS_MAGIC:
        raise FormatError("not a VLRP pair archive")
    _, version, n, h, w, k = head.unpack_from(blob)
    if version != 1:
        raise FormatError(f"unsupported pair archive version {version}")
    need = head.size + 2 * n * h * w * 8 + 2 * n * 8 + 2 * n
    if len(blob) != need:
        raise FormatError(f"pair archive size {len(blob)} does not match header (expected {need})")
    off = head.size
    arrays = []
    for count in (n * h * w, n * h * w, n, n):
        arrays.append(np.frombuffer(blob, "<f8", count, off).astype(np.float64))
        off += 8 * count
    labels = np.frombuffer(blob, "<u2", n, off).astype(np.int64)
    lr, hr, mean, scale = arrays
    return PairSet(lr.reshape(n, 1, h, w), hr.reshape(n, 1, h, w), mean, scale, labels, k or None)


def corrupt_dataset(dataset: ImageDataset, fraction: float, rng: RandomState, stream: str = "corrupt") -> ImageDataset:
    images = np.stack([
        corrupt_salt_pepper(img, fraction, rng.stream(stream, i)) for i, img in enumerate(dataset.images)
    ]) if len(dataset) else dataset.images.copy()
    return ImageDataset(images, dataset.labels.copy(), dataset.class_count, dataset.held_out)


def prepare(input_path, out_dir, seed: int = 0, scale: int = 4, sp_fraction: float = 0.0) -> dict:
    """Write HR copy, LR images, LR/HR pair archive and (optionally) a corrupted variant.

    Returns the manifest dict that is also written to ``manifest.txt``.
    """
    input_path = Path(input_path)
    if not input_path.exists():
        raise FileNotFoundError(f"input dataset not found: {input_path}")
    dataset = load_dataset(input_path)
    spec = DegradationSpec(s=scale, sp_fraction=sp_fraction)
    spec.check_size(*dataset.images.shape[2:])
    rng = RandomState(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    files["hr.vlrd"] = save_dataset(dataset, out / "hr.vlrd")
    source = dataset
    if sp_fraction > 0:
        source = corrupt_dataset(dataset, sp_fraction, rng)
        files["hr_corrupted.vlrd"] = save_dataset(source, out / "hr_corrupted.vlrd")
    lr_small = ImageDataset(downsample_area(source.images, scale), source.labels, source.class_count)
    files["lr.vlrd"] = save_dataset(lr_small, out / "lr.vlrd")
    pairs = make_pair_set(source, spec, corrupt=False)
    files["pairs.vlrp"] = save_pairs(pairs, out / "pairs.vlrp")
    h, w = dataset.images.shape[2:]
    manifest = {
        "count": len(dataset),
        "height": h,
        "width": w,
        "class_count": dataset.class_count,
        "scale": scale,
        "seed": seed,
        "sp_fraction": sp_fraction,
        "corrupted_pixels_per_image": corrupted_pixel_count(h * w, sp_fraction),
        **{f"sha256.{name}": digest for name, digest in files.items()},
    }
    (out / "manifest.txt").write_text("".join(f"{k} = {v}\n" for k, v in manifest.items()))
    return manifest


# --- run --------------------------------------------------------------------

@dataclass
class RunResult:
    network: Network
    inference: Network
    curves: Curves
    test_errors: dict[int, float]
    val_error: float | None


def _plan_pairs(plan: ExperimentPlan, dataset: ImageDataset, stream: str) -> PairSet:
    if dataset.class_count != plan.network.m5:
        raise ConfigError(f"dataset has {dataset.class_count} classes but network.m5 = {plan.network.m5}")
    if dataset.images.shape[2:] != (plan.network.side, plan.network.side):
        raise ConfigError(
            f"dataset images are {dataset.images.shape[2:]}, network.side = {plan.network.side}"
        )
    rng = RandomState(plan.seed)
    if plan.degradation.sp_fraction > 0:
        dataset = corrupt_dataset(dataset, plan.degradation.sp_fraction, rng, stream)
    return make_pair_set(dataset, plan.degradation, corrupt=False)


def load_plan_data(plan: ExperimentPlan):
    train_path = plan.resolve(plan.data.train)
    if not train_path.exists():
        raise FileNotFoundError(f"training data not found: {train_path}")
    train = _plan_pairs(plan, load_dataset(train_path), "corrupt/train")
    test = None
    if plan.data.test:
        test_path = plan.resolve(plan.data.test)
        if not test_path.exists():
            raise FileNotFoundError(f"test data not found: {test_path}")
        test = _plan_pairs(plan, load_dataset(test_path), "corrupt/test")
    return train, test


def train_variant(plan: ExperimentPlan, train: PairSet, coupling: CouplingConfig | None = None, curves=None):
    """Full recipe for ``plan.variant``; returns ``(final network, pre-trained SR net or None, curves)``."""
    rng = RandomState(plan.seed)
    cfg = plan.network
    curves = curves if curves is not None else Curves()
    pretrained = None
    if plan.variant == "I":
        net = build_model_i(cfg, rng)
    else:
        if plan.variant == "II":
            sr = build_sr_subnet(cfg, rng)
        else:
            sr = build_pcsrn(cfg, coupling or plan.coupling, rng, variant=plan.variant)
        _, history = pretrain_sr(sr, train, plan.pretrain, rng)
        for epoch, loss in enumerate(history):
            curves.add(epoch, "pretrain", loss, lr=plan.pretrain.learning_rate)
        pretrained = sr.copy()
        net = attach_classifier_head(sr, rng)
    net, curves = finetune(net, train, plan.finetune, rng, curves=curves)
    return net, pretrained, curves


def run_plan(plan: ExperimentPlan, write: bool = True) -> RunResult:
    train, test = load_plan_data(plan)
    net, pretrained, curves = train_variant(plan, train)
    inference = decouple_for_inference(net) if net.dual else net
    val_rows = curves.phase("finetune/val")
    val_error = val_rows[-1]["top1"] if val_rows else None
    test_errors: dict[int, float] = {}
    ks = tuple(k for k in (1, 5) if k <= plan.network.m5)
    if test is not None:
        probs = inference.predict(test.lr)
        test_errors = topk_errors(probs, test.labels, ks)
        last = curves.rows[-1]["epoch"] if curves.rows else 0
        curves.add(last, "test", cross_entropy_loss(probs, test.labels)[0],
                   test_errors.get(1), test_errors.get(5), None)
    if write:
        out = plan.resolve(plan.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.txt").write_text(plan.to_text())
        (out / "metrics.csv").write_text(curves.to_csv())
        sums = {}
        if pretrained is not None:
            sums["pretrained.vlrc"] = save_checkpoint(pretrained, out / "pretrained.vlrc")
        sums["model.vlrc"] = save_checkpoint(net, out / "model.vlrc")
        if net.dual:
            sums["decoupled.vlrc"] = save_checkpoint(inference, out / "decoupled.vlrc")
        report = {
            "variant": plan.variant,
            "seed": plan.seed,
            "params.inference": inference.param_count(),
            "params.total": net.param_count(),
            "val.top1": val_error,
            **{f"test.top{k}": v for k, v in test_errors.items()},
            **{f"sha256.{k}": v for k, v in sums.items()},
        }
        (out / "report.txt").write_text("".join(f"{k} = {v}\n" for k, v in report.items()))
    return RunResult(net, inference, curves, test_errors, val_error)


# --- eval -------------------------------------------------------------------

def lr_inputs(dataset: ImageDataset, side: int, scale: int | None = None) -> np.ndarray:
    """Normalised network inputs from a dataset of LR images.

    Images smaller than ``side`` are taken as genuine LR images and upscaled
    with nearest neighbour. Images at full size are used as they are unless
    ``scale`` is given, in which case they are degraded by that factor first.
    """
    images = dataset.images
    h = images.shape[2]
    if h != side:
        if side % h or images.shape[3] != h:
            raise ConfigError(f"cannot bring {images.shape[2:]} images to {side}x{side}")
        images = upscale_nn(images, side // h)
    elif scale is not None:
        images = upscale_nn(downsample_area(images, scale), scale)
    return np.stack([normalize(img)[0] for img in images]) if len(images) else images


def evaluate_checkpoint(checkpoint, data, scale: int | None = None, ks=(1, 5)) -> dict:
    net = load_checkpoint(checkpoint)
    if net.kind != "classifier":
        raise ConfigError("checkpoint is an SR network without classifier heads")
    dataset = load_dataset(data)
    if dataset.class_count != net.config.m5:
        raise ConfigError(f"dataset has {dataset.class_count} classes, checkpoint m5 = {net.config.m5}")
    if net.dual:
        net = decouple_for_inference(net)
    ks = tuple(k for k in ks if k <= net.config.m5)
    x = lr_inputs(dataset, net.config.side, scale)
    errors = evaluate_topk(net, x, dataset.labels, ks)
    return {"count": len(dataset), **{f"top{k}": v for k, v in errors.items()}}


# --- search -----------------------------------------------------------------

TABLE_TARGET = (0.50, 0.75, 0.75)


def l1_oracle(c, target=TABLE_TARGET) -> float:
    return float(sum(abs(a - b) for a, b in zip(c, target)))


def _trial(plan: ExperimentPlan, train: PairSet, c) -> float:
    coupling = CouplingConfig.from_ratios(c, plan.network.n)
    trial_plan = with_overrides(plan, coupling_c=tuple(c))
    net, _, curves = train_variant(trial_plan, train, coupling)
    val = curves.phase("finetune/val")
    if val:
        return float(val[-1]["top1"])
    return float(curves.phase("finetune/train")[-1]["top1"])


def search_plan(plan: ExperimentPlan, jobs: int = 1, oracle: str | None = None, write: bool = True):
    """Greedy coupled-ratio search; writes ``search.csv`` (k1..k3, c1..c3, top1_error)."""
    if plan.variant not in ("IV", "V"):
        raise ConfigError(f"search needs variant IV or V, got {plan.variant}")
    n = plan.network.n
    for c in GRID:
        CouplingConfig.from_ratios((c, c, c), n)  # every grid point must give whole filters
    if oracle == "l1":
        fn = l1_oracle
    elif oracle is None:
        train, _ = load_plan_data(plan)
        fn = partial(_trial, plan, train)
    else:
        raise ConfigError(f"unknown oracle {oracle!r}")
    if jobs > 1 and oracle is None:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            best, best_err, history = grid_search_coupled_ratios(fn, GRID, ex, speculate=min(jobs, 3))
    else:
        best, best_err, history = grid_search_coupled_ratios(fn, GRID)
    lines = ["k1,k2,k3,c1,c2,c3,top1_error"]
    for t in history:
        k = CouplingConfig.from_ratios(t.c, n).k
        lines.append(",".join([*map(str, k), *(f"{v:.2f}" for v in t.c), repr(float(t.error))]))
    table = "\n".join(lines) + "\n"
    if write:
        out = plan.resolve(plan.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "search.csv").write_text(table)
        (out / "search_best.txt").write_text(
            f"c = {','.join(f'{v:.2f}' for v in best)}\n"
            f"k = {','.join(map(str, CouplingConfig.from_ratios(best, n).k))}\n"
            f"top1_error = {best_err!r}\ntrials = {len(history)}\n"
        )
    return best, best_err, history, table
