"""Loss, optimizers, learning-rate schedule and the train / evaluate loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, batch_iter, save_pgm
from .mew import format_branches, parse_branches
from .metrics import confusion_counts, dsc, evaluate_masks, foreground_classes, iou, write_report
from .network import MEWUNet, NetworkConfig, build_network
from .tensor import Tensor

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


# loss ------------------------------------------------------------------------


def bce_dice_loss(logits: Tensor, gt_mask, weights=(0.5, 0.5)) -> Tensor:
    """Weighted cross-entropy plus (1 - soft Dice over foreground classes).

    One logit channel means binary mode (sigmoid, labels in {0, 1}); K >= 2
    channels use softmax with labels in [0, K). Soft Dice is computed over the
    whole batch per foreground class and averaged.
    """
    bce_w, dice_w = weights
    gt = np.asarray(gt_mask)
    k = logits.shape[1]
    limit = 2 if k == 1 else k
    if gt.min(initial=0) < 0 or gt.max(initial=0) >= limit:
        raise ValueError(f"labels must lie in [0, {limit}) for {k} logit channels")
    if gt.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"mask shape {gt.shape} does not match logits {logits.shape}")
    if k == 1:
        ce = T.bce_with_logits(logits, gt)
        probs = [T.sigmoid(logits)]
        targets = [(gt == 1)[:, None]]
    else:
        ce = T.cross_entropy_with_logits(logits, gt)
        parts = T.split_channels(T.softmax_channels(logits), k)
        probs = parts[1:]
        targets = [(gt == c)[:, None] for c in range(1, k)]
    dice_loss = None
    for p, t in zip(probs, targets):
        t = Tensor(t.astype(logits.dtype))
        inter = (p * t).sum()
        score = (inter * 2.0 + DICE_SMOOTH) / (p.sum() + float(t.data.sum()) + DICE_SMOOTH)
        term = 1.0 - score
        dice_loss = term if dice_loss is None else dice_loss + term
    dice_loss = dice_loss * (1.0 / len(probs))
    return ce * bce_w + dice_loss * dice_w


def predict_labels(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.int64)
    return logits.argmax(axis=1)


# schedule and optimizers -----------------------------------------------------


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr_min + (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total)) / 2.0


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
    """In-place AdamW update of the arrays in ``params``.

    ``state`` holds "step" and per-parameter "m"/"v" lists; it is created on
    first use when empty.
    """
    if not state:
        state.update(step=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=1e-4):
    """In-place SGD with classical momentum; weight decay is added to the gradient."""
    if not state:
        state.update(step=0, velocity=[np.zeros_like(p) for p in params])
    state["step"] += 1
    for p, g, vel in zip(params, grads, state["velocity"]):
        d = g + weight_decay * p if weight_decay else g
        if momentum:
            vel *= momentum
            vel += d
            d = vel
        p -= lr * d
    return params, state


class Optimizer:
    def __init__(self, params: list[Tensor], kind: str, weight_decay: float | None = None,
                 momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be 'adamw' or 'sgd', got {kind!r}")
        self.params = params
        self.kind = kind
        self.weight_decay = (1e-2 if kind == "adamw" else 1e-4) if weight_decay is None else weight_decay
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self, lr: float) -> None:
        arrays = [p.data for p in self.params]
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.kind == "adamw":
            adamw_step(arrays, grads, self.state, lr, *self.betas, self.eps, self.weight_decay)
        else:
            sgd_step(arrays, grads, self.state, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for key in ("m", "v", "velocity"):
            for i, arr in enumerate(self.state.get(key, [])):
                out.append((f"optim.{key}.{i}", arr))
        return out

    def load_state_arrays(self, table: dict[str, np.ndarray], step: int) -> None:
        self.state = {"step": step}
        for key in ("m", "v", "velocity"):
            names = [f"optim.{key}.{i}" for i in range(len(self.params))]
            if names and names[0] in table:
                self.state[key] = [table[n].copy() for n in names]


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


# configuration ---------------------------------------------------------------

PRESETS = {
    "isic": dict(lr=1e-3, epochs=300, optimizer="adamw", batch_size=8),
    "synapse": dict(lr=3e-3, epochs=600, optimizer="sgd", batch_size=8),
}


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = "runs/default"
    lr: float = 1e-3
    lr_min: float = 0.0
    epochs: int = 300
    optimizer: str = "adamw"
    weight_decay: float | None = None
    momentum: float = 0.9
    batch_size: int = 8
    bce_weight: float = 0.5
    dice_weight: float = 0.5
    seed: int = 0
    branches: str = "hw,cw,ch,dw"
    norm: str = "group"
    stage_channels: str = "32,64,128,256,512"
    mewb_counts: str = "1,2,2,4"
    train_split: str = "train"
    val_split: str = "test"
    augment: bool = True
    grad_clip: float = 0.0
    dtype: str = "float64"
    save_every_epoch: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bce_weight + self.dice_weight <= 0:
            raise ValueError("bce_weight + dice_weight must be positive")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if self.norm not in ("group", "batch"):
            raise ValueError(f"norm must be group or batch, got {self.norm!r}")
        parse_branches(self.branches)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        """Build from string key=value pairs, converting to the field types."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _convert(raw, kinds[key])
        return cls(**kwargs)


def _convert(raw, kind: str):
    if not isinstance(raw, str):
        return raw
    if kind == "bool":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if kind.startswith("float"):
        return None if raw.strip().lower() in ("", "none") else float(raw)
    return raw.strip()


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return values


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def network_config_for(cfg: TrainConfig, manifest: DatasetManifest) -> NetworkConfig:
    samples = manifest.samples(cfg.train_split)
    if not samples:
        raise ValueError(f"split {cfg.train_split!r} is empty")
    c, h, w = samples[0].image.shape
    num_classes = manifest.num_classes or int(max(s.mask.max() for s in samples)) + 1
    return NetworkConfig(
        in_channels=c,
        num_classes=max(num_classes, 2),
        height=h,
        width=w,
        stage_channels=_ints(cfg.stage_channels),
        mewb_counts=_ints(cfg.mewb_counts),
        branches=parse_branches(cfg.branches),
        norm_kind=cfg.norm,
        dtype=cfg.dtype,
    )


# loops -----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_dsc: float
    val_miou: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.10g}\t{self.lr:.10g}\t{self.val_dsc:.10g}\t{self.val_miou:.10g}"


@dataclass
class TrainResult:
    records: list[EpochRecord] = field(default_factory=list)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    best_val_dsc: float = -1.0
    net: MEWUNet | None = None


def predict(net: MEWUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Label maps for (N, C, H, W) images, network in eval mode."""
    was_training = net.training
    net.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            logits = net(Tensor(images[start:start + batch_size], dtype=net.cfg.dtype))
            out.append(predict_labels(logits.data))
    net.train(was_training)
    return np.concatenate(out)


def score_split(net: MEWUNet, manifest: DatasetManifest, split: str, spacing=(1.0, 1.0),
                with_hd95: bool = True) -> tuple[dict, np.ndarray, list]:
    samples = manifest.samples(split)
    images = np.stack([s.image for s in samples])
    gts = np.stack([s.mask for s in samples])
    preds = predict(net, images)
    if with_hd95:
        report = evaluate_masks(preds, gts, net.cfg.num_classes, spacing)
    else:
        report = _overlap_only(preds, gts, net.cfg.num_classes)
    return report, preds, samples


def _overlap_only(preds, gts, num_classes) -> dict:
    classes = foreground_classes(gts, num_classes)
    counts = [confusion_counts(preds, gts, k) for k in classes]
    return {"mean": {
        "DSC": float(np.mean([dsc(c) for c in counts])) if counts else 1.0,
        "mIoU": float(np.mean([iou(c) for c in counts])) if counts else 1.0,
    }}


def train(cfg: TrainConfig, manifest: DatasetManifest | None = None) -> TrainResult:
    """Train from scratch; returns per-epoch records and checkpoint paths.

    Appends ``epoch<TAB>loss<TAB>lr<TAB>val_dsc<TAB>val_miou`` lines to
    ``<out_dir>/train_log.tsv`` and keeps ``best.ckpt`` (highest validation
    DSC) and ``last.ckpt``.
    """
    cfg.validate()
    if manifest is None:
        if not cfg.manifest:
            raise FileNotFoundError("no dataset manifest configured")
        manifest = DatasetManifest.load(cfg.manifest)
    manifest.check_files()
    for split in {cfg.train_split, cfg.val_split}:
        if not manifest.ids(split):
            raise ValueError(f"split {split!r} has no samples")
    net_cfg = network_config_for(cfg, manifest)
    net = build_network(net_cfg, cfg.seed)
    opt = Optimizer(net.parameters(), cfg.optimizer, cfg.weight_decay, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.tsv"
    result = TrainResult(net=net)
    n_train = len(manifest.ids(cfg.train_split))

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.lr_min)
        shuffle_seed, aug_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))
        net.train()
        loss_sum = 0.0
        for batch in batch_iter(manifest, cfg.train_split, cfg.batch_size, shuffle_seed,
                                aug_seed if cfg.augment else None):
            opt.zero_grad()
            logits = net(Tensor(batch.images, dtype=net_cfg.dtype))
            loss = bce_dice_loss(logits, batch.masks, (cfg.bce_weight, cfg.dice_weight))
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step(lr)
            loss_sum += loss.item() * len(batch.ids)
        report, _, _ = score_split(net, manifest, cfg.val_split, with_hd95=False)
        rec = EpochRecord(epoch + 1, loss_sum / n_train, lr, report["mean"]["DSC"], report["mean"]["mIoU"])
        result.records.append(rec)
        with open(log_path, "a") as fh:
            fh.write(rec.line() + "\n")
        logger.info("epoch %d loss %.5f lr %.3g val DSC %.4f mIoU %.4f",
                    rec.epoch, rec.loss, rec.lr, rec.val_dsc, rec.val_miou)
        meta = {
            "epoch": rec.epoch,
            "train_config": cfg.to_dict(),
            "optimizer": {"kind": opt.kind, "step": opt.state.get("step", 0)},
            "rng_state": rng.bit_generator.state,
            "val_dsc": rec.val_dsc,
        }
        if rec.val_dsc > result.best_val_dsc:
            result.best_val_dsc = rec.val_dsc
            result.best_checkpoint = save_checkpoint(out_dir / "best.ckpt", net, meta, opt.state_arrays())
        if cfg.save_every_epoch or epoch == cfg.epochs - 1:
            result.last_checkpoint = save_checkpoint(out_dir / "last.ckpt", net, meta, opt.state_arrays())
    return result


def evaluate(checkpoint, manifest: DatasetManifest | str, split: str = "test",
             spacing=(1.0, 1.0), export_dir=None, report_stem=None) -> dict:
    """Metric report of a checkpoint on one split, optionally exporting predicted masks."""
    net, _, _ = load_checkpoint(checkpoint)
    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.load(manifest)
    if manifest.num_classes is not None and manifest.num_classes != net.cfg.num_classes:
        raise ValueError(
            f"checkpoint predicts {net.cfg.num_classes} classes, dataset has {manifest.num_classes}"
        )
    report, preds, samples = score_split(net, manifest, split, spacing)
    if export_dir is not None:
        export_dir = Path(export_dir)
        for pred, sample in zip(preds, samples):
            save_pgm(pred.astype(np.uint8), export_dir / f"{sample.id}_pred.pgm")
    if report_stem is not None:
        write_report(report, report_stem)
    return report


def describe(cfg: NetworkConfig) -> str:
    return (f"channels={list(cfg.stage_channels)} mewb={list(cfg.mewb_counts)} "
            f"branches={format_branches(cfg.branches)} norm={cfg.norm_kind}")
