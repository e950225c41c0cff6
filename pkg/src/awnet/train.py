"""Training loop: BCE loss, Adam, staged learning rate, checkpoints, history."""
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml
from filelock import FileLock, Timeout

from . import _kernels
from .augment import AugmentConfig, augment, worker_rng
from .checkpoint import save_checkpoint
from .data import PATCH_SIZE, canonical_name, pad_to_grid, patch_origins, preprocess_dataset
from .model import AttentionWNet, ModelConfig

log = logging.getLogger(__name__)

BCE_EPS = 1e-7

DEFAULT_STAGES = {
    "DRIVE": [(0, 1e-3), (100, 1e-4)],
    "CHASE": [(0, 1e-3), (100, 1e-4), (250, 5e-5)],
}
DEFAULT_EPOCHS = {"DRIVE": 250, "CHASE": 300}


class TrainingDivergedError(RuntimeError):
    pass


class RunDirLockedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "DRIVE"
    epochs_total: int = None
    batch_size: int = 1024
    lr_stages: list = None
    plateau: bool = False
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    seed: int = 0
    augmentation: bool = True
    val_fraction: float = 0.10
    val_split: str = "patch"
    train_stride: int = 5
    patch_size: int = PATCH_SIZE
    inside_fov_only: bool = True
    max_patches: int = None  # fixed random subset per run; smoke budgets only
    save_every_epoch: bool = True

    def __post_init__(self):
        self.dataset = canonical_name(self.dataset)
        if self.epochs_total is None:
            self.epochs_total = DEFAULT_EPOCHS[self.dataset]
        if self.lr_stages is None:
            self.lr_stages = DEFAULT_STAGES[self.dataset]
        self.lr_stages = [(int(e), float(lr)) for e, lr in self.lr_stages]
        starts = [e for e, _ in self.lr_stages]
        rates = [lr for _, lr in self.lr_stages]
        if not starts or starts[0] != 0:
            raise ValueError("lr_stages must start at epoch 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("lr_stages epoch starts must be strictly increasing")
        if any(b > a for a, b in zip(rates, rates[1:])):
            raise ValueError("lr_stages rates must be non-increasing")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs_total < 1:
            raise ValueError("epochs_total must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["lr_stages"] = [list(s) for s in self.lr_stages]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def bce_loss(pred, target, eps=BCE_EPS):
    """Mean per-pixel binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def stage_lr(epoch, config):
    lr = config.lr_stages[0][1]
    for start, rate in config.lr_stages:
        if epoch >= start:
            lr = rate
    return lr


class PlateauScaler:
    """Multiplier on the stage rate that shrinks when val loss stalls.

    The multiplier never grows, so together with a non-increasing stage
    table the learning rate is non-increasing over the run.
    """

    def __init__(self, patience=20, factor=0.5):
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad_epochs = 0
        self.multiplier = 1.0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                self.multiplier *= self.factor
                self.bad_epochs = 0
        return self.multiplier


def lr_at(epoch, config, multiplier=1.0):
    if not 0 <= epoch < config.epochs_total:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs_total})")
    return stage_lr(epoch, config) * (multiplier if config.plateau else 1.0)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    best_epoch: int = None
    best_checkpoint: str = None

    def __len__(self):
        return len(self.records)

    @property
    def train_loss(self):
        return [r.train_loss for r in self.records]

    @property
    def val_loss(self):
        return [r.val_loss for r in self.records]

    @property
    def lrs(self):
        return [r.lr for r in self.records]

    def append(self, rec):
        self.records.append(rec)

    def to_jsonl(self):
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def read(cls, path):
        hist = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                hist.append(EpochRecord(**json.loads(line)))
        if hist.records:
            best = min(hist.records, key=lambda r: r.val_loss)
            hist.best_epoch = best.epoch
        return hist


class PatchPool:
    """Lazy patch grid over preprocessed training images.

    Patches are gathered on demand so the full stride-5 grid never has to
    sit in memory.
    """

    def __init__(self, images, labels, fovs, ids, size=PATCH_SIZE, stride=5, inside_fov_only=True):
        self.size = size
        self.ids = list(ids)
        self.images, self.labels = [], []
        entries = []
        for k, (img, lbl, fov) in enumerate(zip(images, labels, fovs)):
            pi = pad_to_grid(np.asarray(img, dtype=np.float32)[None], size, stride)
            pl = pad_to_grid(np.asarray(lbl, dtype=np.uint8)[None], size, stride)
            pf = pad_to_grid(np.asarray(fov, dtype=np.uint8), size, stride)
            org = patch_origins(pi.shape[1], pi.shape[2], size, stride)
            if inside_fov_only:
                c = size // 2
                org = org[pf[org[:, 0] + c, org[:, 1] + c] > 0]
            entries.append(np.column_stack([np.full(len(org), k), org]))
            self.images.append(pi)
            self.labels.append(pl)
        self.index = np.concatenate(entries).astype(np.int64) if entries else np.zeros((0, 3), np.int64)

    def __len__(self):
        return len(self.index)

    def gather(self, rows):
        sel = self.index[rows]
        x = np.empty((len(sel), 1, self.size, self.size), dtype=np.float32)
        y = np.empty((len(sel), 1, self.size, self.size), dtype=np.uint8)
        for k in np.unique(sel[:, 0]):
            where = np.flatnonzero(sel[:, 0] == k)
            x[where] = _kernels.gather_patches(self.images[k], sel[where, 1:], self.size)
            y[where] = _kernels.gather_patches(self.labels[k], sel[where, 1:], self.size)
        return x, y


def split_indices(pool, fraction, seed, by="patch"):
    rng = np.random.default_rng([int(seed), 7])
    n = len(pool)
    if by == "image":
        n_img = len(pool.ids)
        n_val = max(1, int(round(n_img * fraction)))
        held = rng.permutation(n_img)[:n_val]
        is_val = np.isin(pool.index[:, 0], held)
        return np.flatnonzero(~is_val), np.flatnonzero(is_val)
    perm = rng.permutation(n)
    n_val = int(round(n * fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _augment_batch(x, y, cfg, rng):
    for i in range(len(x)):
        img, lbl, _ = augment(x[i, 0], y[i, 0], cfg, rng)
        x[i, 0] = img
        y[i, 0] = lbl
    return x, y


def evaluate_loss(model, pool, rows, batch_size):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(rows), batch_size):
            xb, yb = pool.gather(rows[start:start + batch_size])
            dtype = next(model.parameters()).dtype
            pred = model(torch.from_numpy(xb).to(dtype))
            loss = bce_loss(pred, torch.from_numpy(yb))
            total += float(loss) * len(xb)
            count += len(xb)
    return total / max(count, 1)


def build_pool(samples, config, stats=None):
    images, stats = preprocess_dataset(samples, stats)
    pool = PatchPool(images, [s.vessel_mask for s in samples], [s.fov_mask for s in samples],
                     [s.id for s in samples], config.patch_size, config.train_stride, config.inside_fov_only)
    return pool, stats


def train(model_config, train_config, samples, run_dir=None, augment_config=None, snapshot=None,
          progress=None):
    """Train an Attention W-Net on ``samples`` (FundusSample list).

    Returns ``(best_checkpoint_path_or_model, RunHistory)``.  With a
    ``run_dir`` the directory receives ``config.yaml``, ``history.jsonl``,
    per-epoch checkpoints and ``best.pt``; without one the trained model
    object is returned in place of a path.
    """
    cfg = train_config
    aug_cfg = augment_config or AugmentConfig(seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    model = AttentionWNet(model_config)
    pool, stats = build_pool(samples, cfg)
    if len(pool) == 0:
        raise ValueError("no training patches (check FOV masks and stride)")
    train_rows, val_rows = split_indices(pool, cfg.val_fraction, cfg.seed, cfg.val_split)
    if cfg.max_patches is not None and len(train_rows) > cfg.max_patches:
        sub = np.random.default_rng([cfg.seed, 11])
        train_rows = np.sort(sub.choice(train_rows, cfg.max_patches, replace=False))
        n_val = max(1, int(round(cfg.max_patches * cfg.val_fraction)))
        val_rows = np.sort(sub.choice(val_rows, min(n_val, len(val_rows)), replace=False))

    opt = torch.optim.Adam(model.parameters(), lr=stage_lr(0, cfg), betas=(0.9, 0.999), eps=1e-8)
    plateau = PlateauScaler(cfg.plateau_patience, cfg.plateau_factor)
    history = RunHistory()

    lock = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(run_dir / ".lock"))
        try:
            lock.acquire(timeout=0)
        except Timeout as exc:
            raise RunDirLockedError(f"run directory {run_dir} is in use by another process") from exc
        snap = dict(snapshot or {})
        snap.setdefault("model", model_config.to_dict())
        snap.setdefault("train", cfg.to_dict())
        snap.setdefault("augment", aug_cfg.to_dict())
        snap["preprocess_stats"] = list(stats)
        (run_dir / "config.yaml").write_text(yaml.safe_dump(snap, sort_keys=False))
        (run_dir / "history.jsonl").write_text("")

    best_state, best_val = None, math.inf
    try:
        for epoch in range(cfg.epochs_total):
            t0 = time.perf_counter()
            lr = lr_at(epoch, cfg, plateau.multiplier)
            for group in opt.param_groups:
                group["lr"] = lr
            order = np.random.default_rng([cfg.seed, epoch, 3]).permutation(train_rows)
            rng = worker_rng([cfg.seed, aug_cfg.seed], 0, epoch)
            model.train()
            running, seen = 0.0, 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                xb, yb = pool.gather(order[start:start + cfg.batch_size])
                if cfg.augmentation:
                    xb, yb = _augment_batch(xb, yb, aug_cfg, rng)
                dtype = next(model.parameters()).dtype
                pred = model(torch.from_numpy(xb).to(dtype))
                loss = bce_loss(pred, torch.from_numpy(yb))
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} batch {b} (lr={lr:g})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                running += loss.item() * len(xb)
                seen += len(xb)
            train_loss = running / seen
            val_loss = evaluate_loss(model, pool, val_rows, cfg.batch_size) if len(val_rows) else train_loss
            plateau.step(val_loss)
            rec = EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
            history.append(rec)
            if progress is not None:
                progress(rec)
            log.info("epoch %d train %.5f val %.5f lr %g", epoch, train_loss, val_loss, lr)
            improved = val_loss < best_val
            if improved:
                best_val = val_loss
                history.best_epoch = epoch
            if run_dir is not None:
                extra = {"train_loss": train_loss, "val_loss": val_loss, "preprocess_stats": list(stats)}
                with open(run_dir / "history.jsonl", "a") as fh:
                    fh.write(json.dumps(asdict(rec)) + "\n")
                if cfg.save_every_epoch:
                    save_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.pt", model,
                                    epoch + 1, cfg.seed, extra)
                save_checkpoint(run_dir / "last.pt", model, epoch + 1, cfg.seed, extra)
                if improved:
                    save_checkpoint(run_dir / "best.pt", model, epoch + 1, cfg.seed, extra)
                    history.best_checkpoint = str(run_dir / "best.pt")
            elif improved:
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    finally:
        if lock is not None:
            lock.release()

    if run_dir is not None:
        return run_dir / "best.pt", history
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    model.preprocess_stats = stats
    return model, history
