"""Optimiser, learning-rate schedule, window sampling and the training loop."""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .data import mirror, normalize
from .errors import ConfigError, DataError
from .metrics import mpjpe, mpjpe_loss, p_mpjpe
from .model import pad_frames, predict_frames, predict_frames_flip

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_mpjpe_mm", "eval_mpjpe_mm", "eval_pmpjpe_mm")


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 80
    lr0: float = 0.001
    lr_decay: float = 0.95
    dropout: float = 0.05
    seed: int = 0
    flip_augment: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.lr0 < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def lr_at_epoch(epoch, cfg):
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay ** epoch


# ---------------------------------------------------------------------------
# Amsgrad
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # PyTorch's amsgrad also divides the running maximum by (1 - beta2**t)
    correct_second_moment: bool = True
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)


def amsgrad_step(params, grads, state, lr):
    """One in-place Amsgrad update of the arrays in ``params`` (a name -> array dict).

    Parameters without a gradient entry are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t if state.correct_second_moment else 1.0
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.v_max[name] = np.zeros_like(p)
        m, v, vmax = state.m[name], state.v[name], state.v_max[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        np.maximum(vmax, v, out=vmax)
        denom = np.sqrt(vmax / bc2) + state.eps
        p -= (lr / bc1) * m / denom
    return params, state


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

class WindowSet:
    """Every frame of every sequence as a receptive-field window around it.

    Windows are centred on their target frame, or end at it for causal models;
    boundary frames are replicated.
    """

    def __init__(self, pairs, receptive, causal, dtype=np.float32):
        if not pairs:
            raise DataError("empty dataset")
        inputs, targets, starts = [], [], []
        offset = 0
        for p2, p3 in pairs:
            if p3 is None:
                raise DataError(f"sequence {p2.seq_id!r} has no 3D targets")
            f2 = normalize(p2).frames
            padded = pad_frames(np.asarray(f2), receptive, causal)
            T = len(f2)
            if len(padded) < receptive:
                raise DataError(f"sequence {p2.seq_id!r} shorter than the receptive field")
            inputs.append(padded)
            targets.append(np.asarray(p3.frames))
            starts.append(offset + np.arange(T))
            offset += len(padded)
        self.inputs = np.concatenate(inputs).astype(dtype)
        self.targets = np.concatenate(targets).astype(dtype)
        self.starts = np.concatenate(starts)
        self.receptive = receptive

    def __len__(self):
        return len(self.starts)

    def batch(self, idx):
        rows = self.starts[idx][:, None] + np.arange(self.receptive)
        return self.inputs[rows], self.targets[idx][:, None]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model, pairs, mode="layer_by_layer", flip=False):
    """Per-sequence and frame-weighted aggregate MPJPE / P-MPJPE in mm."""
    rows = []
    fn = predict_frames_flip if flip else predict_frames
    for p2, p3 in pairs:
        if p3 is None:
            raise DataError(f"sequence {p2.seq_id!r} has no 3D targets")
        pred = fn(model, normalize(p2).frames, mode)
        rows.append({"id": p2.seq_id, "frames": p2.n_frames,
                     "mpjpe_mm": mpjpe(pred, p3.frames),
                     "p_mpjpe_mm": p_mpjpe(pred, p3.frames)})
    total = sum(r["frames"] for r in rows)
    agg = {"frames": total,
           "mpjpe_mm": sum(r["mpjpe_mm"] * r["frames"] for r in rows) / total,
           "p_mpjpe_mm": sum(r["p_mpjpe_mm"] * r["frames"] for r in rows) / total}
    return {"sequences": rows, "aggregate": agg}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    log: list
    optimizer: OptimizerState
    seconds: float

    def final_train_mpjpe(self):
        return self.log[-1]["train_mpjpe_mm"] if self.log else float("nan")


def train(model, pairs, cfg, eval_pairs=None, eval_every=1, progress=None):
    """Fit ``model`` on (2D, 3D) pairs with single-frame strided windows.

    Returns a :class:`TrainResult` whose ``log`` holds one row per epoch with
    the columns of :data:`LOG_COLUMNS`.
    """
    start = time.perf_counter()
    windows = WindowSet(pairs, model.receptive_field, model.cfg.causal, model.dtype)
    rng = np.random.default_rng(cfg.seed)
    perm_flip = model.skeleton.flip_map()
    for tcb in model.tcb:
        tcb.p = cfg.dropout
    model.cfg.dropout = cfg.dropout
    params = dict(model.named_parameters())
    arrays = {k: p.data for k, p in params.items()}
    state = OptimizerState()
    history = []
    n = len(windows)
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(epoch, cfg)
        model.train()
        order = rng.permutation(n)
        total, count = 0.0, 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            x, y = windows.batch(idx)
            if cfg.flip_augment:
                flip = rng.random(len(idx)) < 0.5
                if flip.any():
                    x[flip] = mirror(x[flip], perm_flip)
                    y[flip] = mirror(y[flip], perm_flip)
            if len(idx) == 1:
                # batch statistics of a single window are degenerate; skip it
                continue
            pred = model(x, strided=True, rng=rng)
            loss = mpjpe_loss(pred, tn.Tensor(y))
            model.zero_grad()
            tn.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            amsgrad_step(arrays, grads, state, lr)
            total += loss.item() * len(idx)
            count += len(idx)
        row = {"epoch": epoch + 1, "lr": lr, "train_mpjpe_mm": total / max(count, 1),
               "eval_mpjpe_mm": float("nan"), "eval_pmpjpe_mm": float("nan")}
        if eval_pairs is not None and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            ev = evaluate(model, eval_pairs)["aggregate"]
            row["eval_mpjpe_mm"] = ev["mpjpe_mm"]
            row["eval_pmpjpe_mm"] = ev["p_mpjpe_mm"]
        history.append(row)
        log.info("epoch %d lr %.6g train %.3f mm", row["epoch"], lr, row["train_mpjpe_mm"])
        if progress is not None:
            progress(row)
    model.eval()
    return TrainResult(model, history, state, time.perf_counter() - start)


def write_loss_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["lr"])] +
                       [f"{r[c]:.6f}" for c in LOG_COLUMNS[2:]])


def config_dict(cfg):
    return asdict(cfg)
