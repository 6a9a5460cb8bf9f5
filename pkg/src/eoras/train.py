"""Training loop: shuffled mini-batches of sequences, AdamW with exponential
learning-rate decay, per-epoch checkpoints, deterministic resume.

Batches may be split across a small process pool. Each worker sums the
gradients of its contiguous chunk; the master reduces the chunk sums in a
fixed order, so a run is bit-reproducible for a given worker count (the
count is recorded in run.json). Per-epoch shuffles are keyed by
(seed, epoch), which makes resumption from any checkpoint exact.
"""

from __future__ import annotations

import json
import multiprocessing as mp
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .evaluation import quick_model_miou
from .model import AmodalNet, ModelConfig
from .params import adamw_step, load_checkpoint, lr_schedule, save_checkpoint
from .rng import Rng
from .synth import load_dataset
from .tensor import record


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    data: str = ""
    val_data: str | None = None
    epochs: int = 30
    batch_size: int = 4
    lr0: float = 1e-3
    lr_decay: float = 0.95
    weight_decay: float = 5e-4
    lam: float = 1.0
    gamma: float = 2.0
    strict_sum_loss: bool = False
    workers: int = 1
    checkpoint_every: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = asdict(self.model)
        return d

    @staticmethod
    def from_dict(raw: dict) -> "TrainConfig":
        raw = dict(raw)
        model_raw = raw.pop("model", {})
        cfg = TrainConfig(model=ModelConfig.from_json(json.dumps(model_raw)), **raw)
        return cfg


def checkpoint_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, f"checkpoint_ep{epoch:03d}.eors")


def latest_checkpoint(out_dir: str) -> tuple[int, str] | None:
    best = None
    if not os.path.isdir(out_dir):
        return None
    for name in os.listdir(out_dir):
        if name.startswith("checkpoint_ep") and name.endswith(".eors"):
            epoch = int(name[len("checkpoint_ep"):-len(".eors")])
            if best is None or epoch > best[0]:
                best = (epoch, os.path.join(out_dir, name))
    return best


# ---------------------------------------------------------------------------
# gradient workers

_WORKER: dict = {}


def _worker_init(cfg_dict: dict, data_path: str):
    cfg = TrainConfig.from_dict(cfg_dict)
    _WORKER["net"] = AmodalNet(cfg.model, seed=cfg.seed)
    _WORKER["cfg"] = cfg
    _WORKER["data"] = load_dataset(data_path)


def _chunk_grads_local(net: AmodalNet, cfg: TrainConfig, data, chunk: list[int]):
    """Summed gradients and losses over one chunk of sequence indices."""
    net.store.zero_grad()
    losses = []
    for idx in chunk:
        with record() as tape:
            loss = net.loss_on_sequence(data[idx], lam=cfg.lam, gamma=cfg.gamma,
                                        strict_sum=cfg.strict_sum_loss)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"non-finite loss on sequence index {idx}")
        tape.backward(loss)
        losses.append(loss.item())
    return net.store.grad_flat(), losses


def _worker_task(args):
    param_vec, chunk = args
    net, cfg = _WORKER["net"], _WORKER["cfg"]
    net.store.set_flat(param_vec)
    return _chunk_grads_local(net, cfg, _WORKER["data"], chunk)


def _split_chunks(batch: list[int], workers: int) -> list[list[int]]:
    per = (len(batch) + workers - 1) // workers
    return [batch[i:i + per] for i in range(0, len(batch), per)]


# ---------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str, resume: bool = False,
                 log=print):
        if not cfg.data:
            raise ConfigError("training requires a dataset path")
        self.cfg = cfg
        self.out_dir = out_dir
        self.log = log
        os.makedirs(out_dir, exist_ok=True)
        self.data = load_dataset(cfg.data)
        if not self.data:
            raise DataError(f"{cfg.data}: empty dataset")
        for seq in self.data:
            if seq.image_size != cfg.model.image_size:
                raise DataError(f"{seq.name}: image size {seq.image_size} does not "
                                f"match model image_size {cfg.model.image_size}")
        self.val = load_dataset(cfg.val_data) if cfg.val_data else None
        self.start_epoch = 0
        self.csv_rows: list[str] = []
        if resume:
            found = latest_checkpoint(out_dir)
            if found:
                epoch, path = found
                store, meta = load_checkpoint(path)
                self.net = AmodalNet(cfg.model, store=store, seed=cfg.seed)
                self.start_epoch = epoch + 1
                self._load_csv(upto=epoch)
                self.log(f"resuming from epoch {epoch}")
            else:
                self.net = AmodalNet(cfg.model, seed=cfg.seed)
        else:
            if latest_checkpoint(out_dir):
                raise ConfigError(f"{out_dir} already contains checkpoints; "
                                  "pass --resume to continue")
            self.net = AmodalNet(cfg.model, seed=cfg.seed)
        self.pool = None

    def _load_csv(self, upto: int) -> None:
        path = os.path.join(self.out_dir, "train_log.csv")
        if not os.path.exists(path):
            return
        with open(path) as fh:
            lines = fh.read().splitlines()
        self.csv_rows = [ln for ln in lines[1:]
                         if ln and int(ln.split(",")[0]) <= upto]

    def _write_csv(self) -> None:
        path = os.path.join(self.out_dir, "train_log.csv")
        with open(path, "w") as fh:
            fh.write("epoch,lr,train_loss,val_miou_full,val_miou_occ\n")
            for row in self.csv_rows:
                fh.write(row + "\n")

    def _batch_grads(self, batch: list[int], param_vec: np.ndarray):
        chunks = _split_chunks(batch, self.cfg.workers)
        if self.cfg.workers <= 1 or len(chunks) == 1:
            results = [_chunk_grads_local(self.net, self.cfg, self.data, c)
                       for c in chunks]
        else:
            if self.pool is None:
                ctx = mp.get_context("fork")
                self.pool = ctx.Pool(self.cfg.workers, initializer=_worker_init,
                                     initargs=(self.cfg.to_dict(), self.cfg.data))
            results = self.pool.map(_worker_task,
                                    [(param_vec, c) for c in chunks])
        total = results[0][0]
        losses = list(results[0][1])
        for vec, ls in results[1:]:
            total = total + vec
            losses.extend(ls)
        return total, losses

    def train(self) -> str:
        cfg = self.cfg
        n = len(self.data)
        final_path = os.path.join(self.out_dir, "checkpoint_final.eors")
        for epoch in range(self.start_epoch, cfg.epochs):
            lr = lr_schedule(cfg.lr0, epoch, cfg.lr_decay)
            order = list(range(n))
            Rng(cfg.seed, "shuffle", epoch).shuffle(order)
            epoch_losses: list[float] = []
            for i in range(0, n, cfg.batch_size):
                batch = order[i:i + cfg.batch_size]
                grad, losses = self._batch_grads(batch, self.net.store.get_flat())
                self.net.store.set_grad_flat(grad / len(batch))
                adamw_step(self.net.store, lr, weight_decay=cfg.weight_decay)
                epoch_losses.extend(losses)
            train_loss = float(np.mean(epoch_losses))
            vf, vo = ("", "")
            if self.val is not None:
                miou_full, miou_occ = quick_model_miou(self.net, self.val)
                vf = f"{miou_full:.6f}"
                vo = miou_occ if isinstance(miou_occ, str) else f"{miou_occ:.6f}"
            self.csv_rows.append(f"{epoch},{lr:.10g},{train_loss:.10g},{vf},{vo}")
            self._write_csv()
            if cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0
                                         or epoch == cfg.epochs - 1):
                self._save(checkpoint_path(self.out_dir, epoch), epoch)
            self.log(f"epoch {epoch}: lr {lr:.3e} loss {train_loss:.5f}"
                     + (f" val {vf}/{vo}" if vf else ""))
        self._save(final_path, cfg.epochs - 1)
        if self.pool is not None:
            self.pool.terminate()
            self.pool = None
        return final_path

    def _save(self, path: str, epoch: int) -> None:
        save_checkpoint(self.net.store, path, meta={
            "config": self.cfg.model.to_json(),
            "train_state": json.dumps({"epoch": epoch}, sort_keys=True),
        })


def load_model(path: str) -> AmodalNet:
    """Self-describing checkpoint -> model (config rides in the metadata)."""
    store, meta = load_checkpoint(path)
    if "config" not in meta:
        raise DataError(f"{path}: checkpoint carries no model config")
    cfg = ModelConfig.from_json(meta["config"])
    return AmodalNet(cfg, store=store)
