"""AdamW, schedules, checkpoints and the autoencoder training loop."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import GraphBatch, TypedPointCloud
from .data import SynthConfig, augment
from .loss import LossConfig, anneal_sigma, loss_terms
from .model import Autoencoder, ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"MO3E"
FORMAT_VERSION = 1


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, msg: str, last_good: "Checkpoint | None" = None):
        super().__init__(msg)
        self.last_good = last_good


class CheckpointFormatError(ValueError):
    pass


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.005


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: Sequence[Tensor], cfg: AdamWConfig | None = None):
        self.params = list(params)
        self.cfg = cfg or AdamWConfig()
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (and leaves everything untouched) if
        any gradient is non-finite."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient at update %d, step skipped", self.t + 1)
            return False
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p.data *= 1.0 - lr * c.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return True

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.m.{k}"] = m.copy()
            out[f"opt.v.{k}"] = v.copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in range(len(self.params)):
            self.m[k] = arrays[f"opt.m.{k}"].copy()
            self.v[k] = arrays[f"opt.v.{k}"].copy()
        self.t = t


# -- schedules ------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr_start: float = 5e-5
    lr_peak: float = 1e-3
    lr_floor: float = 1e-6
    warmup_steps: int = 100
    lr_decay: float = 0.999  # per step after warmup
    weight_decay: float = 0.005
    batch_start: int = 10
    batch_max: int = 64
    batch_growth: float = 1.05  # per epoch
    epochs: int = 100
    eval_every: int = 1  # epochs
    grad_clip: float = 0.0  # global norm; 0 disables
    augment: bool = False
    wall_limit: float = 0.0  # seconds; 0 disables
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_start", "lr_peak", "lr_floor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_start < 1 or self.batch_start > self.batch_max:
            raise ValueError(f"need 1 <= batch_start <= batch_max, got {self.batch_start}, {self.batch_max}")
        if self.epochs < 0 or self.eval_every < 1 or self.warmup_steps < 0:
            raise ValueError("epochs, eval_every and warmup_steps must be non-negative (eval_every >= 1)")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``lr_start`` to ``lr_peak``, then exponential decay
    clamped at ``lr_floor``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / cfg.warmup_steps
    return max(cfg.lr_floor, cfg.lr_peak * cfg.lr_decay ** (step - cfg.warmup_steps))


def batch_size(epoch: int, cfg: TrainConfig) -> int:
    return int(min(cfg.batch_max, math.floor(cfg.batch_start * cfg.batch_growth ** epoch)))


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm and math.isfinite(total):
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- checkpoints ----------------------------------------------------------------

def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # step, sigma, optimizer t, configs

    def build_model(self) -> Autoencoder:
        model = Autoencoder(ModelConfig(**self.model_config))
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", FORMAT_VERSION))
        header = json.dumps({"model_config": self.model_config, "meta": self.meta},
                            sort_keys=True).encode()
        buf.write(struct.pack("<Q", len(header)))
        buf.write(header)
        arrays = [(f"param.{k}", v) for k, v in self.params.items()]
        arrays += [(k, v) for k, v in self.optimizer.items()]
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode()
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<I", arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            buf.write(struct.pack("<Q", arr.size))
            buf.write(arr.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        f = io.BytesIO(blob)

        def read(n):
            chunk = f.read(n)
            if len(chunk) != n:
                raise CheckpointFormatError("truncated checkpoint")
            return chunk

        if read(4) != MAGIC:
            raise CheckpointFormatError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", read(4))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", read(8))
        header = json.loads(read(hlen))
        (count,) = struct.unpack("<I", read(4))
        params, opt = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", read(4))
            name = read(nlen).decode()
            (ndim,) = struct.unpack("<I", read(4))
            shape = struct.unpack(f"<{ndim}Q", read(8 * ndim))
            (size,) = struct.unpack("<Q", read(8))
            arr = np.frombuffer(read(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
            if name.startswith("param."):
                params[name[len("param."):]] = arr
            else:
                opt[name] = arr
        return cls(header["model_config"], params, opt, header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def make_checkpoint(model: Autoencoder, opt: AdamW | None, meta: dict) -> Checkpoint:
    return Checkpoint(model.cfg.to_dict(), model.state_dict(),
                      opt.state_arrays() if opt else {},
                      dict(meta, opt_t=opt.t if opt else 0))


# -- training loop --------------------------------------------------------------

METRIC_COLUMNS = ("step", "epoch", "L", "L_c", "L_w", "L_d", "sigma", "self_overlap",
                  "eval_loss", "lr", "batch_size")


@dataclass
class TrainResult:
    model: Autoencoder
    loss_config: LossConfig
    history: list[dict]
    best: Checkpoint | None
    final: Checkpoint
    anneal_events: list[dict]
    stop_reason: str

    def metrics_csv(self, cfg_hash: str = "") -> str:
        return metrics_to_csv(self.history, cfg_hash)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_to_csv(history: Sequence[dict], cfg_hash: str = "") -> str:
    lines = [f"# config_hash={cfg_hash}", ",".join(METRIC_COLUMNS)]
    lines += [",".join(_fmt(row.get(c)) for c in METRIC_COLUMNS) for row in history]
    return "\n".join(lines) + "\n"


def evaluate(model: Autoencoder, clouds: Sequence[TypedPointCloud], loss_cfg: LossConfig,
             chunk: int = 64) -> tuple[float, float]:
    """(mean per-molecule reconstruction loss, mean atom self-overlap)."""
    recon, selfo, n_atoms = [], [], []
    for lo in range(0, len(clouds), chunk):
        part = list(clouds[lo:lo + chunk])
        batch = GraphBatch.from_clouds(part)
        terms = loss_terms(batch, model.forward(batch), loss_cfg)
        recon.append(terms.reconstruction.data)
        selfo.append(terms.self_overlap * batch.counts)
        n_atoms.append(batch.counts)
    return (float(np.concatenate(recon).mean()),
            float(np.concatenate(selfo).sum() / np.concatenate(n_atoms).sum()))


def train_autoencoder(train_set: Sequence[TypedPointCloud], cfg: TrainConfig,
                      model_cfg: ModelConfig | None = None,
                      loss_cfg: LossConfig | None = None,
                      eval_set: Sequence[TypedPointCloud] | None = None,
                      synth_cfg: SynthConfig | None = None,
                      checkpoint_path=None, model: Autoencoder | None = None) -> TrainResult:
    """Minibatch AdamW training with batch ramp, σ annealing on the eval loss
    and checkpointing whenever the eval loss improves at the current σ."""
    if not train_set:
        raise ValueError("empty training set")
    model = model or Autoencoder(model_cfg or ModelConfig())
    loss_cfg = loss_cfg or LossConfig(type_scale=model.cfg.type_scale)
    eval_set = list(eval_set) if eval_set is not None else list(train_set)
    synth_cfg = synth_cfg or SynthConfig()
    params = model.parameters()
    opt = AdamW(params, AdamWConfig(weight_decay=cfg.weight_decay))
    rng = np.random.default_rng(cfg.seed)
    history, events = [], []
    best, best_loss, best_sigma = None, math.inf, loss_cfg.sigma
    step, t0 = 0, time.monotonic()
    stop = "epochs"
    model.train()

    def meta():
        return {"step": step, "sigma": loss_cfg.sigma,
                "annealing_stopped": loss_cfg.annealing_stopped,
                "train_config": dataclasses.asdict(cfg)}

    for epoch in range(cfg.epochs):
        bs = batch_size(epoch, cfg)
        order = rng.permutation(len(train_set))
        for lo in range(0, len(order), bs):
            idx = order[lo:lo + bs]
            clouds = [train_set[i] for i in idx]
            if cfg.augment:
                clouds = [augment(c, synth_cfg, [cfg.seed, step, int(i)]) for c, i in zip(clouds, idx)]
            batch = GraphBatch.from_clouds(clouds)
            terms = loss_terms(batch, model.forward(batch), loss_cfg)
            total = terms.mean_total()
            if not math.isfinite(total.item()):
                raise DivergenceError(f"non-finite loss at step {step}", best)
            ad.zero_grad(params)
            ad.backward(total)
            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            lr = lr_schedule(step, cfg)
            opt.step(lr)
            br = terms.breakdown()
            history.append({"step": step, "epoch": epoch, "L": br.reconstruction, "L_c": br.radial,
                            "L_w": br.weight, "L_d": br.nearest, "sigma": loss_cfg.sigma,
                            "self_overlap": br.self_overlap, "eval_loss": None, "lr": lr,
                            "batch_size": len(idx)})
            step += 1

        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            model.train(False)
            eval_loss, eval_self = evaluate(model, eval_set, loss_cfg)
            model.train()
            if not math.isfinite(eval_loss):
                raise DivergenceError(f"non-finite eval loss after epoch {epoch}", best)
            history[-1]["eval_loss"] = eval_loss
            if loss_cfg.sigma != best_sigma:
                best_loss, best_sigma = math.inf, loss_cfg.sigma
            if eval_loss < best_loss:
                best_loss = eval_loss
                best = make_checkpoint(model, opt, dict(meta(), eval_loss=eval_loss))
                if checkpoint_path is not None:
                    best.save(checkpoint_path)
            new_cfg = anneal_sigma(loss_cfg, eval_loss, eval_self)
            if new_cfg.sigma != loss_cfg.sigma:
                events.append({"step": step, "epoch": epoch, "eval_loss": eval_loss,
                               "sigma_before": loss_cfg.sigma, "sigma_after": new_cfg.sigma})
            loss_cfg = new_cfg
            if loss_cfg.annealing_stopped:
                stop = "sigma"
                break
        if cfg.wall_limit and time.monotonic() - t0 > cfg.wall_limit:
            stop = "wall"
            break

    model.train(False)
    final = make_checkpoint(model, opt, meta())
    return TrainResult(model, loss_cfg, history, best, final, events, stop)

