"""Multimodal ViT autoencoder: architecture, training loop, inference.

The encoder embeds channel-stacked multimodal patches, runs pre-norm
transformer blocks, and compresses the token sequence through a fusion
layer into a latent vector. The decoder reshapes the latent into a small
feature map and alternates nearest x2 upsampling with 3x3 convolutions,
center-cropping to the requested image size at the end.

Training adds Gaussian noise to inputs, optimizes MSE + alpha * (1 - SSIM)
against the clean target with Adam, and checkpoints only when the
validation loss improves. No LR schedule, no augmentation, no early stop.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import nncore as nc
from .nncore import Tensor
from .nncore.optim import AdamState, adam_step, init_adam
from .volcore import MultimodalVolume, SliceBatch, ShapeMismatchError


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 240
    patch_size: int = 24
    n_modalities: int = 4
    embed_dim: int = 512
    n_layers: int = 6
    n_heads: int = 8
    ffn_dim: int = 1024
    latent_dim: int = 512
    decoder_seed_shape: tuple[int, int, int] = (8, 8, 8)
    decoder_layers: int = 6
    pooling: str = "flatten"  # "flatten" | "mean"
    pos_embedding: str = "learned"  # "learned" | "sinusoidal"
    ffn_activation: str = "gelu"  # "gelu" | "relu"

    def __post_init__(self):
        self.decoder_seed_shape = tuple(int(v) for v in self.decoder_seed_shape)
        c, s1, s2 = self.decoder_seed_shape
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if s1 != s2:
            raise ConfigError(f"decoder seed must be square, got {self.decoder_seed_shape}")
        if self.latent_dim != c * s1 * s2:
            raise ConfigError(
                f"latent_dim {self.latent_dim} != decoder seed volume {c}*{s1}*{s2}"
            )
        if self.pooling not in ("flatten", "mean"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.pos_embedding not in ("learned", "sinusoidal"):
            raise ConfigError(f"unknown pos_embedding {self.pos_embedding!r}")
        if self.ffn_activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown ffn_activation {self.ffn_activation!r}")
        if min(self.image_size, self.patch_size, self.n_modalities, self.embed_dim,
               self.n_layers, self.n_heads, self.ffn_dim, self.latent_dim,
               self.decoder_layers, c, s1) < 1:
            raise ConfigError("all architecture dimensions must be >= 1")
        if self.n_upsamples > self.decoder_layers:
            raise ConfigError(
                f"decoder needs {self.n_upsamples} upsamples to reach {self.image_size} "
                f"from seed {s1}, but has only {self.decoder_layers} layers"
            )

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.n_modalities

    @property
    def n_upsamples(self) -> int:
        seed_side = self.decoder_seed_shape[1]
        n = 0
        while seed_side * (2**n) < self.image_size:
            n += 1
        return n

    @property
    def decoder_widths(self) -> list[int]:
        """Stage output channels: start wide, halve down to the seed channels."""
        c = self.decoder_seed_shape[0]
        return [c * 2 ** (self.decoder_layers - 1 - i) for i in range(self.decoder_layers)]

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls(
            image_size=96,
            patch_size=12,
            embed_dim=64,
            n_layers=2,
            n_heads=4,
            ffn_dim=128,
            latent_dim=64,
            decoder_seed_shape=(4, 4, 4),
            decoder_layers=5,
        )


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    alpha: float = 100.0
    noise_std: float = 0.2
    ssim_data_range: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "epochs", "ssim_data_range"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("weight_decay", "alpha", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> Tensor, insertion order fixed by build_model
    adam: AdamState | None = None
    best_val_loss: float = math.inf
    epoch: int = 0

    def param_count(self) -> int:
        return sum(int(p.data.size) for p in self.params.values())


def _sinusoidal_embedding(n_tokens, dim):
    pos = np.arange(n_tokens)[:, None].astype(np.float64)
    i = np.arange(dim)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    emb = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return emb.astype(np.float32)


def build_model(cfg: ModelConfig, seed: int) -> ModelState:
    """Instantiate all parameters deterministically from one seed."""
    rng = np.random.Generator(np.random.Philox(seed))
    params: dict[str, Tensor] = {}

    def uniform(name, *shape, fan_in=None):
        fan = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / math.sqrt(fan)
        params[name] = nc.parameter(rng.uniform(-bound, bound, size=shape).astype(np.float32))

    def zeros(name, *shape):
        params[name] = nc.parameter(np.zeros(shape, dtype=np.float32))

    def ones(name, *shape):
        params[name] = nc.parameter(np.ones(shape, dtype=np.float32))

    e = cfg.embed_dim
    uniform("patch_embed.w", cfg.patch_dim, e)
    zeros("patch_embed.b", e)
    if cfg.pos_embedding == "learned":
        params["pos_embed"] = nc.parameter(
            rng.uniform(-0.02, 0.02, size=(cfg.n_tokens, e)).astype(np.float32)
        )
    for i in range(cfg.n_layers):
        ones(f"enc{i}.ln1.g", e)
        zeros(f"enc{i}.ln1.b", e)
        for proj in ("wq", "wk", "wv", "wo"):
            uniform(f"enc{i}.attn.{proj}", e, e)
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"enc{i}.attn.{b}", e)
        ones(f"enc{i}.ln2.g", e)
        zeros(f"enc{i}.ln2.b", e)
        uniform(f"enc{i}.ffn.w1", e, cfg.ffn_dim)
        zeros(f"enc{i}.ffn.b1", cfg.ffn_dim)
        uniform(f"enc{i}.ffn.w2", cfg.ffn_dim, e)
        zeros(f"enc{i}.ffn.b2", e)
    ones("final_ln.g", e)
    zeros("final_ln.b", e)

    pool_dim = cfg.n_tokens * e if cfg.pooling == "flatten" else e
    uniform("fusion.w", pool_dim, cfg.latent_dim)
    zeros("fusion.b", cfg.latent_dim)

    in_ch = cfg.decoder_seed_shape[0]
    for i, out_ch in enumerate(cfg.decoder_widths):
        uniform(f"dec{i}.w", out_ch, in_ch, 3, 3, fan_in=in_ch * 9)
        zeros(f"dec{i}.b", out_ch)
        in_ch = out_ch
    uniform("out_proj.w", cfg.n_modalities, in_ch, 3, 3, fan_in=in_ch * 9)
    zeros("out_proj.b", cfg.n_modalities)
    return ModelState(config=cfg, params=params)


def _patchify(batch: np.ndarray, patch: int) -> np.ndarray:
    """(N, M, H, W) -> (N, tokens, M*patch*patch), non-overlapping patches."""
    n, m, h, w = batch.shape
    gh, gw = h // patch, w // patch
    x = batch.reshape(n, m, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(n, gh * gw, m * patch * patch)


def _activation(cfg):
    return nc.gelu if cfg.ffn_activation == "gelu" else nc.relu


def forward_graph(params: dict, batch: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Differentiable forward pass; batch is (N, M, H, W) float32."""
    n, m, h, w = batch.shape
    if (m, h, w) != (cfg.n_modalities, cfg.image_size, cfg.image_size):
        raise ShapeMismatchError(
            "model input", (m, h, w), (cfg.n_modalities, cfg.image_size, cfg.image_size)
        )
    act = _activation(cfg)
    x = Tensor(_patchify(batch, cfg.patch_size))
    x = nc.linear(x, params["patch_embed.w"], params["patch_embed.b"])
    if cfg.pos_embedding == "learned":
        x = x + params["pos_embed"]
    else:
        x = x + Tensor(_sinusoidal_embedding(cfg.n_tokens, cfg.embed_dim))

    for i in range(cfg.n_layers):
        p = lambda k: params[f"enc{i}.{k}"]
        normed = nc.layer_norm(x, p("ln1.g"), p("ln1.b"))
        x = x + nc.multi_head_attention(
            normed, normed, normed, cfg.n_heads,
            p("attn.wq"), p("attn.bq"), p("attn.wk"), p("attn.bk"),
            p("attn.wv"), p("attn.bv"), p("attn.wo"), p("attn.bo"),
        )
        normed = nc.layer_norm(x, p("ln2.g"), p("ln2.b"))
        hidden = act(nc.linear(normed, p("ffn.w1"), p("ffn.b1")))
        x = x + nc.linear(hidden, p("ffn.w2"), p("ffn.b2"))
    x = nc.layer_norm(x, params["final_ln.g"], params["final_ln.b"])

    if cfg.pooling == "flatten":
        pooled = nc.reshape(x, (n, cfg.n_tokens * cfg.embed_dim))
    else:
        pooled = x.mean(axis=1)
    latent = nc.linear(pooled, params["fusion.w"], params["fusion.b"])

    c, s, _ = cfg.decoder_seed_shape
    z = nc.reshape(latent, (n, c, s, s))
    for i in range(cfg.decoder_layers):
        if i < cfg.n_upsamples:
            z = nc.upsample_nearest2(z)
            side = z.data.shape[-1]
            if side > cfg.image_size:  # crop as soon as the target size is covered
                lo = (side - cfg.image_size) // 2
                z = z[:, :, lo : lo + cfg.image_size, lo : lo + cfg.image_size]
        z = act(nc.conv2d(z, params[f"dec{i}.w"], params[f"dec{i}.b"], padding="same"))
    return nc.conv2d(z, params["out_proj.w"], params["out_proj.b"], padding="same")


def _detached(params: dict) -> dict:
    return {k: Tensor(v.data) for k, v in params.items()}


def forward(state: ModelState, batch) -> np.ndarray:
    """Inference forward pass: (N, M, H, W) in, same shape out, no gradients."""
    data = batch.data if isinstance(batch, SliceBatch) else np.asarray(batch, dtype=np.float32)
    return forward_graph(_detached(state.params), data, state.config).data


def loss_terms(params: dict, noisy: np.ndarray, clean: np.ndarray, cfg: TrainConfig, model_cfg: ModelConfig):
    """Build the training loss graph; returns (loss, mse_value, ssim_value)."""
    recon = forward_graph(params, noisy, model_cfg)
    target = Tensor(clean)
    mse = nc.mse_loss(recon, target)
    sim = nc.ssim(recon, target, data_range=cfg.ssim_data_range)
    loss = mse + cfg.alpha * (1.0 - sim)
    return loss, float(mse.data), float(sim.data)


def _batch_loss_eval(state: ModelState, data: np.ndarray, cfg: TrainConfig) -> float:
    """Noiseless loss over a slice stack, evaluated in chunks."""
    total, count = 0.0, 0
    params = _detached(state.params)
    for start in range(0, len(data), cfg.batch_size):
        chunk = data[start : start + cfg.batch_size]
        loss, _, _ = loss_terms(params, chunk, chunk, cfg, state.config)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def train(
    state: ModelState,
    healthy_train: SliceBatch,
    healthy_val: SliceBatch,
    cfg: TrainConfig,
    checkpoint_dir=None,
    log_fn=None,
):
    """Train in place; returns (state, history).

    History rows are dicts with epoch, train_loss, val_loss, saved; the
    checkpoint is (re)written only on validation improvement.
    """
    train_data = healthy_train.data if isinstance(healthy_train, SliceBatch) else np.asarray(healthy_train)
    val_data = healthy_val.data if isinstance(healthy_val, SliceBatch) else np.asarray(healthy_val)
    if len(train_data) == 0:
        raise ValueError("empty training stream: no healthy slices to train on")
    if len(val_data) == 0:
        raise ValueError("empty validation set")

    if state.adam is None:
        state.adam = init_adam(state.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    history = []
    start_epoch = state.epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        order = rng.permutation(len(train_data))
        loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            clean = train_data[idx]
            noisy = clean + rng.normal(0.0, cfg.noise_std, size=clean.shape).astype(np.float32)
            loss, _, _ = loss_terms(state.params, noisy, clean, cfg, state.config)
            for p in state.params.values():
                p.zero_grad()
            loss.backward()
            adam_step(state.params, state.adam)
            loss_sum += float(loss.data) * len(idx)
        train_loss = loss_sum / len(order)

        val_loss = _batch_loss_eval(state, val_data, cfg)
        saved = val_loss < state.best_val_loss
        state.epoch = epoch
        if saved:
            state.best_val_loss = val_loss
            if checkpoint_dir is not None:
                save_checkpoint(state, checkpoint_dir)
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "saved": saved}
        history.append(row)
        if log_fn:
            log_fn(row)
    return state, history


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "saved"])
        writer.writeheader()
        for row in history:
            writer.writerow({**row, "saved": int(row["saved"])})


# ------------------------------------------------------------- checkpointing


def save_checkpoint(state: ModelState, ckpt_dir) -> None:
    """Atomic write of config + parameters + optimizer moments."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    for name, p in state.params.items():
        manifest.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        offset += int(p.data.size)
    meta = {
        "config": asdict(state.config),
        "epoch": state.epoch,
        "best_val_loss": state.best_val_loss,
        "manifest": manifest,
        "adam": None,
    }
    blobs = {"params.f32": np.concatenate([p.data.ravel() for p in state.params.values()])}
    if state.adam is not None:
        a = state.adam
        meta["adam"] = {
            "lr": a.lr, "weight_decay": a.weight_decay,
            "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "t": a.t,
        }
        blobs["adam_m.f32"] = np.concatenate([a.m[n].ravel() for n in state.params])
        blobs["adam_v.f32"] = np.concatenate([a.v[n].ravel() for n in state.params])

    def atomic_write(name, data: bytes):
        tmp = ckpt_dir / (name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, ckpt_dir / name)

    for name, arr in blobs.items():
        atomic_write(name, np.ascontiguousarray(arr, dtype="<f4").tobytes())
    atomic_write("checkpoint.json", json.dumps(meta, indent=1, sort_keys=True).encode())


def load_checkpoint(ckpt_dir) -> ModelState:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "checkpoint.json") as fh:
        meta = json.load(fh)
    cfg_dict = dict(meta["config"])
    cfg_dict["decoder_seed_shape"] = tuple(cfg_dict["decoder_seed_shape"])
    cfg = ModelConfig(**cfg_dict)
    flat = np.frombuffer((ckpt_dir / "params.f32").read_bytes(), dtype="<f4")
    params = {}
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        params[entry["name"]] = nc.parameter(
            flat[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
        )
    state = ModelState(
        config=cfg,
        params=params,
        best_val_loss=float(meta["best_val_loss"]),
        epoch=int(meta["epoch"]),
    )
    if meta.get("adam") is not None:
        a = meta["adam"]
        adam = init_adam(params, lr=a["lr"], weight_decay=a["weight_decay"],
                         beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"])
        adam.t = int(a["t"])
        flat_m = np.frombuffer((ckpt_dir / "adam_m.f32").read_bytes(), dtype="<f4")
        flat_v = np.frombuffer((ckpt_dir / "adam_v.f32").read_bytes(), dtype="<f4")
        for entry in meta["manifest"]:
            shape = tuple(entry["shape"])
            size = int(np.prod(shape)) if shape else 1
            sl = slice(entry["offset"], entry["offset"] + size)
            adam.m[entry["name"]] = flat_m[sl].reshape(shape).copy()
            adam.v[entry["name"]] = flat_v[sl].reshape(shape).copy()
        state.adam = adam
    return state


# ----------------------------------------------------------------- inference


def reconstruct_volume(state: ModelState, vol: MultimodalVolume, batch_size: int = 32) -> MultimodalVolume:
    """Slice-wise reconstruction of a normalized volume, no noise injection."""
    m, d, h, w = vol.shape
    if (h, w) != (state.config.image_size, state.config.image_size):
        raise ShapeMismatchError(
            "volume spatial size vs model image size",
            (h, w),
            (state.config.image_size, state.config.image_size),
        )
    slices = np.transpose(vol.data, (1, 0, 2, 3))  # (D, M, H, W)
    out = np.empty_like(slices)
    for start in range(0, d, batch_size):
        out[start : start + batch_size] = forward(state, slices[start : start + batch_size])
    return MultimodalVolume(
        modalities=list(vol.modalities),
        data=np.ascontiguousarray(np.transpose(out, (1, 0, 2, 3))),
        spacing_mm=vol.spacing_mm,
    )


def slice_mse_scores(vol: MultimodalVolume, recon: MultimodalVolume) -> np.ndarray:
    """Per-slice mean squared reconstruction error, the anomaly score."""
    diff = (vol.data - recon.data).astype(np.float64)
    return np.mean(diff * diff, axis=(0, 2, 3))
