"""Beta-VAE models: Gaussian encoder, reparameterized sampling, decoder,
closed-form KL, and the beta-weighted ELBO with Adam training.

Images cross the public API as (H, W, C) numpy arrays in [0, 1]; torch is an
internal backend. A loaded model is immutable for inference purposes and may
serve concurrent encode/decode calls; training is single-writer.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataio import Dataset

MAGIC = b"VAEAUDIT-CKPT1\n"
DEFAULT_BETAS = (1.0, 5.0, 10.0)
DEFAULT_LEARNING_RATE = 1e-4


class VaeError(ValueError):
    """Invalid model configuration or input."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective settings for one beta-VAE.

    `hidden` holds conv channels per downsampling block for arch="conv"
    (each block halves H and W), or layer widths for arch="mlp" (empty means
    linear heads straight from the flattened image).
    """

    input_dims: tuple[int, int, int]  # (H, W, C)
    latent_dim: int
    beta: float = 1.0
    arch: str = "conv"
    hidden: tuple[int, ...] = (32, 64)
    recon_loss: str = "bce"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        h, w, c = self.input_dims
        n = h * w * c
        if self.latent_dim < 1 or self.latent_dim >= n:
            raise VaeError(f"latent_dim must satisfy 1 <= M < N={n}, got {self.latent_dim}")
        if self.beta < 1.0:
            raise VaeError(f"beta must be >= 1, got {self.beta}")
        if self.arch not in ("conv", "mlp"):
            raise VaeError(f"unknown arch {self.arch!r}")
        if self.recon_loss not in ("bce", "mse"):
            raise VaeError(f"unknown recon_loss {self.recon_loss!r}")
        if self.dtype not in ("float32", "float64"):
            raise VaeError(f"unknown dtype {self.dtype!r}")
        if self.arch == "conv":
            blocks = len(self.hidden)
            if blocks < 1:
                raise VaeError("conv arch needs at least one block")
            if h % (1 << blocks) or w % (1 << blocks):
                raise VaeError(f"input {h}x{w} not divisible by 2^{blocks} conv blocks")

    @property
    def pixel_count(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "latent_dim": self.latent_dim,
            "beta": self.beta,
            "arch": self.arch,
            "hidden": list(self.hidden),
            "recon_loss": self.recon_loss,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ModelConfig":
        return cls(
            input_dims=tuple(raw["input_dims"]),
            latent_dim=int(raw["latent_dim"]),
            beta=float(raw["beta"]),
            arch=raw["arch"],
            hidden=tuple(raw["hidden"]),
            recon_loss=raw["recon_loss"],
            dtype=raw["dtype"],
        )


def default_config(resolution: tuple[int, int, int] = (64, 64, 3), beta: float = 1.0) -> ModelConfig:
    """4-block conv encoder/decoder with a 32-d latent at 64x64."""
    return ModelConfig(
        input_dims=resolution, latent_dim=32, beta=beta, arch="conv", hidden=(32, 64, 128, 256)
    )


@dataclass(frozen=True)
class LatentCode:
    """Diagonal-Gaussian posterior parameters for one input."""

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.mean, dtype=np.float64)
        lv = np.asarray(self.log_variance, dtype=np.float64)
        if m.ndim != 1 or lv.shape != m.shape:
            raise VaeError(f"latent code vectors must be 1-D and equal length, got {m.shape} / {lv.shape}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(lv))):
            raise VaeError("latent code entries must be finite")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "log_variance", lv)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.log_variance)


def kl_divergence(code: LatentCode) -> float:
    """KL(q || N(0, I)) in closed form: 0.5 * sum(mu^2 + var - 1 - log var)."""
    mu, lv = code.mean, code.log_variance
    return float(0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv))


def reparameterize(code: LatentCode, seed: int) -> np.ndarray:
    """Draw z = mu + sigma * eps with eps ~ N(0, I) from a seeded generator."""
    eps = np.random.default_rng(seed).standard_normal(code.mean.shape[0])
    return code.mean + code.std * eps


@dataclass(frozen=True)
class ElboTerms:
    total: float
    recon: float
    kl: float


@dataclass(frozen=True)
class EpochLoss:
    epoch: int
    total: float
    recon: float
    kl: float


# ---------------------------------------------------------------------------
# Networks


class _MlpEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        widths = [config.pixel_count, *config.hidden]
        layers: list[nn.Module] = []
        for a, b in zip(widths, widths[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.fc_mu = nn.Linear(widths[-1], config.latent_dim)
        self.fc_logvar = nn.Linear(widths[-1], config.latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.body(x.flatten(1))
        return self.fc_mu(h), self.fc_logvar(h)


class _MlpDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dims = config.input_dims
        widths = [config.latent_dim, *reversed(config.hidden)]
        layers: list[nn.Module] = []
        for a, b in zip(widths, widths[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        layers.append(nn.Linear(widths[-1], config.pixel_count))
        self.body = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h, w, c = self.dims
        return self.body(z).view(-1, c, h, w)


class _ConvEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w, c = config.input_dims
        layers: list[nn.Module] = []
        prev = c
        for ch in config.hidden:
            layers += [nn.Conv2d(prev, ch, kernel_size=4, stride=2, padding=1), nn.ReLU()]
            prev = ch
        self.conv = nn.Sequential(*layers)
        blocks = len(config.hidden)
        flat = prev * (h >> blocks) * (w >> blocks)
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.conv(x).flatten(1)
        return self.fc_mu(h), self.fc_logvar(h)


class _ConvDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w, c = config.input_dims
        blocks = len(config.hidden)
        self.top_ch = config.hidden[-1]
        self.top_hw = (h >> blocks, w >> blocks)
        self.fc = nn.Linear(config.latent_dim, self.top_ch * self.top_hw[0] * self.top_hw[1])
        layers: list[nn.Module] = []
        channels = list(reversed(config.hidden))
        for i, ch in enumerate(channels):
            out_ch = channels[i + 1] if i + 1 < len(channels) else c
            layers.append(nn.ConvTranspose2d(ch, out_ch, kernel_size=4, stride=2, padding=1))
            if i + 1 < len(channels):
                layers.append(nn.ReLU())
        self.deconv = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.fc(z))
        h = h.view(-1, self.top_ch, *self.top_hw)
        return self.deconv(h)


class BetaVaeNet(nn.Module):
    """Encoder producing (mu, logvar) plus a logit-output decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.arch == "conv":
            self.encoder: nn.Module = _ConvEncoder(config)
            self.decoder: nn.Module = _ConvDecoder(config)
        else:
            self.encoder = _MlpEncoder(config)
            self.decoder = _MlpDecoder(config)

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoder(x)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z))


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + raw little-endian parameter blobs.


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict

    def save(self, path: str | Path) -> None:
        manifest = []
        blobs = []
        offset = 0
        for name, arr in self.params.items():
            data = np.ascontiguousarray(arr).tobytes()
            manifest.append(
                {
                    "name": name,
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            blobs.append(data)
            offset += len(data)
        header = json.dumps(
            {"config": self.config.to_dict(), "meta": self.meta, "arrays": manifest},
            sort_keys=True,
            separators=(",", ":"),
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(MAGIC):
            raise VaeError(f"{path}: not a vaeaudit checkpoint")
        pos = len(MAGIC)
        (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
        pos += 4
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        params: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            start = pos + entry["offset"]
            data = raw[start : start + entry["nbytes"]]
            arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            params[entry["name"]] = arr.copy()
        return cls(config=ModelConfig.from_dict(header["config"]), params=params, meta=header["meta"])


# ---------------------------------------------------------------------------
# Model wrapper


class VaeModel:
    """A beta-VAE with numpy in/out and deterministic inference.

    encode/decode/reconstruct are pure functions of (parameters, input);
    stochastic paths consume explicit seeds.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, _net: BetaVaeNet | None = None, meta: dict | None = None):
        self.config = config
        if _net is None:
            torch.manual_seed(seed)
            _net = BetaVaeNet(config).to(self.torch_dtype)
        self.net = _net
        self.net.eval()
        self.meta = dict(meta) if meta else {"epochs": 0, "seed": seed, "final_loss": None}

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.config.dtype == "float64" else torch.float32

    # -- numpy <-> torch plumbing

    def _to_input_t(self, x: np.ndarray) -> torch.Tensor:
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != self.config.input_dims:
            raise VaeError(f"input shape {arr.shape} != configured {self.config.input_dims}")
        return torch.from_numpy(arr.transpose(2, 0, 1)[None]).to(self.torch_dtype)

    def _to_batch_t(self, xs: np.ndarray) -> torch.Tensor:
        arr = np.asarray(xs, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1:] != self.config.input_dims:
            raise VaeError(f"batch shape {arr.shape} != (n, *{self.config.input_dims})")
        return torch.from_numpy(arr.transpose(0, 3, 1, 2)).to(self.torch_dtype)

    def _from_output_t(self, t: torch.Tensor) -> np.ndarray:
        return t.detach().to(torch.float64).numpy()[0].transpose(1, 2, 0)

    def _encode_t(self, x_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.net.encode(x_t)

    def _decode_t(self, z_t: torch.Tensor) -> torch.Tensor:
        return self.net.decode(z_t)

    # -- public inference API

    def encode(self, x: np.ndarray) -> LatentCode:
        """Posterior parameters (mu, log-variance) for one image."""
        with torch.no_grad():
            mu, logvar = self.net.encode(self._to_input_t(x))
        return LatentCode(
            mean=mu[0].to(torch.float64).numpy(), log_variance=logvar[0].to(torch.float64).numpy()
        )

    def encode_batch(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            mu, logvar = self.net.encode(self._to_batch_t(xs))
        return mu.to(torch.float64).numpy(), logvar.to(torch.float64).numpy()

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Reconstruction mean image in [0, 1] for one latent vector."""
        arr = np.asarray(z, dtype=np.float64)
        if arr.shape != (self.config.latent_dim,):
            raise VaeError(f"latent shape {arr.shape} != ({self.config.latent_dim},)")
        with torch.no_grad():
            out = self.net.decode(torch.from_numpy(arr[None]).to(self.torch_dtype))
        return self._from_output_t(out)

    def reconstruct(self, x: np.ndarray, mode: str = "deterministic", seed: int = 0, samples: int = 1) -> np.ndarray:
        """Decode of the posterior mean, or a seeded posterior-sample average."""
        if mode == "deterministic":
            with torch.no_grad():
                mu, _ = self.net.encode(self._to_input_t(x))
                out = self.net.decode(mu)
            return self._from_output_t(out)
        if mode != "stochastic":
            raise VaeError(f"unknown reconstruction mode {mode!r}")
        if samples < 1:
            raise VaeError(f"stochastic mode needs samples >= 1, got {samples}")
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            mu, logvar = self.net.encode(self._to_input_t(x))
            std = torch.exp(0.5 * logvar)
            acc = torch.zeros(1, *self._chw(), dtype=self.torch_dtype)
            for _ in range(samples):
                eps = torch.randn(mu.shape, generator=gen, dtype=self.torch_dtype)
                acc += self.net.decode(mu + std * eps)
        return self._from_output_t(acc / samples)

    def recon_loss(self, x: np.ndarray) -> float:
        """Per-pixel mean squared error of the deterministic reconstruction."""
        arr = np.asarray(x, dtype=np.float64)
        diff = self.reconstruct(arr) - arr
        return float(np.mean(diff * diff))

    # -- ELBO

    def _elbo_t(self, x_t: torch.Tensor, eps_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-sample-summed recon NLL and KL, averaged over the batch."""
        mu, logvar = self.net.encode(x_t)
        z = mu + torch.exp(0.5 * logvar) * eps_t
        logits = self.net.decode_logits(z)
        batch = x_t.shape[0]
        if self.config.recon_loss == "bce":
            recon = F.binary_cross_entropy_with_logits(logits, x_t, reduction="sum") / batch
        else:
            recon = torch.sum((torch.sigmoid(logits) - x_t) ** 2) / batch
        kl = 0.5 * torch.sum(mu * mu + torch.exp(logvar) - 1.0 - logvar) / batch
        return recon + self.config.beta * kl, recon, kl

    def elbo_loss(self, x: np.ndarray, seed: int = 0) -> ElboTerms:
        """Training objective at one input: recon NLL + beta * KL.

        The reparameterization noise is drawn from `seed`, so the value is a
        deterministic, differentiable function of the parameters.
        """
        x_t = self._to_input_t(x)
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn((1, self.config.latent_dim), generator=gen, dtype=self.torch_dtype)
        with torch.no_grad():
            total, recon, kl = self._elbo_t(x_t, eps)
        return ElboTerms(total=float(total), recon=float(recon), kl=float(kl))

    def elbo_gradients(self, x: np.ndarray, seed: int = 0) -> dict[str, np.ndarray]:
        """Parameter gradients of the total ELBO loss at one input."""
        x_t = self._to_input_t(x)
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn((1, self.config.latent_dim), generator=gen, dtype=self.torch_dtype)
        self.net.zero_grad(set_to_none=True)
        total, _, _ = self._elbo_t(x_t, eps)
        total.backward()
        grads = {
            name: (torch.zeros_like(p) if p.grad is None else p.grad).to(torch.float64).numpy().copy()
            for name, p in self.net.named_parameters()
        }
        self.net.zero_grad(set_to_none=True)
        return grads

    def _chw(self) -> tuple[int, int, int]:
        h, w, c = self.config.input_dims
        return (c, h, w)

    # -- persistence

    def to_checkpoint(self) -> Checkpoint:
        params = {
            name: tensor.detach().numpy().copy()
            for name, tensor in self.net.state_dict().items()
        }
        return Checkpoint(config=self.config, params=params, meta=dict(self.meta))

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint) -> "VaeModel":
        torch.manual_seed(0)  # init values are immediately overwritten
        net = BetaVaeNet(checkpoint.config)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in checkpoint.params.items()}
        net.load_state_dict(state)
        dtype = torch.float64 if checkpoint.config.dtype == "float64" else torch.float32
        return cls(checkpoint.config, _net=net.to(dtype), meta=checkpoint.meta)

    @classmethod
    def load(cls, path: str | Path) -> "VaeModel":
        return cls.from_checkpoint(Checkpoint.load(path))

    def save(self, path: str | Path) -> None:
        self.to_checkpoint().save(path)


# ---------------------------------------------------------------------------
# Training


def train(
    dataset: Dataset,
    config: ModelConfig,
    epochs: int,
    seed: int,
    lr: float = DEFAULT_LEARNING_RATE,
    batch_size: int = 64,
    start_model: VaeModel | None = None,
) -> tuple[VaeModel, list[EpochLoss]]:
    """Adam optimization of the beta-weighted ELBO.

    Deterministic under a fixed seed on a deterministic backend. With
    epochs=0 the initialized model is returned untouched and remains valid
    for inference. Raises TrainingDiverged on a non-finite loss.
    """
    if len(dataset) == 0:
        raise VaeError("cannot train on an empty dataset")
    model = start_model if start_model is not None else VaeModel(config, seed=seed)
    if model.config != config:
        raise VaeError("start_model config does not match requested config")
    xs = np.stack([s.pixels for s in dataset.samples])
    data = model._to_batch_t(xs)
    n = data.shape[0]

    gen = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=lr)
    start_epoch = int(model.meta.get("epochs", 0))
    history: list[EpochLoss] = []

    model.net.train()
    try:
        for epoch in range(epochs):
            perm = torch.randperm(n, generator=gen)
            sums = np.zeros(3)
            for lo in range(0, n, batch_size):
                idx = perm[lo : lo + batch_size]
                batch = data[idx]
                eps = torch.randn(
                    (batch.shape[0], config.latent_dim), generator=gen, dtype=model.torch_dtype
                )
                optimizer.zero_grad(set_to_none=True)
                total, recon, kl = model._elbo_t(batch, eps)
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {start_epoch + epoch}, batch offset {lo}"
                    )
                total.backward()
                optimizer.step()
                weight = batch.shape[0]
                sums += weight * np.array(
                    [float(total.detach()), float(recon.detach()), float(kl.detach())]
                )
            mean = sums / n
            history.append(
                EpochLoss(epoch=start_epoch + epoch, total=mean[0], recon=mean[1], kl=mean[2])
            )
    finally:
        model.net.eval()

    model.meta["epochs"] = start_epoch + epochs
    model.meta["seed"] = seed if start_model is None else model.meta.get("seed", seed)
    if history:
        model.meta["final_loss"] = history[-1].total
    return model, history


def write_loss_history_csv(history: Sequence[EpochLoss], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "recon", "kl"])
        for row in history:
            writer.writerow([row.epoch, repr(row.total), repr(row.recon), repr(row.kl)])
