"""Shared fixtures: tiny datasets, stub encoders with analytic optima."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
import torch

from vaeaudit import dataio, vae


def make_dataset(
    height: int = 8,
    width: int = 8,
    majority: int = 10,
    minority: int = 4,
    noise: float = 0.03,
    seed: int = 1,
) -> tuple[dataio.Dataset, dataio.SubgroupTable]:
    cards, protos = dataio.imbalanced_benchmark_spec(
        height=height, width=width, majority=majority, minority=minority
    )
    return dataio.generate_synthetic_dataset(cards, protos, noise, seed=seed)


@pytest.fixture(scope="session")
def tiny_dataset() -> tuple[dataio.Dataset, dataio.SubgroupTable]:
    return make_dataset()


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset) -> vae.VaeModel:
    """A briefly trained small MLP model shared across read-only tests."""
    dataset, _ = tiny_dataset
    config = vae.ModelConfig(
        input_dims=dataset.image_shape, latent_dim=4, beta=1.0, arch="mlp", hidden=(32,)
    )
    model, _ = vae.train(dataset, config, epochs=3, seed=0, batch_size=16)
    return model


class LinearEncoderModel:
    """Deterministic single-latent encoder mu = <w, x>; logvar = 0.

    The maximum-damage optimum under an L-inf budget c is attained at
    delta = c * sign(w) with objective c * ||w||_1, provided x + delta stays
    inside [0, 1] (choose interior x).
    """

    torch_dtype = torch.float64

    def __init__(self, w: np.ndarray):
        self.w = np.asarray(w, dtype=np.float64)  # (H, W, C)
        self._w_t = torch.from_numpy(self.w.transpose(2, 0, 1)[None])
        self.config = SimpleNamespace(beta=1.0, input_dims=self.w.shape, latent_dim=1)

    def _encode_t(self, x_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu = torch.sum(self._w_t * x_t, dim=(1, 2, 3), keepdim=False)[:, None]
        return mu, torch.zeros_like(mu)

    def _decode_t(self, z_t: torch.Tensor) -> torch.Tensor:
        shape = (z_t.shape[0], self.w.shape[2], self.w.shape[0], self.w.shape[1])
        return z_t[:, :, None, None].expand(shape) * self._w_t

    def encode(self, x: np.ndarray) -> vae.LatentCode:
        mu = float(np.sum(self.w * np.asarray(x, dtype=np.float64)))
        return vae.LatentCode(mean=np.array([mu]), log_variance=np.zeros(1))

    def optimum(self, c: float) -> float:
        return c * float(np.sum(np.abs(self.w)))


class IdentityModel:
    """Encoder mu = flatten(x); decoder reshapes back, so reconstruction is
    lossless. Attack optimum for interior x is c * sqrt(N)."""

    torch_dtype = torch.float64

    def __init__(self, shape: tuple[int, int, int]):
        self.shape = shape
        self.config = SimpleNamespace(
            beta=1.0, input_dims=shape, latent_dim=int(np.prod(shape))
        )

    def _encode_t(self, x_t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu = x_t.reshape(x_t.shape[0], -1)
        return mu, torch.zeros_like(mu)

    def _decode_t(self, z_t: torch.Tensor) -> torch.Tensor:
        h, w, c = self.shape
        return z_t.reshape(z_t.shape[0], c, h, w)

    def encode(self, x: np.ndarray) -> vae.LatentCode:
        flat = np.asarray(x, dtype=np.float64).transpose(2, 0, 1).reshape(-1)
        return vae.LatentCode(mean=flat, log_variance=np.zeros_like(flat))

    def reconstruct(self, x: np.ndarray, mode: str = "deterministic", seed: int = 0, samples: int = 1):
        return np.asarray(x, dtype=np.float64).copy()

    def recon_loss(self, x: np.ndarray) -> float:
        return 0.0


def interior_image(shape: tuple[int, int, int], seed: int = 0, margin: float = 0.15) -> np.ndarray:
    """Random image with every pixel at least `margin` away from 0 and 1."""
    rng = np.random.default_rng(seed)
    return rng.uniform(margin, 1.0 - margin, size=shape)
