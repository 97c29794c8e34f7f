"""Denoising variational autoencoder over environment images."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import env as grasp
from .nn import (
    Conv2d,
    ConvTranspose2d,
    Dense,
    Flatten,
    InitScheme,
    NonFiniteError,
    OptimizerState,
    ReLU,
    Reshape,
    Sequential,
    ShapeError,
    Sigmoid,
    conv_output_size,
    initialize,
    load_tensors,
    optimizer_step,
    save_tensors,
)

log = logging.getLogger(__name__)

NOISE_STD = 0.1
FULL_DATASET_SIZE = 10_000  # full-scale collection; desk-scale runs pass a smaller n


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) == 0:
            raise ValueError(f"dataset must be a non-empty (N, 3, H, W) array, got {self.images.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("dataset pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.images)

    def save(self, path) -> None:
        save_tensors(path, {"images": self.images})

    @classmethod
    def load(cls, path) -> "ImageDataset":
        return cls(load_tensors(path)["images"], {"source": str(path)})


def collect_dataset(config: grasp.EnvConfig, n: int = FULL_DATASET_SIZE, seed: int = 0) -> ImageDataset:
    """Observations from uniform-random-action episodes, every step kept, until ``n`` images."""
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    size = config.image_size
    images = np.empty((n, 3, size, size), np.float32)
    count, episode = 0, 0
    while count < n:
        state, obs = grasp.reset(config, episode_seed=seed * 1_000_003 + episode)
        images[count] = obs
        count += 1
        while count < n and not state.done:
            state, obs, _, _ = grasp.step(state, int(rng.integers(grasp.N_ACTIONS)), config)
            images[count] = obs
            count += 1
        episode += 1
    meta = {"env": asdict(config), "policy": "uniform_random", "seed": seed, "episodes": episode}
    return ImageDataset(images, meta)


def sample_noise(shape, rng: np.random.Generator, std: float = NOISE_STD) -> np.ndarray:
    """Pre-clamp pixel noise, i.i.d. normal with the given std."""
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(std)


def add_noise(s: np.ndarray, rng: np.random.Generator, std: float = NOISE_STD) -> np.ndarray:
    if std == 0:
        return s.copy()
    return np.clip(s + sample_noise(s.shape, rng, std), 0.0, 1.0).astype(s.dtype, copy=False)


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    eps: np.ndarray
    z: np.ndarray

    def check(self) -> bool:
        return bool(np.array_equal(self.z, reparameterize(self.mu, self.logvar, self.eps)))


def reparameterize(mu, logvar, eps):
    return np.exp(logvar / 2) * eps + mu


def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, 1)), summed over latent dims."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


class VAE:
    """Conv encoder to (mu, logvar) heads; dense + transposed-conv decoder with sigmoid output."""

    def __init__(self, latent_dim: int = 16, image_size: int = 64, seed: int = 0,
                 init: str = "he_normal", dtype=np.float32):
        self.latent_dim = latent_dim
        self.image_size = image_size
        side = image_size
        for _ in range(3):
            side = conv_output_size(side)
        self.encoder = Sequential([
            Conv2d(3, 16, dtype=dtype), ReLU(),
            Conv2d(16, 32, dtype=dtype), ReLU(),
            Conv2d(32, 32, dtype=dtype), ReLU(),
            Flatten(), Dense(32 * side * side, 64, dtype=dtype), ReLU(),
        ], name="encoder")
        self.encoder.layers[0].skip_input_grad = True
        self.mu_head = Sequential([Dense(64, latent_dim, dtype=dtype)], name="mu")
        self.logvar_head = Sequential([Dense(64, latent_dim, dtype=dtype)], name="logvar")
        # mirror of the encoder: side -> 2*side+1 twice, then up to image_size
        mid = 2 * (2 * side + 1) + 1
        last_pad = image_size - (2 * (mid - 1) + 3)
        self.decoder = Sequential([
            Dense(latent_dim, 32 * side * side, dtype=dtype), ReLU(), Reshape((32, side, side)),
            ConvTranspose2d(32, 32, dtype=dtype), ReLU(),
            ConvTranspose2d(32, 16, dtype=dtype), ReLU(),
            ConvTranspose2d(16, 3, output_padding=last_pad, dtype=dtype), Sigmoid(),
        ], name="decoder")
        rng = np.random.default_rng(seed)
        for net in self.networks:
            initialize(net, InitScheme(init, seed), rng)
        self._head_in = None

    @property
    def networks(self):
        return (self.encoder, self.mu_head, self.logvar_head, self.decoder)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks:
            out.update(net.parameters())
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks:
            out.update(net.gradients())
        return out

    def zero_grad(self):
        for net in self.networks:
            net.zero_grad()

    def astype(self, dtype) -> "VAE":
        for net in self.networks:
            net.astype(dtype)
        return self

    def _check_images(self, s: np.ndarray) -> np.ndarray:
        if s.ndim == 3:
            s = s[None]
        if s.shape[1:] != (3, self.image_size, self.image_size):
            raise ShapeError(f"expected images of shape (3, {self.image_size}, {self.image_size}), got {s.shape}")
        return s

    def encode_mean(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.encoder.forward(self._check_images(s))
        return self.mu_head.forward(h), self.logvar_head.forward(h)

    def encode(self, s: np.ndarray, rng: np.random.Generator | None = None,
               eps: np.ndarray | None = None) -> LatentCode:
        mu, logvar = self.encode_mean(s)
        if eps is None:
            rng = rng if rng is not None else np.random.default_rng()
            eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        return LatentCode(mu, logvar, eps, reparameterize(mu, logvar, eps))

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        single = z.ndim == 1
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"expected latent codes of length {self.latent_dim}, got {z.shape}")
        out = self.decoder.forward(z[None] if single else z)
        return out[0] if single else out

    def loss(self, s: np.ndarray, s_noisy: np.ndarray, rng=None, eps=None, backward: bool = False):
        """Returns (total, recon, kl) averaged over the batch; optionally backpropagates."""
        s = self._check_images(s)
        code = self.encode(s_noisy, rng=rng, eps=eps)
        recon_img = self.decoder.forward(code.z)
        diff = recon_img - s
        M = len(s)
        recon = float(np.sum(diff.astype(np.float64) ** 2) / M)
        kl = float(np.sum(kl_divergence(code.mu.astype(np.float64), code.logvar.astype(np.float64))) / M)
        if backward:
            self.zero_grad()
            dz = self.decoder.backward((2.0 / M) * diff)
            sigma = np.exp(code.logvar / 2)
            dmu = dz + code.mu / M
            dlogvar = dz * code.eps * sigma / 2 + (np.exp(code.logvar) - 1) / (2 * M)
            dh = self.mu_head.backward(dmu) + self.logvar_head.backward(dlogvar)
            self.encoder.backward(dh)
        return recon + kl, recon, kl

    def reconstruct(self, s: np.ndarray) -> np.ndarray:
        mu, _ = self.encode_mean(s)
        return self.decoder.forward(mu)

    def state_dict(self) -> dict[str, np.ndarray]:
        tensors = dict(self.parameters())
        tensors["meta.vae"] = np.array([self.latent_dim, self.image_size], np.float32)
        return tensors

    def save(self, path) -> None:
        save_tensors(path, self.state_dict())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "VAE":
        try:
            latent_dim, image_size = (int(v) for v in tensors["meta.vae"])
        except KeyError:
            raise ValueError("not a VAE checkpoint (missing meta.vae)") from None
        vae = cls(latent_dim, image_size)
        vae.load_parameters(tensors)
        return vae

    @classmethod
    def load(cls, path) -> "VAE":
        return cls.from_tensors(load_tensors(path))

    def load_parameters(self, tensors: dict[str, np.ndarray]) -> None:
        for net in self.networks:
            for prefix, layer in net.named_layers():
                for k in layer.params:
                    arr = tensors[f"{prefix}.{k}"]
                    if arr.shape != layer.params[k].shape:
                        raise ShapeError(f"{prefix}.{k}: checkpoint shape {arr.shape} != {layer.params[k].shape}")
                    layer.params[k] = arr.astype(layer.params[k].dtype).copy()


@dataclass
class VaeHistory:
    total: list[float] = field(default_factory=list)
    recon: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)


def train_vae(dataset: ImageDataset, epochs: int, batch: int = 32, seed: int = 0,
              latent_dim: int = 16, lr: float = 1e-3, vae: VAE | None = None,
              noise_std: float = NOISE_STD) -> tuple[VAE, VaeHistory]:
    """Mini-batch training on the denoising objective; returns the model and per-epoch mean losses."""
    images = dataset.images
    if vae is None:
        vae = VAE(latent_dim, images.shape[-1], seed=seed)
    rng = np.random.default_rng([seed, 1])
    opt = OptimizerState("adaptive_moments", lr=lr)
    params = vae.parameters()
    history = VaeHistory()
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch):
            s = images[order[start:start + batch]]
            s_noisy = add_noise(s, rng, noise_std)
            try:
                total, recon, kl = vae.loss(s, s_noisy, rng=rng, backward=True)
                if not np.isfinite(total):
                    raise NonFiniteError("loss is not finite")
                optimizer_step(params, vae.gradients(), opt)
            except NonFiniteError as exc:
                raise NonFiniteError(f"VAE training diverged in epoch {epoch}: {exc}") from exc
            sums += np.array([total, recon, kl]) * len(s)
        total, recon, kl = sums / n
        history.total.append(total)
        history.recon.append(recon)
        history.kl.append(kl)
        log.info("vae epoch %d: total %.3f recon %.3f kl %.3f", epoch, total, recon, kl)
    return vae, history
