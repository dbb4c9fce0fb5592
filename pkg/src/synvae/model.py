"""Visual and melody VAE components and their synesthetic composition.

The visual half is a single-hidden-layer MLP encoder/decoder over flat
pixel vectors; the melody half is a GRU sequence VAE over melody tokens.
Composing them — image -> visual posterior -> melody decoder -> melody
encoder -> visual decoder — yields a differentiable image-to-image chain
whose intermediate product is a melody. During training the melody stays
soft (per-step categorical distributions fed forward as expected token
embeddings); hard tokens are only sampled on the rendering path.

All operations are batch-first: images are (N, P), latents (N, D), melody
distributions (N, T, V).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .melody import VOCAB_SIZE

LOGVAR_CLAMP = 10.0
NLL_EPS = 1e-7


@dataclass
class DiagonalGaussian:
    """Axis-aligned normal posterior: mean and stddev of shape (N, D), stddev > 0."""

    mean: Tensor
    stddev: Tensor

    def __post_init__(self):
        if self.mean.shape != self.stddev.shape:
            raise ValueError(
                f"mean shape {tuple(self.mean.shape)} != stddev shape {tuple(self.stddev.shape)}"
            )


class VisualParams(nn.Module):
    """MLP encoder (pixels -> hidden -> mean/log-variance heads) and decoder."""

    def __init__(self, image_dim: int = 784, hidden_dim: int = 512, latent_dim: int = 16):
        super().__init__()
        self.image_dim = image_dim
        self.latent_dim = latent_dim
        self.enc_hidden = nn.Linear(image_dim, hidden_dim)
        self.enc_mean = nn.Linear(hidden_dim, latent_dim)
        self.enc_logvar = nn.Linear(hidden_dim, latent_dim)
        self.dec_hidden = nn.Linear(latent_dim, hidden_dim)
        self.dec_out = nn.Linear(hidden_dim, image_dim)


class MusicParams(nn.Module):
    """Token embedding, bidirectional GRU encoder, and GRU decoder with
    latent-conditioned initial state."""

    def __init__(
        self,
        vocab_size: int = VOCAB_SIZE,
        embed_dim: int = 64,
        hidden_dim: int = 128,
        latent_dim: int = 16,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.latent_dim = latent_dim
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.encoder_rnn = nn.GRU(embed_dim, hidden_dim, batch_first=True, bidirectional=True)
        self.enc_mean = nn.Linear(2 * hidden_dim, latent_dim)
        self.enc_logvar = nn.Linear(2 * hidden_dim, latent_dim)
        self.dec_init = nn.Linear(latent_dim, hidden_dim)
        self.decoder_rnn = nn.GRU(embed_dim, hidden_dim, batch_first=True)
        self.dec_out = nn.Linear(hidden_dim, vocab_size)


def _heads_to_posterior(mean: Tensor, logvar: Tensor) -> DiagonalGaussian:
    logvar = torch.clamp(logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return DiagonalGaussian(mean=mean, stddev=torch.exp(0.5 * logvar))


def encode_visual(images: Tensor, params: VisualParams) -> DiagonalGaussian:
    """Posterior q(z|image); stddev = exp(0.5 log-variance) so always positive."""
    if images.ndim != 2 or images.shape[1] != params.image_dim:
        raise ValueError(
            f"expected images of shape (N, {params.image_dim}), got {tuple(images.shape)}"
        )
    h = torch.tanh(params.enc_hidden(images))
    return _heads_to_posterior(params.enc_mean(h), params.enc_logvar(h))


def decode_visual(z: Tensor, params: VisualParams) -> Tensor:
    """Latent -> pixel means in (0, 1) via a sigmoid output layer."""
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise ValueError(f"expected latents of shape (N, {params.latent_dim}), got {tuple(z.shape)}")
    h = torch.tanh(params.dec_hidden(z))
    return torch.sigmoid(params.dec_out(h))


def reparameterize(posterior: DiagonalGaussian, noise: Tensor) -> Tensor:
    """mean + stddev * noise; caller supplies standard-normal noise."""
    if noise.shape != posterior.mean.shape:
        raise ValueError(
            f"noise shape {tuple(noise.shape)} != posterior shape {tuple(posterior.mean.shape)}"
        )
    return posterior.mean + posterior.stddev * noise


def kl_to_standard_normal(posterior: DiagonalGaussian) -> Tensor:
    """Per-example KL(q || N(0, I)) in nats, summed over latent dimensions."""
    var = posterior.stddev**2
    return 0.5 * torch.sum(var + posterior.mean**2 - 1.0 - torch.log(var), dim=-1)


def reconstruction_nll(x: Tensor, pixel_means: Tensor) -> Tensor:
    """Per-example Bernoulli negative log-likelihood, summed over pixels.

    Pixel means are clamped to [eps, 1-eps] so the result is finite and
    nonnegative for all inputs.
    """
    if x.shape != pixel_means.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(pixel_means.shape)}")
    m = torch.clamp(pixel_means, NLL_EPS, 1.0 - NLL_EPS)
    return -torch.sum(x * torch.log(m) + (1.0 - x) * torch.log(1.0 - m), dim=-1)


def decode_music(z: Tensor, params: MusicParams, steps: int) -> Tensor:
    """Latent -> (N, T, V) per-step categorical distributions.

    Autoregressive in the soft sense: step t consumes the expected token
    embedding under step t-1's distribution, keeping the whole chain
    differentiable without sampling.
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    if z.ndim != 2 or z.shape[1] != params.latent_dim:
        raise ValueError(f"expected latents of shape (N, {params.latent_dim}), got {tuple(z.shape)}")
    hidden = params.dec_init(z).unsqueeze(0)
    inp = z.new_zeros(z.shape[0], 1, params.embedding.embedding_dim)
    probs = []
    for _ in range(steps):
        out, hidden = params.decoder_rnn(inp, hidden)
        p = torch.softmax(params.dec_out(out), dim=-1)
        probs.append(p)
        inp = p @ params.embedding.weight
    return torch.cat(probs, dim=1)


def decode_music_teacher_forced(z: Tensor, tokens: Tensor, params: MusicParams) -> Tensor:
    """Per-step logits (N, T, V) with ground-truth tokens as decoder inputs.

    Step t sees the embedding of token t-1 (zeros at step 0); used for
    melody-VAE pre-training and reconstruction-accuracy measurement.
    """
    emb = params.embedding(tokens)
    inp = torch.cat([emb.new_zeros(emb.shape[0], 1, emb.shape[2]), emb[:, :-1, :]], dim=1)
    hidden = params.dec_init(z).unsqueeze(0)
    out, _ = params.decoder_rnn(inp, hidden)
    return params.dec_out(out)


def sample_melody(dists, mode: str = "argmax", temperature: float = 1.0, rng=None) -> np.ndarray:
    """Discretize per-step distributions into hard tokens.

    argmax mode is deterministic with ties broken toward the lowest token
    id; sample mode draws from p^(1/temperature) using the given torch
    generator.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = dists.detach() if isinstance(dists, Tensor) else torch.as_tensor(np.asarray(dists))
    squeeze = p.ndim == 2
    if squeeze:
        p = p.unsqueeze(0)
    if mode == "argmax":
        tokens = torch.argmax(p, dim=-1)
    elif mode == "sample":
        scaled = p.double() ** (1.0 / temperature)
        scaled = scaled / scaled.sum(dim=-1, keepdim=True)
        flat = scaled.reshape(-1, scaled.shape[-1])
        tokens = torch.multinomial(flat, 1, generator=rng).reshape(p.shape[:-1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    tokens = tokens.numpy().astype(np.int64)
    return tokens[0] if squeeze else tokens


def encode_music(melody, params: MusicParams) -> DiagonalGaussian:
    """Posterior q(z|melody) for hard token sequences (N, T) or soft
    distributions (N, T, V); soft inputs use expected token embeddings."""
    if isinstance(melody, np.ndarray):
        melody = torch.as_tensor(melody)
    if melody.ndim == 2 and not melody.is_floating_point():
        if torch.any(melody < 0) or torch.any(melody >= params.vocab_size):
            raise ValueError(f"tokens outside [0, {params.vocab_size})")
        emb = params.embedding(melody)
    elif melody.ndim == 3:
        if melody.shape[-1] != params.vocab_size:
            raise ValueError(
                f"expected distributions over {params.vocab_size} tokens, got {melody.shape[-1]}"
            )
        emb = melody @ params.embedding.weight
    else:
        raise ValueError("melody must be (N, T) integer tokens or (N, T, V) distributions")
    _, hidden = params.encoder_rnn(emb)
    h = torch.cat([hidden[0], hidden[1]], dim=-1)
    return _heads_to_posterior(params.enc_mean(h), params.enc_logvar(h))


@dataclass
class SynestheticForward:
    """Everything the loss and the metrics need from one chained pass."""

    q_v: DiagonalGaussian
    z_v: Tensor
    dists: Tensor
    q_a: DiagonalGaussian
    z_a: Tensor
    x_recon: Tensor


def synesthetic_forward(
    x: Tensor,
    vis: VisualParams,
    music: MusicParams,
    rng: torch.Generator | None = None,
    steps: int = 32,
) -> SynestheticForward:
    """Chain encode_visual -> reparameterize -> decode_music -> encode_music
    -> reparameterize -> decode_visual, returning all intermediates."""
    if vis.latent_dim != music.latent_dim:
        raise ValueError(
            f"latent dims differ: visual {vis.latent_dim} vs music {music.latent_dim}"
        )
    q_v = encode_visual(x, vis)
    z_v = reparameterize(q_v, _standard_normal_like(q_v.mean, rng))
    dists = decode_music(z_v, music, steps)
    q_a = encode_music(dists, music)
    z_a = reparameterize(q_a, _standard_normal_like(q_a.mean, rng))
    x_recon = decode_visual(z_a, vis)
    return SynestheticForward(q_v=q_v, z_v=z_v, dists=dists, q_a=q_a, z_a=z_a, x_recon=x_recon)


def _standard_normal_like(ref: Tensor, rng: torch.Generator | None) -> Tensor:
    return torch.randn(ref.shape, generator=rng, dtype=ref.dtype, device=ref.device)


@dataclass
class LossTerms:
    total: Tensor
    nll: Tensor
    kl: Tensor


def synesthetic_loss(x: Tensor, forward: SynestheticForward, beta: float) -> LossTerms:
    """Batch-mean reconstruction NLL plus beta-weighted KL of the visual
    posterior; the melody posterior carries no KL term (its components are
    frozen and already prior-shaped)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    nll = reconstruction_nll(x, forward.x_recon).mean()
    kl = kl_to_standard_normal(forward.q_v).mean()
    return LossTerms(total=nll + beta * kl, nll=nll, kl=kl)


def validate_step_distributions(dists, tol: float = 1e-6) -> list[str]:
    """Rows must be valid categorical distributions (nonnegative, sum 1 +- tol)."""
    arr = np.asarray(dists.detach() if isinstance(dists, Tensor) else dists, dtype=np.float64)
    problems = []
    if np.any(arr < 0):
        problems.append("negative probability entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        problems.append(f"row sums deviate from 1 by up to {np.abs(sums - 1.0).max():.2e}")
    return problems
