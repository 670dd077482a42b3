"""Conditional denoising-diffusion machinery for motion sequences.

The reverse update is deliberately deterministic once the noise prediction
is given:

    x_{k-1} = x_k / sqrt(alpha_k) - sqrt(1/alpha_k - 1) * eps_hat

i.e. it inverts the single-step forward corruption exactly when eps_hat is
the true noise; no posterior noise is re-injected. A standard stochastic
ancestral sampler is available behind ``method="ancestral"`` purely as a
cross-check, never the default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractError

# condition names each denoiser role consumes, in prefix-token order
ROLE_CONDITIONS = {
    "action": ("text",),
    "style": ("text", "object"),
    "direct": ("text", "object"),
    "object": ("body", "contact"),
    "object_nocontact": ("body",),
}

TEXT_WIDTH = 256
OBJECT_WIDTH = 512
BODY_WIDTH = 512
CONTACT_WIDTH = 512

DEFAULT_COND_DIMS = {"text": TEXT_WIDTH, "object": OBJECT_WIDTH,
                     "body": BODY_WIDTH, "contact": CONTACT_WIDTH}


# ---------------------------------------------------------------------------
# noise schedule

class NoiseSchedule:
    """Per-step retention factors alpha_k with cumulative products.

    ``alphas[i]`` is the retention of step i+1; ``alphas_cumprod`` has a
    leading exact 1.0 so index k gives the product after k steps.
    ``step_ids[i]`` is the originating training-step index (1-based), which
    survives subsampling so denoisers see the step values they were trained on.
    """

    def __init__(self, alphas, step_ids=None, train_steps=None):
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1 or len(alphas) == 0:
            raise ContractError("alphas must be a non-empty vector")
        if np.any(alphas <= 0.0) or np.any(alphas >= 1.0):
            raise ContractError("retention factors must lie strictly in (0, 1)")
        self.alphas = alphas
        self.alphas_cumprod = np.concatenate([[1.0], np.cumprod(alphas)])
        if np.any(np.diff(self.alphas_cumprod) >= 0.0):
            raise ContractError("cumulative retention must be strictly decreasing")
        if step_ids is None:
            step_ids = np.arange(1, len(alphas) + 1)
        self.step_ids = np.asarray(step_ids, dtype=np.int64)
        if self.step_ids.shape != alphas.shape:
            raise ContractError("step_ids must align with alphas")
        self.train_steps = int(train_steps or self.step_ids[-1])

    def __len__(self):
        return len(self.alphas)

    @classmethod
    def linear(cls, steps=1000, beta_start=1e-4, beta_end=0.02):
        if steps < 1:
            raise ContractError("steps must be >= 1")
        betas = np.linspace(beta_start, beta_end, steps)
        return cls(1.0 - betas)

    def subsample(self, n_steps):
        """Uniform-stride inference schedule with n_steps composite steps."""
        k = len(self)
        if not 1 <= n_steps <= k:
            raise ContractError("n_steps must be in [1, %d], got %r" % (k, n_steps))
        bounds = np.round(np.linspace(0, k, n_steps + 1)).astype(np.int64)
        if np.any(np.diff(bounds) < 1):
            raise ContractError("subsampling to %d steps collapses strides" % n_steps)
        alphas = self.alphas_cumprod[bounds[1:]] / self.alphas_cumprod[bounds[:-1]]
        return NoiseSchedule(alphas, step_ids=self.step_ids[bounds[1:] - 1],
                             train_steps=self.train_steps)

    def _gather(self, values, k, like):
        values = torch.as_tensor(values, dtype=like.dtype, device=like.device)
        if torch.is_tensor(k):
            idx = k.long()
        else:
            idx = torch.as_tensor(np.asarray(k, dtype=np.int64),
                                  device=like.device)
        if idx.min() < 0 or idx.max() > len(self):
            raise ContractError("step index out of range [0, %d]" % len(self))
        out = values[idx]
        while out.ndim < like.ndim:
            out = out.unsqueeze(-1)
        return out

    def cumulative(self, k, like):
        """alphas_cumprod[k] shaped to broadcast against ``like``."""
        return self._gather(self.alphas_cumprod, k, like)

    def retention(self, k, like):
        """alpha_k (1-based step k) shaped to broadcast against ``like``."""
        if not torch.is_tensor(k):
            k = torch.as_tensor(np.asarray(k, dtype=np.int64))
        if (k < 1).any() or (k > len(self)).any():
            raise ContractError("step k must be in [1, %d]" % len(self))
        return self._gather(self.alphas, k - 1, like)


def forward_noise(x0, k, schedule, eps):
    """Closed-form corruption: sqrt(abar_k) x0 + sqrt(1 - abar_k) eps."""
    if eps.shape != x0.shape:
        raise ContractError("eps shape %s must match x0 shape %s"
                            % (tuple(eps.shape), tuple(x0.shape)))
    ab = schedule.cumulative(k, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def reverse_step(xk, k, eps_hat, schedule):
    """Deterministic reverse update; k is the 1-based current step."""
    if eps_hat.shape != xk.shape:
        raise ContractError("eps_hat shape %s must match x shape %s"
                            % (tuple(eps_hat.shape), tuple(xk.shape)))
    alpha = schedule.retention(k, xk)
    return xk / torch.sqrt(alpha) - torch.sqrt(1.0 / alpha - 1.0) * eps_hat


def ancestral_step(xk, k, eps_hat, schedule, noise):
    """Standard stochastic posterior step (cross-check sampler)."""
    alpha = schedule.retention(k, xk)
    ab_k = schedule.cumulative(k, xk)
    ab_prev = schedule.cumulative(k - 1 if not torch.is_tensor(k) else k - 1, xk)
    beta = 1.0 - alpha
    mean = (xk - beta / torch.sqrt(1.0 - ab_k) * eps_hat) / torch.sqrt(alpha)
    var = beta * (1.0 - ab_prev) / (1.0 - ab_k)
    return mean + torch.sqrt(var.clamp(min=0.0)) * noise


# ---------------------------------------------------------------------------
# denoiser

@dataclass
class DenoiserConfig:
    frame_dim: int
    n_frames: int
    width: int = 64
    layers: int = 8
    heads: int = 4
    ffn_mult: int = 4
    cond_dims: dict = field(default_factory=lambda: dict(DEFAULT_COND_DIMS))

    def __post_init__(self):
        if self.width % self.heads:
            raise ContractError("width %d not divisible by heads %d"
                                % (self.width, self.heads))

    @property
    def key_dim(self):
        return self.width // self.heads

    def to_meta(self):
        return {"frame_dim": self.frame_dim, "n_frames": self.n_frames,
                "width": self.width, "layers": self.layers, "heads": self.heads,
                "ffn_mult": self.ffn_mult, "cond_dims": dict(self.cond_dims)}

    @classmethod
    def from_meta(cls, meta):
        return cls(frame_dim=int(meta["frame_dim"]), n_frames=int(meta["n_frames"]),
                   width=int(meta["width"]), layers=int(meta["layers"]),
                   heads=int(meta["heads"]), ffn_mult=int(meta["ffn_mult"]),
                   cond_dims={k: int(v) for k, v in meta["cond_dims"].items()})


def step_embedding(step_ids, width, dtype=torch.float32):
    """Sinusoidal embedding of (1-based) diffusion step ids. (B,) -> (B, width)."""
    steps = torch.as_tensor(step_ids, dtype=dtype)
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / half)
    ang = steps[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if emb.shape[1] < width:
        emb = torch.cat([emb, torch.zeros(len(steps), width - emb.shape[1],
                                          dtype=dtype)], dim=1)
    return emb


class ConditionalDenoiser(nn.Module):
    """Transformer noise predictor over the frame axis.

    Conditions enter as prefix tokens (one per condition, in the role's
    canonical order); the step embedding is added to every token.
    """

    def __init__(self, config, role):
        super().__init__()
        if role not in ROLE_CONDITIONS:
            raise ContractError("unknown denoiser role %r (known: %s)"
                                % (role, sorted(ROLE_CONDITIONS)))
        self.config = config
        self.role = role
        self.cond_names = ROLE_CONDITIONS[role]
        for name in self.cond_names:
            if name not in config.cond_dims:
                raise ContractError("config lacks width for condition %r" % name)
        w = config.width
        self.in_proj = nn.Linear(config.frame_dim, w)
        self.cond_proj = nn.ModuleDict(
            {name: nn.Linear(config.cond_dims[name], w) for name in self.cond_names})
        layer = nn.TransformerEncoderLayer(
            d_model=w, nhead=config.heads, dim_feedforward=config.ffn_mult * w,
            dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=config.layers)
        self.out_proj = nn.Linear(w, config.frame_dim)

    def check_conditions(self, cond):
        if set(cond) != set(self.cond_names):
            raise ContractError("role %r expects conditions %s, got %s"
                                % (self.role, sorted(self.cond_names),
                                   sorted(cond)))
        sizes = {tuple(v.shape)[0] for v in cond.values()}
        if len(sizes) > 1:
            raise ContractError("condition batch sizes disagree: %s" % sizes)
        for name in self.cond_names:
            want = self.config.cond_dims[name]
            if cond[name].ndim != 2 or cond[name].shape[1] != want:
                raise ContractError("condition %r must be (B, %d), got %s"
                                    % (name, want, tuple(cond[name].shape)))

    def forward(self, x, step_ids, cond):
        """x (B, N, D), step_ids (B,) 1-based, cond name->(B, dim) -> eps (B, N, D)."""
        if x.ndim != 3 or x.shape[1] != self.config.n_frames \
                or x.shape[2] != self.config.frame_dim:
            raise ContractError("x must be (B, %d, %d), got %s"
                                % (self.config.n_frames, self.config.frame_dim,
                                   tuple(x.shape)))
        self.check_conditions(cond)
        steps = torch.as_tensor(step_ids)
        if steps.ndim == 0:
            steps = steps.expand(x.shape[0])
        if steps.shape[0] != x.shape[0]:
            raise ContractError("step_ids batch %d != x batch %d"
                                % (steps.shape[0], x.shape[0]))
        prefix = [self.cond_proj[name](cond[name]).unsqueeze(1)
                  for name in self.cond_names]
        tokens = torch.cat(prefix + [self.in_proj(x)], dim=1)
        emb = step_embedding(steps, self.config.width, dtype=x.dtype)
        tokens = tokens + emb[:, None, :]
        out = self.encoder(tokens)
        return self.out_proj(out[:, len(self.cond_names):])


# ---------------------------------------------------------------------------
# losses

def denoising_loss_terms(denoiser, x0, cond, schedule, k, eps):
    """Loss for fixed (k, eps): per-sample sum of squared noise error, batch mean."""
    xk = forward_noise(x0, k, schedule, eps)
    steps = schedule.step_ids[np.asarray(k, dtype=np.int64) - 1]
    eps_hat = denoiser(xk, torch.as_tensor(steps), cond)
    err = (eps - eps_hat) ** 2
    return err.reshape(err.shape[0], -1).sum(dim=1).mean()


def training_loss(denoiser, x0, cond, schedule, generator=None):
    """Draw (k, eps) and return the denoising loss. x0 (B, N, D)."""
    if x0.ndim != 3:
        raise ContractError("x0 must be (B, N, D), got %s" % (tuple(x0.shape),))
    b = x0.shape[0]
    k = torch.randint(1, len(schedule) + 1, (b,), generator=generator)
    eps = torch.empty_like(x0).normal_(generator=generator)
    return denoising_loss_terms(denoiser, x0, cond, schedule, k.numpy(), eps)


# ---------------------------------------------------------------------------
# sampling

def sample(denoiser, cond, schedule, generator=None, x_init=None,
           guidance=None, guidance_steps=10, method="deterministic"):
    """Run the reverse chain from Gaussian noise under the given conditions.

    ``guidance`` is an optional callable (x, step_index) -> x applied after
    each of the final ``guidance_steps`` reverse updates. Returns (B, N, D).
    """
    if method not in ("deterministic", "ancestral"):
        raise ContractError("unknown sampling method %r" % method)
    denoiser.check_conditions(cond)
    b = next(iter(cond.values())).shape[0]
    cfg = denoiser.config
    was_training = denoiser.training
    denoiser.eval()
    if x_init is None:
        x = torch.empty(b, cfg.n_frames, cfg.frame_dim).normal_(generator=generator)
    else:
        x = x_init
        if tuple(x.shape) != (b, cfg.n_frames, cfg.frame_dim):
            raise ContractError("x_init must be (B, %d, %d)"
                                % (cfg.n_frames, cfg.frame_dim))
    for i in range(len(schedule), 0, -1):
        step_id = int(schedule.step_ids[i - 1])
        with torch.no_grad():
            eps_hat = denoiser(x, torch.full((b,), step_id, dtype=torch.long), cond)
            if method == "deterministic":
                x = reverse_step(x, i, eps_hat, schedule)
            else:
                noise = (torch.empty_like(x).normal_(generator=generator)
                         if i > 1 else torch.zeros_like(x))
                x = ancestral_step(x, i, eps_hat, schedule, noise)
        if guidance is not None and i <= guidance_steps:
            x = guidance(x, i)
    if was_training:
        denoiser.train()
    return x


# ---------------------------------------------------------------------------
# condition encoders

class TextEncoder(nn.Module):
    """Token embedding + mean pool + MLP -> instruction feature."""

    def __init__(self, vocab_size, out_dim=TEXT_WIDTH, hidden=64):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, out_dim))
        self.out_dim = out_dim

    def forward(self, tokens):
        """tokens (B, T) int -> (B, out_dim)."""
        return self.mlp(self.embed(tokens.long()).mean(dim=1))


class ObjectEncoder(nn.Module):
    """Shared point MLP with max pooling: permutation-invariant global
    feature plus per-point tokens for cross-attention consumers."""

    def __init__(self, out_dim=OBJECT_WIDTH, token_dim=128, hidden=64):
        super().__init__()
        self.point_mlp = nn.Sequential(nn.Linear(3, hidden), nn.ReLU(),
                                       nn.Linear(hidden, token_dim), nn.ReLU())
        self.global_proj = nn.Linear(token_dim, out_dim)
        self.out_dim = out_dim
        self.token_dim = token_dim

    def forward(self, points):
        """points (B, P, 3) -> (global (B, out_dim), tokens (B, P, token_dim))."""
        if points.ndim != 3 or points.shape[-1] != 3:
            raise ContractError("points must be (B, P, 3), got %s"
                                % (tuple(points.shape),))
        tokens = self.point_mlp(points)
        return self.global_proj(tokens.max(dim=1).values), tokens


class BodyEncoder(nn.Module):
    """Transformer over body frames, mean-pooled to one motion feature."""

    def __init__(self, frame_dim, out_dim=BODY_WIDTH, width=64, layers=4, heads=4):
        super().__init__()
        self.in_proj = nn.Linear(frame_dim, width)
        layer = nn.TransformerEncoderLayer(d_model=width, nhead=heads,
                                           dim_feedforward=4 * width,
                                           dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers)
        self.out_proj = nn.Linear(width, out_dim)
        self.out_dim = out_dim

    def forward(self, frames):
        """frames (B, N, frame_dim) -> (B, out_dim)."""
        h = self.encoder(self.in_proj(frames))
        return self.out_proj(h.mean(dim=1))


class ContactEmbedder(nn.Module):
    """Per-point contact probabilities -> fixed-width feature."""

    def __init__(self, n_points, out_dim=CONTACT_WIDTH, hidden=256):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(n_points, hidden), nn.ReLU(),
                                 nn.Linear(hidden, out_dim))
        self.n_points = n_points
        self.out_dim = out_dim

    def forward(self, contact):
        """contact (B, P) in [0, 1] -> (B, out_dim)."""
        if contact.ndim != 2 or contact.shape[1] != self.n_points:
            raise ContractError("contact must be (B, %d), got %s"
                                % (self.n_points, tuple(contact.shape)))
        return self.mlp(contact)
