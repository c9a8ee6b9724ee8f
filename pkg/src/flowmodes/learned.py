"""Optional small learned noise predictor (needs torch).

The network sees the noisy flow with frames stacked as channels plus the
object mask, and predicts the noise with the same layout::

    h   = relu(conv3x3([x_t, m]) + embed(t))
    eps = skip(t) * x_t + conv3x3(h)

It is trained on ``w(t) * ||eps_hat - eps||^2`` with ``w(t) = 1`` and exposes
the same ``predict_eps`` / ``vjp`` interface as the exact mixture denoiser,
with the vjp taken by autograd. The network runs in float32; arrays cross
the interface as float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    import torch
    from torch import nn
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None
    nn = None


def available():
    return torch is not None


def _require():
    if torch is None:
        raise RuntimeError("the learned denoiser needs torch; install the 'learned' extra")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch: int = 16
    lr: float = 3e-3
    hidden: int = 48
    seed: int = 0


if torch is not None:

    class _Net(nn.Module):
        def __init__(self, frames, hidden, T, emb_dim=32):
            super().__init__()
            ch = 2 * frames
            self.T = T
            self.emb_dim = emb_dim
            self.conv1 = nn.Conv2d(ch + 1, hidden, 3, padding=1)
            self.conv2 = nn.Conv2d(hidden, ch, 3, padding=1)
            self.embed = nn.Linear(emb_dim, hidden)
            self.skip = nn.Linear(emb_dim, 1)
            nn.init.zeros_(self.skip.weight)
            nn.init.zeros_(self.skip.bias)

        def time_features(self, t):
            half = self.emb_dim // 2
            dtype = self.embed.weight.dtype
            freqs = torch.exp(-math.log(100.0) * torch.arange(half, dtype=dtype) / half)
            ang = (t.to(dtype) / self.T)[:, None] * freqs[None] * 2 * math.pi
            return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)

        def forward(self, x, mask, t):
            # x: (B, 2F, H, W), mask: (H, W), t: (B,)
            emb = self.time_features(t)
            m = mask.expand(x.shape[0], 1, *mask.shape)
            h = torch.relu(self.conv1(torch.cat([x, m], dim=1)) + self.embed(emb)[:, :, None, None])
            return self.skip(emb)[:, :, None, None] * x + self.conv2(h)


def _to_channels(x):
    # (B, F, H, W, 2) -> (B, 2F, H, W)
    B, F, H, W, _ = x.shape
    return x.permute(0, 1, 4, 2, 3).reshape(B, 2 * F, H, W)


def _from_channels(y, F):
    B, _, H, W = y.shape
    return y.reshape(B, F, 2, H, W).permute(0, 1, 3, 4, 2)


class LearnedDenoiser:
    """Trained network wrapped in the denoiser interface (numpy in, numpy out)."""

    def __init__(self, net, mask, sched, frames):
        self.net = net
        self.mask = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
        self.sched = sched
        self.frames = frames

    @property
    def n_params(self):
        return sum(p.numel() for p in self.net.parameters())

    def _forward(self, x, t):
        tt = torch.full((x.shape[0],), float(t), dtype=torch.float32)
        return _from_channels(self.net(_to_channels(x), self.mask, tt), self.frames)

    def predict_eps(self, x_t, t):
        with torch.no_grad():
            x = torch.as_tensor(np.asarray(x_t, dtype=np.float32))[None]
            return self._forward(x, t)[0].numpy().astype(np.float64)

    def vjp(self, x_t, t, cotangent):
        x = torch.as_tensor(np.asarray(x_t, dtype=np.float32))[None].requires_grad_(True)
        out = self._forward(x, t)
        (g,) = torch.autograd.grad(out, x, torch.as_tensor(np.asarray(cotangent, dtype=np.float32))[None])
        return g[0].numpy().astype(np.float64)

    def loss(self, x0, t, eps):
        """Mean squared noise-prediction error on a batch (numpy arrays, integer t per item)."""
        with torch.no_grad():
            return float(_batch_loss(self.net, self.mask, self.sched, _f32(x0), torch.as_tensor(t),
                                     _f32(eps), self.frames))


def _f32(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float32))


def _batch_loss(net, mask, sched, x0, t, eps, frames):
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)[t][:, None, None, None, None]
    x_t = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    tt = t.to(torch.float32)
    pred = _from_channels(net(_to_channels(x_t), mask, tt), frames)
    return ((pred - eps) ** 2).mean()


def noising_batch(prior, sched, n, seed):
    """Held-out style batch ``(x0, t, eps)`` drawn from the prior, t uniform in 1..T."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(prior.weights), size=n, p=prior.weights)
    x0 = prior.means[idx] + prior.s * rng.standard_normal((n,) + prior.shape)
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    return x0, t, eps


def init_denoiser(scene, sched, cfg: TrainConfig = TrainConfig()):
    _require()
    torch.manual_seed(cfg.seed)
    net = _Net(scene.frames, cfg.hidden, sched.T)
    return LearnedDenoiser(net, scene.mask, sched, scene.frames)


def train_small_denoiser(scene, sched, cfg: TrainConfig = TrainConfig(), log=None):
    """Fit a fresh network with Adam; returns ``(denoiser, losses)``.

    Raises FloatingPointError if the loss diverges (ends the first tenth of
    training above where it started).
    """
    den = init_denoiser(scene, sched, cfg)
    prior = scene.prior()
    opt = torch.optim.Adam(den.net.parameters(), lr=cfg.lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    losses = []
    check_at = max(cfg.steps // 10, 1)
    for step in range(cfg.steps):
        x0, t, eps = noising_batch(prior, sched, cfg.batch, [cfg.seed, step])
        loss = _batch_loss(den.net, den.mask, sched, _f32(x0), torch.as_tensor(t), _f32(eps), scene.frames)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        losses.append(float(loss.detach()))
        if not math.isfinite(losses[-1]):
            raise FloatingPointError(f"training loss is not finite at step {step}")
        if step + 1 == check_at and losses[-1] > losses[0]:
            raise FloatingPointError("training diverged: loss rose above its initial value")
        if log is not None and step % 100 == 0:
            log(step, losses[-1])
    return den, losses
