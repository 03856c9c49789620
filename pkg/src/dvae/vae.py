"""ViT-style encoder/decoder with a reparameterized Gaussian latent grid,
trained by multi-level spectral regularization: the decoder reconstructs a
level-matched blurred target from a level-masked latent, with the level
drawn fresh every step.
"""

import csv
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint as ck
from . import nn
from . import spectral as sp
from . import tensor as T
from .data import batch_iter
from .nn import PerceptualExtractor
from .optim import Adam
from .tensor import NumericError, ShapeError, Tape, Tensor


@dataclass
class VaeConfig:
    image_size: int = 32
    patch_size: int = 2
    downsample: int = 4          # latent grid = image_size / downsample
    latent_channels: int = 16
    depth: int = 4               # transformer blocks per side
    width: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    batch_size: int = 64
    lr: float = 1e-4
    w_mse: float = 1.0
    w_perc: float = 0.5
    w_gan: float = 0.0
    w_kl: float = 1e-4
    gan_warmup_frac: float = 0.25
    level_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    perc_seed: int = PerceptualExtractor.DEFAULT_SEED

    def __post_init__(self):
        self.level_probs = tuple(float(p) for p in self.level_probs)
        if self.image_size % self.downsample:
            raise ValueError(f"image_size {self.image_size} not divisible by f={self.downsample}")
        if self.downsample % self.patch_size:
            raise ValueError(f"f={self.downsample} must be a multiple of patch {self.patch_size}")
        if self.latent_channels not in (4, 8, 16):
            raise ValueError(f"latent_channels must be one of 4/8/16, got {self.latent_channels}")
        for name in ("w_mse", "w_perc", "w_gan", "w_kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if len(self.level_probs) != 4 or min(self.level_probs) < 0 \
                or abs(sum(self.level_probs) - 1.0) > 1e-6:
            raise ValueError(f"level_probs must be 4 nonnegative values summing to 1, "
                             f"got {self.level_probs}")

    @property
    def grid(self):
        return self.image_size // self.downsample

    @property
    def merge(self):
        return self.downsample // self.patch_size


@dataclass
class LatentCode:
    mean: Tensor     # [B,d,h,w]
    logvar: Tensor   # [B,d,h,w], clamped to [-10,10]
    sample: Tensor   # mean + exp(logvar/2) * noise
    noise: np.ndarray


def tokens_to_grid(t, h, w):
    b, n, c = t.shape
    return T.reshape(T.transpose(t, (0, 2, 1)), (b, c, h, w))


def grid_to_tokens(g):
    b, c, h, w = g.shape
    return T.transpose(T.reshape(g, (b, c, h * w)), (0, 2, 1))


class Encoder(nn.Module):
    def __init__(self, rng, cfg):
        p, m, width = cfg.patch_size, cfg.merge, cfg.width
        fine = cfg.image_size // p
        self.embed = nn.Linear(rng, 3 * p * p, width)
        self.pos = nn.param(rng, (fine * fine, width))
        self.merge_proj = nn.Linear(rng, width * m * m, width) if m > 1 else None
        self.blocks = [nn.TransformerBlock(rng, width, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        self.ln = nn.LayerNorm(width)
        self.head = nn.Linear(rng, width, 2 * cfg.latent_channels)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, x):
        cfg = self.cfg
        p, m = cfg.patch_size, cfg.merge
        fine = cfg.image_size // p
        tok = grid_to_tokens(T.patchify(x, p))          # [B, fine^2, 3p^2]
        tok = T.add(self.embed(tok), self.pos)
        if self.merge_proj is not None:
            grid = tokens_to_grid(tok, fine, fine)
            tok = grid_to_tokens(T.patchify(grid, m))   # [B, h*w, width*m^2]
            tok = self.merge_proj(tok)
        for blk in self.blocks:
            tok = blk(tok)
        out = self.head(self.ln(tok))                   # [B, h*w, 2d]
        g = tokens_to_grid(out, cfg.grid, cfg.grid)
        d = cfg.latent_channels
        mean = g[:, :d]
        logvar = T.clamp(g[:, d:], -10.0, 10.0)
        return mean, logvar


class Decoder(nn.Module):
    def __init__(self, rng, cfg):
        p, m, width = cfg.patch_size, cfg.merge, cfg.width
        self.embed = nn.Linear(rng, cfg.latent_channels, width)
        self.pos = nn.param(rng, (cfg.grid * cfg.grid, width))
        self.blocks = [nn.TransformerBlock(rng, width, cfg.heads, cfg.mlp_ratio)
                       for _ in range(cfg.depth)]
        self.ln = nn.LayerNorm(width)
        self.expand = nn.Linear(rng, width, width * m * m) if m > 1 else None
        self.to_pixels = nn.Linear(rng, width, 3 * p * p)
        object.__setattr__(self, "cfg", cfg)

    def forward(self, z):
        cfg = self.cfg
        p, m = cfg.patch_size, cfg.merge
        h = w = cfg.grid
        tok = T.add(self.embed(grid_to_tokens(z)), self.pos)
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.ln(tok)
        if self.expand is not None:
            grid = tokens_to_grid(tok, h, w)            # [B, width*m^2… ] after expand
            grid = T.unpatchify(tokens_to_grid(self.expand(tok), h, w), m)
            tok = grid_to_tokens(grid)                  # fine tokens [B,(h*m)^2,width]
            h, w = h * m, w * m
        pix = self.to_pixels(tok)                       # [B, fine^2, 3p^2]
        return T.unpatchify(tokens_to_grid(pix, h, w), p)


class PatchDiscriminator(nn.Module):
    """Three strided conv layers to a patch-wise real/fake logit map."""

    def __init__(self, rng, image_size=32):
        self.c1 = nn.Conv2d(rng, 3, 32, kernel=3, stride=2, padding=1)
        self.c2 = nn.Conv2d(rng, 32, 64, kernel=3, stride=2, padding=1)
        self.c3 = nn.Conv2d(rng, 64, 1, kernel=3, stride=2, padding=1)
        if image_size // 8 < 2:
            raise ValueError(f"image_size {image_size} leaves a logit map below 2x2")

    def forward(self, x):
        return self.c3(T.silu(self.c2(T.silu(self.c1(x)))))


class VaeModel(nn.Module):
    def __init__(self, cfg, seed):
        rng = np.random.default_rng([int(seed), 101])
        self.encoder = Encoder(rng, cfg)
        self.decoder = Decoder(rng, cfg)
        object.__setattr__(self, "cfg", cfg)
        object.__setattr__(self, "seed", int(seed))

    def encode(self, x, rng=None):
        """x: Tensor or [B,3,H,W] array. Draws reparameterization noise from
        rng; without an rng the sample equals the mean (eval behavior)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 4 or x.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(f"encode: expected [B,3,{self.cfg.image_size},"
                             f"{self.cfg.image_size}], got {x.shape}")
        mean, logvar = self.encoder(x)
        if rng is None:
            noise = np.zeros(mean.shape, dtype=np.float32)
        else:
            noise = rng.standard_normal(mean.shape).astype(np.float32)
        std = T.exp(T.scale(logvar, 0.5))
        sample = T.add(mean, T.mul(std, Tensor(noise)))
        return LatentCode(mean=mean, logvar=logvar, sample=sample, noise=noise)

    def decode(self, z):
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float32))
        d, g = self.cfg.latent_channels, self.cfg.grid
        if z.ndim != 4 or z.shape[1:] != (d, g, g):
            raise ShapeError(f"decode: expected [B,{d},{g},{g}], got {z.shape}")
        return self.decoder(z)

    def encode_mean(self, images, chunk=64):
        """Eval-path latents (the posterior mean), no tape. [n,d,h,w]."""
        images = np.asarray(images, dtype=np.float32)
        outs = []
        for i in range(0, len(images), chunk):
            code = self.encode(images[i:i + chunk])
            outs.append(code.mean.data)
        return np.concatenate(outs, axis=0)

    def decode_images(self, latents, chunk=64):
        latents = np.asarray(latents, dtype=np.float32)
        outs = []
        for i in range(0, len(latents), chunk):
            outs.append(self.decode(latents[i:i + chunk]).data)
        return np.concatenate(outs, axis=0)


def kl_loss(code):
    """Closed-form KL to the unit Gaussian, mean over latent elements."""
    mu, lv = code.mean, code.logvar
    term = T.sub(T.add(T.mul(mu, mu), T.exp(lv)), T.add(lv, 1.0))
    return T.scale(T.reduce_mean(term), 0.5)


def mse_loss(a, b):
    d = T.sub(a, b)
    return T.reduce_mean(T.mul(d, d))


def perceptual_loss(extractor, x_hat, target):
    """Mean of per-stage feature MSEs from the frozen extractor."""
    feats_hat = extractor(x_hat)
    feats_tgt = extractor(target if isinstance(target, Tensor) else Tensor(target))
    terms = [mse_loss(fh, Tensor(ft.data)) for fh, ft in zip(feats_hat, feats_tgt)]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def generator_gan_loss(disc, x_hat):
    """Non-saturating generator loss on the patch logit map."""
    return T.reduce_mean(T.softplus(T.neg(disc(x_hat))))


def discriminator_loss(disc, x_real, x_fake_data):
    real = T.reduce_mean(T.softplus(T.neg(disc(x_real))))
    fake = T.reduce_mean(T.softplus(disc(Tensor(x_fake_data))))
    return T.add(real, fake)


def composite_distance(x_hat, x_target, code=None, extractor=None, disc=None,
                       weights=(1.0, 0.5, 0.0, 1e-4), gan_active=False):
    """Weighted reconstruction distance. Returns (total Tensor, term floats)."""
    w_mse, w_perc, w_gan, w_kl = weights
    if not isinstance(x_target, Tensor):
        x_target = Tensor(np.asarray(x_target, dtype=np.float32))
    if x_hat.shape != x_target.shape:
        raise ShapeError(f"composite_distance: shapes differ, {x_hat.shape} "
                         f"vs {x_target.shape}")
    terms = {}
    total = T.scale(mse_loss(x_hat, x_target), w_mse)
    terms["mse"] = total.item() / w_mse if w_mse else mse_loss(x_hat, x_target).item()
    if w_perc > 0:
        if extractor is None:
            raise ValueError("composite_distance: w_perc > 0 requires an extractor")
        p = perceptual_loss(extractor, x_hat, x_target)
        terms["perc"] = p.item()
        total = T.add(total, T.scale(p, w_perc))
    else:
        terms["perc"] = 0.0
    if w_gan > 0 and gan_active:
        if disc is None:
            raise ValueError("composite_distance: w_gan > 0 requires a discriminator")
        g = generator_gan_loss(disc, x_hat)
        terms["gan"] = g.item()
        total = T.add(total, T.scale(g, w_gan))
    else:
        terms["gan"] = 0.0
    if w_kl > 0 and code is not None:
        k = kl_loss(code)
        terms["kl"] = k.item()
        total = T.add(total, T.scale(k, w_kl))
    else:
        terms["kl"] = kl_loss(code).item() if code is not None else 0.0
    terms["total"] = total.item()
    return total, terms


class TrainAbort(RuntimeError):
    """Non-finite loss; carries the per-term diagnostic dump."""

    def __init__(self, message, diagnostics):
        super().__init__(f"{message}; diagnostics: {diagnostics}")
        self.diagnostics = diagnostics


def sample_level(rng, level_probs):
    return int(rng.choice(4, p=np.asarray(level_probs, dtype=np.float64)))


def mlsr_train_step(model, opt, x, rng, cfg, extractor, disc=None, opt_d=None,
                    step_idx=0, total_steps=1, forced_level=None, forced_noise=None):
    """One training step: sample a level, reconstruct the level-blurred
    target from the level-masked latent, update. Returns the term dict."""
    level = forced_level if forced_level is not None else sample_level(rng, cfg.level_probs)
    gan_active = (cfg.w_gan > 0 and disc is not None
                  and step_idx >= cfg.gan_warmup_frac * total_steps)
    x = np.asarray(x, dtype=np.float32)
    target = sp.image_lowpass(x, level)
    weights = (cfg.w_mse, cfg.w_perc, cfg.w_gan, cfg.w_kl)
    opt.zero_grad()
    try:
        with Tape() as tape:
            code = model.encode(x, rng=rng)
            if forced_noise is not None:
                code = _reencode_with_noise(model, code, forced_noise)
            z_att = sp.latent_lowpass(code.sample, level)
            x_hat = model.decode(z_att)
            total, terms = composite_distance(
                x_hat, target, code=code, extractor=extractor, disc=disc,
                weights=weights, gan_active=gan_active)
        tape.backward(total)
    except NumericError as e:
        raise TrainAbort(f"non-finite loss at step {step_idx} (level {level})",
                         {"level": level, "step": step_idx, "error": str(e)}) from e
    opt.step()
    terms["level"] = level
    terms["d_loss"] = 0.0
    if gan_active and step_idx % 2 == 1 and opt_d is not None:
        opt_d.zero_grad()
        with Tape() as dtape:
            d_loss = discriminator_loss(disc, Tensor(x), x_hat.data)
        dtape.backward(d_loss)
        opt_d.step()
        terms["d_loss"] = d_loss.item()
    return terms


def _reencode_with_noise(model, code, noise):
    noise = np.asarray(noise, dtype=np.float32)
    std = T.exp(T.scale(code.logvar, 0.5))
    sample = T.add(code.mean, T.mul(std, Tensor(noise)))
    return LatentCode(mean=code.mean, logvar=code.logvar, sample=sample, noise=noise)


def _save(path, model, opt, disc, opt_d, step, config_hash):
    arrays = dict(model.state_arrays())
    arrays.update({f"opt.{k}": v for k, v in opt.state_arrays().items()})
    if disc is not None:
        arrays.update({f"disc.{k}": v for k, v in disc.state_arrays().items()})
        arrays.update({f"opt_d.{k}": v for k, v in opt_d.state_arrays().items()})
    meta = {"kind": "vae", "step": step, "seed": model.seed,
            "config": asdict(model.cfg), "config_hash": config_hash,
            "opt_step": opt.step_count}
    ck.write_checkpoint(path, arrays, meta)


def load_vae(path):
    """Rebuild a VaeModel from a checkpoint written by train_vae."""
    arrays, meta = ck.read_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ck.FormatError(f"{path!r} is not a VAE checkpoint")
    cfg_dict = dict(meta["config"])
    cfg_dict["level_probs"] = tuple(cfg_dict["level_probs"])
    cfg = VaeConfig(**cfg_dict)
    model = VaeModel(cfg, meta["seed"])
    model.load_state_arrays({k: v for k, v in arrays.items()
                             if not k.startswith(("opt.", "disc.", "opt_d."))})
    return model, meta


def train_vae(cfg, dataset, steps, seed, out_dir, resume=None, config_hash="",
              log_every=1):
    """Full MLSR training loop. Writes checkpoint.dvae and metrics.csv in
    out_dir; returns the trained model."""
    os.makedirs(out_dir, exist_ok=True)
    model = VaeModel(cfg, seed)
    extractor = PerceptualExtractor(seed=cfg.perc_seed)
    disc = PatchDiscriminator(np.random.default_rng([seed, 202]),
                              cfg.image_size) if cfg.w_gan > 0 else None
    opt = Adam(model.parameters(), lr=cfg.lr)
    opt_d = Adam(disc.parameters(), lr=cfg.lr) if disc is not None else None
    start_step = 0
    if resume is not None:
        arrays, meta = ck.read_checkpoint(resume)
        model.load_state_arrays({k: v for k, v in arrays.items()
                                 if not k.startswith(("opt.", "disc.", "opt_d."))})
        opt.load_state_arrays({k[len("opt."):]: v for k, v in arrays.items()
                               if k.startswith("opt.")}, meta["opt_step"])
        if disc is not None and any(k.startswith("disc.") for k in arrays):
            disc.load_state_arrays({k[len("disc."):]: v for k, v in arrays.items()
                                    if k.startswith("disc.")})
            opt_d.load_state_arrays({k[len("opt_d."):]: v for k, v in arrays.items()
                                     if k.startswith("opt_d.")}, meta["opt_step"])
        start_step = meta["step"]
    rng = np.random.default_rng([seed, 303, start_step])
    batches = batch_iter(dataset, cfg.batch_size, seed=np.random.default_rng(
        [seed, 404, start_step]).integers(2**31))
    ckpt_path = os.path.join(out_dir, "checkpoint.dvae")
    csv_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if resume is not None and os.path.exists(csv_path) else "w"
    with open(csv_path, mode, newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if mode == "w":
            f.write(f"# config_hash={config_hash}\n")
            writer.writerow(["step", "level", "total", "mse", "perc", "gan", "kl", "d_loss"])
        for step in range(start_step, start_step + steps):
            x, _ = next(batches)
            terms = mlsr_train_step(model, opt, x, rng, cfg, extractor,
                                    disc=disc, opt_d=opt_d, step_idx=step,
                                    total_steps=start_step + steps)
            if step % log_every == 0 or step == start_step + steps - 1:
                writer.writerow([step, terms["level"],
                                 f"{terms['total']:.6g}", f"{terms['mse']:.6g}",
                                 f"{terms['perc']:.6g}", f"{terms['gan']:.6g}",
                                 f"{terms['kl']:.6g}", f"{terms['d_loss']:.6g}"])
    _save(ckpt_path, model, opt, disc, opt_d, start_step + steps, config_hash)
    return model, ckpt_path, csv_path
