"""Two-branch translation, alternating GAN updates, checkpointed training and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_model, save_checkpoint
from .config import ABLATIONS, Ablation, TrainConfig, lr_at, parse_config
from .data import load_image, read_manifest
from .features import build_extractor
from .losses import (
    LossBreakdown,
    LossInputError,
    adversarial_losses_from_logits,
    cycle_loss,
    kl_loss,
    perceptual_loss,
    total_loss,
)
from .networks import (
    BlurCode,
    BlurPosterior,
    DeblurModel,
    blur_encode,
    content_encode,
    discriminate_logits,
    generate,
    init_model,
    sample_blur_code,
)
from .optim import Adam

log = logging.getLogger(__name__)

FULL = ABLATIONS["full"]
FLAT_STD = 1e-3  # crops at or below this pixel std (in [-1, 1] units) are redrawn
MAX_REDRAWS = 100
LOG_FIELDS = ("epoch", "iter", "kl", "adv_ds", "adv_db", "cycle", "perceptual", "total", "lr")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass
class TranslationBundle:
    b: torch.Tensor
    s: torch.Tensor
    s_b: torch.Tensor
    b_hat: torch.Tensor
    b_s: torch.Tensor | None = None
    s_hat: torch.Tensor | None = None
    posterior_b: BlurPosterior | None = None
    code_b: BlurCode | None = None
    posterior_bs: BlurPosterior | None = None
    code_bs: BlurCode | None = None


def _zeros_code(model, n, like):
    return torch.zeros(n, model.config.latent_dim, dtype=like.dtype)


def draw_noise(model, n, generator=None):
    """The two standard-normal draws of one translation (forward, backward)."""
    shape = (n, model.config.latent_dim)
    return torch.randn(shape, generator=generator), torch.randn(shape, generator=generator)


def forward_backward_translate(model: DeblurModel, b, s, noise=None, ablation: Ablation = FULL, generator=None):
    """s_b, b_s from (b, s) and the reconstructions b_hat, s_hat.

    Without a blurring branch only s_b and its reblurred b_hat are produced;
    without a blur encoder the generators receive an all-zero code.
    """
    if b.shape != s.shape:
        raise ValueError(f"blurred and sharp batches differ in shape: {tuple(b.shape)} vs {tuple(s.shape)}")
    n = b.shape[0]
    if noise is None:
        noise = draw_noise(model, n, generator)
    noise_fwd, noise_bwd = noise

    post_b = code_b = post_bs = code_bs = None
    if ablation.blur_encoder:
        post_b = blur_encode(model, b)
        code_b = sample_blur_code(post_b, noise_fwd)
        z = code_b.z_b
    else:
        z = _zeros_code(model, n, b)

    s_b = generate(model, "sharp", content_encode(model, "blurred", b), z)
    b_s = s_hat = None
    if ablation.blur_branch:
        b_s = generate(model, "blurred", content_encode(model, "sharp", s), z)

    if ablation.blur_encoder:
        post_bs = blur_encode(model, b_s)
        code_bs = sample_blur_code(post_bs, noise_bwd)
        z_back = code_bs.z_b
    else:
        z_back = _zeros_code(model, n, b)
    b_hat = generate(model, "blurred", content_encode(model, "sharp", s_b), z_back)
    if ablation.blur_branch:
        s_hat = generate(model, "sharp", content_encode(model, "blurred", b_s), z_back)
    return TranslationBundle(b, s, s_b, b_hat, b_s, s_hat, post_b, code_b, post_bs, code_bs)


@dataclass
class Optimizers:
    gen: Adam
    dis: Adam

    def as_dict(self):
        return {"gen": self.gen, "dis": self.dis}

    def set_lr(self, lr):
        self.gen.lr = lr
        self.dis.lr = lr


def make_optimizers(model: DeblurModel, config: TrainConfig, lr=None) -> Optimizers:
    names = {id(p): name for name, p in model.named_parameters()}
    betas = (config.adam_beta1, config.adam_beta2)
    lr = config.lr0 if lr is None else lr
    gen = Adam([(names[id(p)], p) for p in model.generator_parameters()], lr, betas)
    dis = Adam([(names[id(p)], p) for p in model.discriminator_parameters()], lr, betas)
    return Optimizers(gen, dis)


def _fakes(model, b, s, ablation, generator):
    """Forward translations only, for the discriminator step."""
    n = b.shape[0]
    if ablation.blur_encoder:
        noise, _ = draw_noise(model, n, generator)
        z = sample_blur_code(blur_encode(model, b), noise).z_b
    else:
        z = _zeros_code(model, n, b)
    s_b = generate(model, "sharp", content_encode(model, "blurred", b), z)
    b_s = generate(model, "blurred", content_encode(model, "sharp", s), z) if ablation.blur_branch else None
    return s_b, b_s


def _clip(params, max_norm):
    if max_norm > 0:
        torch.nn.utils.clip_grad_norm_(params, max_norm)


def discriminator_step(model, b, s, opt: Adam, config: TrainConfig, generator=None):
    ablation = config.ablation
    with torch.no_grad():
        s_b, b_s = _fakes(model, b, s, ablation, generator)
    loss = adversarial_losses_from_logits(
        discriminate_logits(model, "sharp", s), discriminate_logits(model, "sharp", s_b), "discriminator"
    )
    if ablation.blur_branch:
        loss = loss + adversarial_losses_from_logits(
            discriminate_logits(model, "blurred", b), discriminate_logits(model, "blurred", b_s), "discriminator"
        )
    if not torch.isfinite(loss):
        raise DivergenceError(f"discriminator loss is not finite ({float(loss)})")
    opt.zero_grad()
    loss.backward()
    _clip(opt.params, config.grad_clip)
    opt.step()
    return loss.detach()


def generator_losses(model, bundle: TranslationBundle, config: TrainConfig, extractor=None) -> LossBreakdown:
    ablation = config.ablation
    weights = config.effective_weights()
    zero = bundle.b.new_zeros(())
    adv_ds = adversarial_losses_from_logits(None, discriminate_logits(model, "sharp", bundle.s_b), "generator")
    adv_db = zero
    if ablation.blur_branch:
        adv_db = adversarial_losses_from_logits(None, discriminate_logits(model, "blurred", bundle.b_s), "generator")
    kl = zero
    if bundle.posterior_b is not None:
        try:
            kl = kl_loss(bundle.posterior_b)
        except LossInputError as exc:
            raise DivergenceError(f"loss term kl: {exc}") from None
    cycle = cycle_loss(bundle.s, bundle.s_hat, bundle.b, bundle.b_hat)
    perceptual = zero
    if weights.lambda_p > 0 and config.task_preset != "text":
        if extractor is None:
            raise TrainingError("perceptual loss enabled but no feature extractor given")
        perceptual = perceptual_loss(extractor, bundle.s_b, bundle.b)
    terms = {"kl": kl, "adv_ds": adv_ds, "adv_db": adv_db, "cycle": cycle, "perceptual": perceptual}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise DivergenceError(f"loss term {name} is not finite ({float(value)})")
    return total_loss(weights=weights, task_preset=config.task_preset, **terms)


def train_step(model, batch_b, batch_s, opts: Optimizers, config: TrainConfig, extractor=None,
               generator=None, d_batches=None) -> LossBreakdown:
    """``d_steps_per_g`` discriminator updates, then one encoder/generator update.

    ``d_batches`` supplies one (b, s) pair per discriminator update; by default
    the generator batch is reused.  Returns the generator-step losses.
    """
    if batch_b.shape[0] != batch_s.shape[0]:
        raise ValueError("blurred and sharp batches must have the same size")
    if d_batches is None:
        d_batches = [(batch_b, batch_s)] * config.d_steps_per_g
    for b, s in d_batches:
        discriminator_step(model, b, s, opts.dis, config, generator)

    dis_params = model.discriminator_parameters()
    for p in dis_params:
        p.requires_grad_(False)
    try:
        bundle = forward_backward_translate(model, batch_b, batch_s, ablation=config.ablation, generator=generator)
        losses = generator_losses(model, bundle, config, extractor)
        opts.gen.zero_grad()
        losses.total.backward()
    finally:
        for p in dis_params:
            p.requires_grad_(True)
    _clip(opts.gen.params, config.grad_clip)
    opts.gen.step()
    return LossBreakdown(*(getattr(losses, t).detach() for t in LossBreakdown.TERMS), weights=losses.weights)


class ImagePool:
    """Images of one manifest held in memory; draws unpaired random crops."""

    def __init__(self, images, crop_size, flip=True):
        if not images:
            raise TrainingError("image pool is empty")
        self.images = [np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32) for img in images]
        self.crop = crop_size
        self.flip = flip
        for img in self.images:
            if min(img.shape[1:]) < crop_size:
                raise TrainingError(f"image of size {img.shape[1:]} is smaller than crop {crop_size}")

    @classmethod
    def from_manifest(cls, manifest, channels, crop_size, flip=True):
        if isinstance(manifest, (str, Path)):
            manifest = read_manifest(manifest)
        if len(manifest) == 0:
            raise TrainingError("manifest is empty")
        return cls([load_image(p, channels) for p in manifest.paths()], crop_size, flip)

    def __len__(self):
        return len(self.images)

    def _draw(self, rng):
        img = self.images[rng.integers(len(self.images))]
        top = rng.integers(img.shape[1] - self.crop + 1)
        left = rng.integers(img.shape[2] - self.crop + 1)
        return img[:, top : top + self.crop, left : left + self.crop]

    def sample(self, rng: np.random.Generator, n):
        """``n`` crops drawn with replacement, randomly flipped.

        Flat crops are redrawn: a constant input makes every instance
        normalisation layer singular and the backward pass overflows.
        """
        out = np.empty((n, self.images[0].shape[0], self.crop, self.crop), dtype=np.float32)
        for k in range(n):
            patch = self._draw(rng)
            for _ in range(MAX_REDRAWS):
                if patch.std() > FLAT_STD:
                    break
                patch = self._draw(rng)
            else:
                raise TrainingError(f"no crop with std above {FLAT_STD} after {MAX_REDRAWS} draws")
            if self.flip and rng.random() < 0.5:
                patch = patch[:, :, ::-1]
            out[k] = patch
        return torch.from_numpy(out)


def epoch_rngs(master_seed, epoch):
    """Batch-sampling and noise generators; a pure function of (seed, epoch) so resumes replay exactly."""
    seq = np.random.SeedSequence([int(master_seed), int(epoch)])
    np_seq, torch_seq = seq.spawn(2)
    torch_gen = torch.Generator().manual_seed(int(torch_seq.generate_state(1, np.uint64)[0] >> 1))
    return np.random.default_rng(np_seq), torch_gen


def iterations_per_epoch(config, n_sharp, n_blurred):
    if config.iters_per_epoch:
        return config.iters_per_epoch
    return max(1, math.ceil(max(n_sharp, n_blurred) / config.batch_size))


def make_extractor(config: TrainConfig, layer="conv3_3"):
    return build_extractor(
        config.extractor, layer, config.image_channels, seed=0, weights=config.extractor_weights or None
    )


def checkpoint_name(epoch):
    return f"ckpt_epoch{epoch:03d}.safetensors"


def _format_log(epoch, it, losses: dict, lr):
    vals = [str(epoch), str(it)] + [repr(losses[k]) for k in LOG_FIELDS[2:-1]] + [repr(lr)]
    return "\t".join(vals) + "\n"


def _truncate_log(path, last_epoch):
    if not path.exists():
        return
    kept = [
        line for line in path.read_text().splitlines(keepends=True)
        if line.startswith("#") or int(line.split("\t", 1)[0]) <= last_epoch
    ]
    path.write_text("".join(kept))


def train(config: TrainConfig, sharp_manifest, blurred_manifest, out_dir, resume=None, extractor=None,
          max_epochs=None) -> Path:
    """Run the schedule, writing a checkpoint per epoch and ``metrics.tsv``.

    ``resume`` names a checkpoint of the same config; training continues with
    the following epoch.  ``max_epochs`` stops early (used by budgeted sweeps).
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flip = config.task_preset != "text"
    sharp = ImagePool.from_manifest(sharp_manifest, config.image_channels, config.crop_size, flip)
    blurred = ImagePool.from_manifest(blurred_manifest, config.image_channels, config.crop_size, flip)
    (out_dir / "config.txt").write_text(config.echo())

    if resume is not None:
        model, tensors, meta = load_model(resume, config.net)
        if meta.get("config_hash") != config.digest():
            raise CheckpointError(f"checkpoint {resume} was written with a different config")
        opts = make_optimizers(model, config)
        steps = json.loads(meta["optimizer_steps"])
        for key, opt in opts.as_dict().items():
            opt.load_state_tensors(f"optim/{key}", tensors, steps[key])
        start = int(meta["epoch"]) + 1
    else:
        model = init_model(config.net, config.master_seed)
        opts = make_optimizers(model, config)
        start = 0

    if extractor is None and config.effective_weights().lambda_p > 0 and config.task_preset != "text":
        extractor = make_extractor(config)

    log_path = out_dir / "metrics.tsv"
    if start == 0 or not log_path.exists():
        log_path.write_text("#" + "\t".join(LOG_FIELDS) + "\n")
    else:
        _truncate_log(log_path, start - 1)

    iters = iterations_per_epoch(config, len(sharp), len(blurred))
    last = Path(resume) if resume is not None else None
    end = config.total_epochs if max_epochs is None else min(config.total_epochs, start + max_epochs)
    n = config.batch_size
    with open(log_path, "a") as log_fh:
        for epoch in range(start, end):
            lr = lr_at(epoch, config)
            opts.set_lr(lr)
            rng, gen = epoch_rngs(config.master_seed, epoch)
            for i in range(iters):
                d_batches = [(blurred.sample(rng, n), sharp.sample(rng, n)) for _ in range(config.d_steps_per_g)]
                batch_b, batch_s = blurred.sample(rng, n), sharp.sample(rng, n)
                losses = train_step(model, batch_b, batch_s, opts, config, extractor, gen, d_batches)
                it = epoch * iters + i
                if i % config.log_every == 0 or i == iters - 1:
                    log_fh.write(_format_log(epoch, it, losses.as_floats(), lr))
            log_fh.flush()
            last = save_checkpoint(
                out_dir / checkpoint_name(epoch), model, opts.as_dict(), epoch=epoch, train_config=config
            )
            log.info("epoch %d done, total loss %.4f", epoch, float(losses.total))
    return last


@torch.no_grad()
def deblur(model: DeblurModel, b_t: torch.Tensor, use_blur_code: bool = True) -> torch.Tensor:
    """Deblurring branch alone: G_S(E_B^c(b_t), mu) with the noise fixed at zero."""
    content = content_encode(model, "blurred", b_t)
    if use_blur_code:
        z = blur_encode(model, b_t).mu
    else:
        z = _zeros_code(model, b_t.shape[0], b_t)
    return generate(model, "sharp", content, z)


def deblur_image(model, img, use_blur_code=True):
    """Deblur one H x W x C array of any size (reflect-padded to a multiple of 8)."""
    h, w = img.shape[:2]
    ph, pw = (-h) % 8, (-w) % 8
    ph += max(0, 16 - (h + ph))
    pw += max(0, 16 - (w + pw))
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    x = torch.from_numpy(np.ascontiguousarray(padded.transpose(2, 0, 1), dtype=np.float32))[None]
    out = deblur(model, x, use_blur_code)[0].numpy().transpose(1, 2, 0)
    return out[:h, :w].astype(np.float64)


def load_for_inference(path):
    """Model plus its training config (None for checkpoints written without one)."""
    model, _, meta = load_model(path)
    config = parse_config(meta["train_config"]) if "train_config" in meta else None
    model.eval()
    return model, config
