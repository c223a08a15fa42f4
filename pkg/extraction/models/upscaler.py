"""
Super-resolution of text crops.

The generator is a batch-norm-free RRDB network trained at an integer
native scale. Deployment resamples its output bilinearly to
ceil(dim * outscale), which is how fractional factors such as 1.5x are
delivered. Training minimizes

    L_G = L_percep + lambda * L_G^Ra + eta * L_1

with a relativistic average discriminator.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from ..common import ensure_min_size, resize_tensor, scaled_size, seed_everything, to_pixels, to_tensor
from ..config import SRConfig, TrainSchedule
from ..core.base_stage import UpscaleStage
from ..errors import DataError, GeometryError
from .training import TrainingCurve, batch_order, log_step, make_optimizer, progress

logger = logging.getLogger(__name__)

MIN_CROP_SIZE = 8

# Residual scaling inside and around the dense blocks.
RESIDUAL_SCALE = 0.2


class ResidualDenseBlock(nn.Module):
    """Five densely connected convolutions with a scaled residual."""

    def __init__(self, channels: int, growth_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, growth_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels + growth_channels, growth_channels, 3, 1, 1)
        self.conv3 = nn.Conv2d(channels + 2 * growth_channels, growth_channels, 3, 1, 1)
        self.conv4 = nn.Conv2d(channels + 3 * growth_channels, growth_channels, 3, 1, 1)
        self.conv5 = nn.Conv2d(channels + 4 * growth_channels, channels, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2)

    def forward(self, x: Tensor) -> Tensor:
        x1 = self.lrelu(self.conv1(x))
        x2 = self.lrelu(self.conv2(torch.cat((x, x1), 1)))
        x3 = self.lrelu(self.conv3(torch.cat((x, x1, x2), 1)))
        x4 = self.lrelu(self.conv4(torch.cat((x, x1, x2, x3), 1)))
        x5 = self.conv5(torch.cat((x, x1, x2, x3, x4), 1))
        return x + x5 * RESIDUAL_SCALE


class RRDB(nn.Module):
    """Three dense blocks chained inside an outer scaled residual."""

    def __init__(self, channels: int, growth_channels: int):
        super().__init__()
        self.rdb1 = ResidualDenseBlock(channels, growth_channels)
        self.rdb2 = ResidualDenseBlock(channels, growth_channels)
        self.rdb3 = ResidualDenseBlock(channels, growth_channels)

    def forward(self, x: Tensor) -> Tensor:
        return rrdb_forward(x, self)


def rrdb_forward(features: Tensor, block: RRDB) -> Tensor:
    """
    Apply one RRDB: x + 0.2 * (rdb3(rdb2(rdb1(x))) - x).

    With every convolution zeroed the block is an exact identity.
    """
    chained = block.rdb3(block.rdb2(block.rdb1(features)))
    return features + RESIDUAL_SCALE * (chained - features)


class RRDBNet(nn.Module):
    """Generator: shallow conv, RRDB trunk, nearest-neighbour x2 upsampling stages, output convs."""

    def __init__(self, config: SRConfig):
        super().__init__()
        self.config = config
        nf = config.base_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.trunk = nn.Sequential(*[RRDB(nf, config.growth_channels) for _ in range(config.num_rrdb_blocks)])
        self.trunk_conv = nn.Conv2d(nf, nf, 3, 1, 1)
        self.upconvs = nn.ModuleList([nn.Conv2d(nf, nf, 3, 1, 1)
                                      for _ in range(int(math.log2(config.native_scale)))])
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.lrelu = nn.LeakyReLU(0.2)
        for module in self.trunk.modules():
            if isinstance(module, nn.Conv2d):
                module.weight.data.mul_(0.1)

    def forward(self, x: Tensor) -> Tensor:
        """[B, 3, h, w] -> [B, 3, h * native_scale, w * native_scale]"""
        fea = self.conv_first(x)
        fea = fea + self.trunk_conv(self.trunk(fea))
        for upconv in self.upconvs:
            fea = self.lrelu(upconv(F.interpolate(fea, scale_factor=2, mode='nearest')))
        out = self.conv_last(self.lrelu(self.conv_hr(fea)))
        if self.config.global_skip:
            out = out + F.interpolate(x, scale_factor=self.config.native_scale,
                                      mode='bilinear', align_corners=False)
        return out


class Discriminator(nn.Module):
    """Four strided convolutions, global pooling and a linear real/fake logit."""

    def __init__(self, config: SRConfig):
        super().__init__()
        c = config.discriminator_channels
        layers = []
        in_channels = 3
        for out_channels in (c, c * 2, c * 4, c * 8):
            layers += [nn.Conv2d(in_channels, out_channels, 3, 2, 1), nn.LeakyReLU(0.2)]
            in_channels = out_channels
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(in_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        pooled = F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)
        return self.classifier(pooled).squeeze(1)


@dataclass
class SRLoss:
    """Generator objective and its three terms."""

    total: Tensor
    perceptual: Tensor
    adversarial: Tensor
    pixel: Tensor


def combine_generator_loss(perceptual, adversarial, pixel, lambda_adv: float, eta_l1: float):
    """L_percep + lambda * L_G^Ra + eta * L_1"""
    return perceptual + lambda_adv * adversarial + eta_l1 * pixel


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    return (a - b).abs().mean()


def relativistic_generator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Generator side of the relativistic average GAN: real should look less real than fake."""
    real_rel = real_logits - fake_logits.mean()
    fake_rel = fake_logits - real_logits.mean()
    return (F.binary_cross_entropy_with_logits(real_rel, torch.zeros_like(real_rel))
            + F.binary_cross_entropy_with_logits(fake_rel, torch.ones_like(fake_rel))) / 2


def relativistic_discriminator_loss(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    real_rel = real_logits - fake_logits.mean()
    fake_rel = fake_logits - real_logits.mean()
    return (F.binary_cross_entropy_with_logits(real_rel, torch.ones_like(real_rel))
            + F.binary_cross_entropy_with_logits(fake_rel, torch.zeros_like(fake_rel))) / 2


def _identity(x: Tensor) -> Tensor:
    return x


def generator_loss(lr: Tensor, hr: Tensor, generator: RRDBNet, discriminator: Optional[Discriminator],
                   feature_net: Optional[Callable[[Tensor], Tensor]], lambda_adv: float,
                   eta_l1: float) -> SRLoss:
    """
    Evaluate the generator objective on one batch.

    Args:
        lr: [B, 3, h, w] low-resolution inputs x_i
        hr: [B, 3, h*s, w*s] targets y
        generator: G
        discriminator: D; None drops the adversarial term
        feature_net: Pre-activation feature extractor; None uses the pixels themselves
        lambda_adv: Weight of the adversarial term
        eta_l1: Weight of the pixel term

    Returns:
        SRLoss with the total and each term
    """
    feature_net = feature_net or _identity
    fake = generator(lr)
    pixel = l1_loss(fake, hr)
    perceptual = l1_loss(feature_net(fake), feature_net(hr))
    if discriminator is not None:
        adversarial = relativistic_generator_loss(discriminator(hr), discriminator(fake))
    else:
        adversarial = torch.zeros((), dtype=fake.dtype)
    total = combine_generator_loss(perceptual, adversarial, pixel, lambda_adv, eta_l1)
    return SRLoss(total, perceptual, adversarial, pixel)


@torch.no_grad()
def generate(lr: np.ndarray, generator: RRDBNet, outscale: float = None) -> np.ndarray:
    """
    Upscale one crop.

    Args:
        lr: h x w x 3 array in [0, 1], both sides at least 8
        generator: Trained RRDBNet
        outscale: Output factor, default generator.config.outscale

    Returns:
        ceil(h * outscale) x ceil(w * outscale) x 3 array clamped to [0, 1]

    Raises:
        GeometryError: If a side is below 8 pixels ("crop below minimum size")
    """
    outscale = generator.config.outscale if outscale is None else outscale
    height, width = lr.shape[:2]
    if height < MIN_CROP_SIZE or width < MIN_CROP_SIZE:
        raise GeometryError(f"crop below minimum size: {height}x{width} < {MIN_CROP_SIZE}x{MIN_CROP_SIZE}")
    generator.eval()
    out = generator(to_tensor(lr))
    out = resize_tensor(out, scaled_size(height, width, outscale))
    return to_pixels(out.clamp(0.0, 1.0))


def _stack_pairs(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], native_scale: int):
    if not pairs:
        raise DataError("no super-resolution training pairs")
    shape = pairs[0][0].shape
    for lr, hr in pairs:
        if hr.shape[0] != lr.shape[0] * native_scale or hr.shape[1] != lr.shape[1] * native_scale:
            raise DataError(f"unpaired shapes: {lr.shape} -> {hr.shape} at scale {native_scale}")
        if lr.shape != shape:
            raise DataError(f"training pairs must share one size, got {lr.shape} and {shape}")
    lr = torch.cat([to_tensor(lr) for lr, _ in pairs])
    hr = torch.cat([to_tensor(hr) for _, hr in pairs])
    return lr, hr


def train_sr(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], config: SRConfig, schedule: TrainSchedule,
             feature_net: Optional[Callable[[Tensor], Tensor]] = None):
    """
    Train the generator in two phases.

    Phase 1 runs schedule.pretrain_steps of pixel L1 only. Phase 2 runs
    schedule.steps of the full objective, alternating one generator and one
    discriminator update.

    Args:
        pairs: (lr, hr) arrays with hr = lr * native_scale, all the same size
        config: Generator and loss settings
        schedule: Optimization schedule
        feature_net: Pre-activation feature extractor for the perceptual term

    Returns:
        (generator in eval mode, discriminator, TrainingCurve)

    Raises:
        DataError: On mismatched pair shapes
    """
    lr_all, hr_all = _stack_pairs(pairs, config.native_scale)
    generator_seed = seed_everything(schedule.seed)
    generator = RRDBNet(config)
    discriminator = Discriminator(config)
    g_optimizer = make_optimizer(generator.parameters(), schedule)
    d_optimizer = make_optimizer(discriminator.parameters(), schedule)
    if feature_net is not None and isinstance(feature_net, nn.Module):
        for parameter in feature_net.parameters():
            parameter.requires_grad_(False)

    curve = TrainingCurve('sr')

    def record(phase, total, pixel, perceptual=0.0, adversarial=0.0, disc=0.0):
        curve.losses.append(float(total))
        curve.add('phase', phase)
        curve.add('pixel_l1', float(pixel))
        curve.add('perceptual', float(perceptual))
        curve.add('adversarial', float(adversarial))
        curve.add('discriminator', float(disc))

    generator.train()
    pretrain = schedule.with_steps(schedule.pretrain_steps)
    for step, indices, _ in progress(batch_order(len(lr_all), pretrain, generator_seed), 'sr-pretrain'):
        loss = l1_loss(generator(lr_all[indices]), hr_all[indices])
        g_optimizer.zero_grad()
        loss.backward()
        g_optimizer.step()
        record(1, loss, loss)
        log_step('sr-pretrain', step, float(loss))

    for step, indices, _ in progress(batch_order(len(lr_all), schedule, generator_seed), 'sr'):
        lr, hr = lr_all[indices], hr_all[indices]
        losses = generator_loss(lr, hr, generator, discriminator, feature_net,
                                config.lambda_adv, config.eta_l1)
        g_optimizer.zero_grad()
        losses.total.backward()
        g_optimizer.step()

        fake = generator(lr).detach()
        d_loss = relativistic_discriminator_loss(discriminator(hr), discriminator(fake))
        d_optimizer.zero_grad()
        d_loss.backward()
        d_optimizer.step()

        record(2, losses.total, losses.pixel, losses.perceptual, losses.adversarial, d_loss)
        log_step('sr', step, float(losses.total))

    generator.eval()
    discriminator.eval()
    return generator, discriminator, curve


class TextUpscaler(UpscaleStage):
    """
    Pipeline adapter around a trained generator.

    Crops smaller than the generator's minimum are first enlarged
    bilinearly; an outscale of 1.0 returns the crop untouched.
    """

    def __init__(self, generator: RRDBNet):
        self.generator = generator

    def upscale(self, crop, context):
        crop = self.check_pixels(crop)
        if not context.is_upscaling:
            return crop
        return generate(ensure_min_size(crop, MIN_CROP_SIZE), self.generator, context.outscale)
