"""
Attention text recognizer.

A crop is converted to grayscale, resized to the normalized frame and
rectified by a thin-plate-spline warp whose source control points come from
a small localization network. A residual convolutional stack turns the
rectified image into a sequence of T = W/4 feature vectors, a bidirectional
LSTM adds context, and an additive-attention decoder emits characters until
END.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from ..common import resize_tensor, seed_everything, to_grayscale, to_tensor
from ..config import RecognizerConfig, TrainSchedule
from ..core.base_stage import RecognitionStage
from ..errors import CharsetError, GeometryError
from .training import TrainingCurve, batch_order, log_step, make_optimizer, progress

logger = logging.getLogger(__name__)

START = 0
END = 1


class Charset:
    """
    Index mapping for the decoder: 0 is START, 1 is END, characters follow.
    """

    def __init__(self, characters: str):
        self.characters = characters
        self._index = {ch: i + 2 for i, ch in enumerate(characters)}

    def __len__(self):
        return len(self.characters) + 2

    def __eq__(self, other):
        return isinstance(other, Charset) and other.characters == self.characters

    def offenders(self, text: str) -> List[str]:
        return sorted({ch for ch in text if ch not in self._index})

    def encode(self, text: str) -> List[int]:
        """
        Raises:
            CharsetError: If text holds characters outside the charset
        """
        missing = self.offenders(text)
        if missing:
            raise CharsetError(f"characters outside the charset: {''.join(missing)!r}", missing)
        return [self._index[ch] for ch in text]

    def decode(self, indices: Sequence[int]) -> str:
        return ''.join(self.characters[i - 2] for i in indices if i >= 2)


def target_fiducials(num_fiducial: int) -> Tensor:
    """F fixed target points: F/2 along the top edge, F/2 along the bottom, in [0, 1]^2."""
    xs = torch.linspace(0.0, 1.0, num_fiducial // 2, dtype=torch.float64)
    top = torch.stack([xs, torch.zeros_like(xs)], dim=1)
    bottom = torch.stack([xs, torch.ones_like(xs)], dim=1)
    return torch.cat([top, bottom])


def _tps_kernel(a: Tensor, b: Tensor) -> Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0
    r2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return r2 * torch.log(r2.clamp(min=1e-12))


class TPSGrid(nn.Module):
    """
    Precomputed thin-plate-spline solver for a fixed target layout and output size.

    Attributes:
        inv_delta: (F+3) x (F+3) inverse of the TPS system over the target points
        p_hat: (H*W) x (F+3) kernel rows of the output pixel centers
    """

    def __init__(self, num_fiducial: int, out_size: Tuple[int, int]):
        super().__init__()
        self.num_fiducial = num_fiducial
        self.out_size = tuple(out_size)
        target = target_fiducials(num_fiducial)
        n = num_fiducial
        delta = torch.zeros(n + 3, n + 3, dtype=torch.float64)
        delta[:n, 0] = 1.0
        delta[:n, 1:3] = target
        delta[:n, 3:] = _tps_kernel(target, target)
        delta[n:n + 2, 3:] = target.t()
        delta[n + 2, 3:] = 1.0
        height, width = self.out_size
        ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
        xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width
        gy, gx = torch.meshgrid(ys, xs, indexing='ij')
        points = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
        p_hat = torch.cat([torch.ones(len(points), 1, dtype=torch.float64), points,
                           _tps_kernel(points, target)], dim=1)
        self.register_buffer('inv_delta', torch.linalg.inv(delta).to(torch.float32), persistent=False)
        self.register_buffer('p_hat', p_hat.to(torch.float32), persistent=False)

    def forward(self, fiducials: Tensor) -> Tensor:
        """
        Map output pixel centers onto source coordinates.

        Args:
            fiducials: [B, F, 2] source points (x, y) in [0, 1]

        Returns:
            [B, H, W, 2] sampling grid in grid_sample's [-1, 1] convention
        """
        batch = fiducials.shape[0]
        inv_delta = self.inv_delta.to(fiducials.dtype)
        p_hat = self.p_hat.to(fiducials.dtype)
        padded = torch.cat([fiducials, fiducials.new_zeros(batch, 3, 2)], dim=1)
        transform = inv_delta @ padded  # B, F+3, 2
        grid = p_hat @ transform  # B, H*W, 2
        return (grid * 2.0 - 1.0).view(batch, *self.out_size, 2)


def check_fiducials(fiducials: Tensor):
    """
    Raises:
        GeometryError: If the points of any item are non-finite or all collinear ("degenerate fiducials")
    """
    if not torch.isfinite(fiducials).all():
        raise GeometryError("degenerate fiducials: non-finite control points")
    centered = fiducials - fiducials.mean(dim=1, keepdim=True)
    singular = torch.linalg.svdvals(centered.detach().to(torch.float64))
    if (singular[:, -1] <= 1e-6 * singular[:, 0].clamp(min=1.0)).any():
        raise GeometryError("degenerate fiducials: control points are collinear")


def tps_normalize(crop: Tensor, fiducials: Tensor, out_size: Tuple[int, int], grid: TPSGrid = None) -> Tensor:
    """
    Warp crops onto the normalized frame.

    Args:
        crop: [B, C, h, w] images
        fiducials: [B, F, 2] source control points in [0, 1]^2
        out_size: (H, W) of the result
        grid: Reusable solver; built on the fly when omitted

    Returns:
        [B, C, H, W] rectified images, sampled bilinearly with border padding

    Raises:
        GeometryError: On degenerate fiducials
    """
    check_fiducials(fiducials)
    grid = grid or TPSGrid(fiducials.shape[1], out_size)
    sampling = grid(fiducials)
    return F.grid_sample(crop, sampling.to(crop.dtype), mode='bilinear', padding_mode='border',
                         align_corners=False)


class LocalizationNetwork(nn.Module):
    """Predicts the F source control points; starts out at the identity layout."""

    def __init__(self, num_fiducial: int):
        super().__init__()
        self.num_fiducial = num_fiducial
        self.conv = nn.Sequential(
            nn.Conv2d(1, 16, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(16, 32, 3, 1, 1), nn.ReLU(), nn.MaxPool2d(2, 2),
            nn.Conv2d(32, 64, 3, 1, 1), nn.ReLU(), nn.AdaptiveAvgPool2d(1),
        )
        self.fc1 = nn.Sequential(nn.Linear(64, 64), nn.ReLU())
        self.fc2 = nn.Linear(64, num_fiducial * 2)
        nn.init.zeros_(self.fc2.weight)
        with torch.no_grad():
            self.fc2.bias.copy_(target_fiducials(num_fiducial).reshape(-1).to(torch.float32))

    def forward(self, x: Tensor) -> Tensor:
        features = self.fc1(self.conv(x).flatten(1))
        return self.fc2(features).view(x.shape[0], self.num_fiducial, 2)


class BasicBlock(nn.Module):
    """Two 3x3 convolutions around a skip path (1x1 projection when widths differ)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1)
        self.shortcut = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: Tensor, pre_activation: bool = False) -> Tensor:
        out = self.conv2(F.relu(self.conv1(x))) + self.shortcut(x)
        return out if pre_activation else F.relu(out)


class ResNetFeatureExtractor(nn.Module):
    """Residual stack reducing a [B, 1, H, W] frame to [B, T, D] with T = W/4."""

    def __init__(self, channels: Tuple[int, int, int]):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Conv2d(1, c1, 3, 1, 1)
        self.block1 = BasicBlock(c1, c2)
        self.block2 = BasicBlock(c2, c3)
        self.block3 = BasicBlock(c3, c3)
        self.output_dim = c3

    def forward(self, x: Tensor, pre_activation: bool = False) -> Tensor:
        x = F.max_pool2d(F.relu(self.stem(x)), 2)
        x = F.max_pool2d(self.block1(x), 2)
        x = F.max_pool2d(self.block2(x), (2, 1))
        x = self.block3(x, pre_activation=pre_activation)
        if pre_activation:
            return x
        return F.adaptive_avg_pool2d(x, (1, None)).squeeze(2).permute(0, 2, 1)


def extract_features(normalized: Tensor, extractor: ResNetFeatureExtractor) -> Tensor:
    """[B, 1, H, W] normalized frames -> [B, W/4, D] feature sequence."""
    return extractor(normalized)


class BidirectionalEncoder(nn.Module):

    def __init__(self, input_size: int, hidden_size: int, output_size: int):
        super().__init__()
        self.rnn = nn.LSTM(input_size, hidden_size, bidirectional=True, batch_first=True)
        self.output = nn.Linear(hidden_size * 2, output_size)

    def forward(self, features: Tensor) -> Tensor:
        recurrent, _ = self.rnn(features)
        return self.output(recurrent)


def sequence_model(features: Tensor, encoder: BidirectionalEncoder) -> Tensor:
    """[B, T, D] -> [B, T, hidden]; every output step sees the whole sequence."""
    return encoder(features)


@dataclass
class Decoded:
    """Greedy decoding of one batch."""

    indices: List[List[int]]
    confidences: List[float]
    attention: List[Tensor]
    probabilities: List[Tensor]


class AttentionDecoder(nn.Module):
    """
    LSTM decoder with additive attention over the encoder sequence.

    At each step the score tanh(W_i h_t + W_h s_prev) selects a context
    vector, which together with the one-hot previous symbol drives the
    recurrence. START is never emitted.
    """

    def __init__(self, input_size: int, hidden_size: int, num_classes: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.num_classes = num_classes
        self.i2h = nn.Linear(input_size, hidden_size, bias=False)
        self.h2h = nn.Linear(hidden_size, hidden_size)
        self.score = nn.Linear(hidden_size, 1, bias=False)
        self.rnn = nn.LSTMCell(input_size + num_classes, hidden_size)
        self.generator = nn.Linear(hidden_size, num_classes)

    def step(self, encoded: Tensor, projected: Tensor, state, previous: Tensor):
        hidden, cell = state
        energy = self.score(torch.tanh(projected + self.h2h(hidden).unsqueeze(1)))
        alpha = F.softmax(energy, dim=1)  # B, T, 1
        context = torch.bmm(alpha.transpose(1, 2), encoded).squeeze(1)
        one_hot = F.one_hot(previous, self.num_classes).to(encoded.dtype)
        hidden, cell = self.rnn(torch.cat([context, one_hot], dim=1), (hidden, cell))
        logits = self.generator(hidden)
        logits = logits.masked_fill(_start_mask(logits), float('-inf'))
        return logits, (hidden, cell), alpha.squeeze(2)

    def initial_state(self, encoded: Tensor):
        zeros = encoded.new_zeros(encoded.shape[0], self.hidden_size)
        return zeros, zeros

    def forward(self, encoded: Tensor, inputs: Tensor) -> Tensor:
        """
        Teacher-forced pass.

        Args:
            encoded: [B, T, D] contextual features
            inputs: [B, L] previous-symbol indices, starting with START

        Returns:
            [B, L, num_classes] logits
        """
        projected = self.i2h(encoded)
        state = self.initial_state(encoded)
        outputs = []
        for t in range(inputs.shape[1]):
            logits, state, _ = self.step(encoded, projected, state, inputs[:, t])
            outputs.append(logits)
        return torch.stack(outputs, dim=1)

    def greedy(self, encoded: Tensor, max_length: int) -> Decoded:
        """
        Decode by argmax until END or max_length characters.

        Confidence is the mean of the per-step maximum probabilities,
        including the END step when END is emitted.
        """
        batch = encoded.shape[0]
        projected = self.i2h(encoded)
        state = self.initial_state(encoded)
        previous = torch.full((batch,), START, dtype=torch.long, device=encoded.device)
        indices = [[] for _ in range(batch)]
        step_probs = [[] for _ in range(batch)]
        attention = [[] for _ in range(batch)]
        distributions = [[] for _ in range(batch)]
        finished = [False] * batch
        for _ in range(max_length + 1):
            logits, state, alpha = self.step(encoded, projected, state, previous)
            probs = F.softmax(logits, dim=1)
            best_prob, best = probs.max(dim=1)
            for b in range(batch):
                if finished[b]:
                    continue
                symbol = int(best[b])
                if symbol != END and len(indices[b]) == max_length:
                    finished[b] = True
                    continue
                step_probs[b].append(float(best_prob[b]))
                attention[b].append(alpha[b])
                distributions[b].append(probs[b])
                if symbol == END:
                    finished[b] = True
                else:
                    indices[b].append(symbol)
            if all(finished):
                break
            previous = best
        return Decoded(
            indices=indices,
            confidences=[float(np.mean(p)) if p else 0.0 for p in step_probs],
            attention=[torch.stack(a) if a else encoded.new_zeros(0, encoded.shape[1]) for a in attention],
            probabilities=[torch.stack(d) if d else encoded.new_zeros(0, self.num_classes) for d in distributions],
        )


def _start_mask(logits: Tensor) -> Tensor:
    mask = torch.zeros_like(logits, dtype=torch.bool)
    mask[:, START] = True
    return mask


class TextRecognizer(nn.Module):
    """Localization, TPS rectification, residual features, BiLSTM and attention decoder."""

    def __init__(self, config: RecognizerConfig):
        super().__init__()
        self.config = config
        self.charset = Charset(config.charset)
        self.localization = LocalizationNetwork(config.num_fiducial)
        self.tps = TPSGrid(config.num_fiducial, config.image_size)
        self.features = ResNetFeatureExtractor(config.channels)
        self.encoder = BidirectionalEncoder(self.features.output_dim, config.hidden_size, config.hidden_size)
        self.decoder = AttentionDecoder(config.hidden_size, config.hidden_size, len(self.charset))

    def encode(self, x: Tensor) -> Tensor:
        """[B, 1, H, W] frames at the normalized size -> [B, T, hidden]."""
        fiducials = self.localization(x)
        rectified = tps_normalize(x, fiducials, self.config.image_size, self.tps)
        return sequence_model(extract_features(rectified, self.features), self.encoder)

    def forward(self, x: Tensor, inputs: Tensor) -> Tensor:
        return self.decoder(self.encode(x), inputs)


def prepare_crops(crops: Sequence[np.ndarray], config: RecognizerConfig) -> Tensor:
    """RGB arrays -> [B, 1, H, W] grayscale frames at the normalized size."""
    return torch.cat([to_grayscale(resize_tensor(to_tensor(c), config.image_size)) for c in crops])


def attend_decode(encoded: Tensor, model: TextRecognizer, targets: Sequence[str] = None):
    """
    Decode contextual features.

    Args:
        encoded: [B, T, hidden] output of the sequence model
        model: Recognizer holding the decoder and charset
        targets: Transcripts for teacher forcing; None decodes greedily

    Returns:
        Teacher-forced: [B, L, classes] logits.
        Greedy: list of (text, confidence, [steps, T] attention maps)

    Raises:
        CharsetError: If a target holds characters outside the charset
    """
    if targets is not None:
        inputs, _ = encode_targets(targets, model.charset, encoded.device)
        return model.decoder(encoded, inputs)
    decoded = model.decoder.greedy(encoded, model.config.max_length)
    return [(model.charset.decode(ix), conf, att)
            for ix, conf, att in zip(decoded.indices, decoded.confidences, decoded.attention)]


def encode_targets(transcripts: Sequence[str], charset: Charset, device=None):
    """
    Build teacher-forcing inputs and targets.

    Returns:
        (inputs [B, L+1] starting with START, targets [B, L+1] ending with END, -100 padded)
    """
    encoded = [charset.encode(t) for t in transcripts]
    length = max(len(e) for e in encoded) + 1
    inputs = torch.full((len(encoded), length), END, dtype=torch.long)
    targets = torch.full((len(encoded), length), -100, dtype=torch.long)
    for i, symbols in enumerate(encoded):
        inputs[i, 0] = START
        inputs[i, 1:len(symbols) + 1] = torch.tensor(symbols, dtype=torch.long)
        targets[i, :len(symbols)] = torch.tensor(symbols, dtype=torch.long)
        targets[i, len(symbols)] = END
    return inputs.to(device), targets.to(device)


def recognition_loss(logits: Tensor, targets: Tensor) -> Tensor:
    # START logits are -inf; ignore_index keeps padded steps out of the mean.
    logits = logits.masked_fill(torch.isinf(logits), -1e4)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


@torch.no_grad()
def recognize_batch(crops: Sequence[np.ndarray], model: TextRecognizer) -> List[Tuple[str, float]]:
    model.eval()
    encoded = model.encode(prepare_crops(crops, model.config))
    return [(text, conf) for text, conf, _ in attend_decode(encoded, model)]


def recognize(crop: np.ndarray, model: TextRecognizer) -> Tuple[str, float]:
    """Read one crop; returns (text, confidence in (0, 1])."""
    return recognize_batch([crop], model)[0]


def validate_transcripts(transcripts: Sequence[str], config: RecognizerConfig):
    """
    Raises:
        CharsetError: Listing every out-of-charset character and over-long transcript
    """
    charset = Charset(config.charset)
    offenders = sorted({ch for t in transcripts for ch in charset.offenders(t)})
    too_long = [t for t in transcripts if len(t) > config.max_length]
    if offenders:
        raise CharsetError(f"transcripts use characters outside the charset: {''.join(offenders)!r}", offenders)
    if too_long:
        raise CharsetError(f"{len(too_long)} transcripts exceed max_length {config.max_length}", too_long)


def train_recognizer(crops: Sequence[np.ndarray], transcripts: Sequence[str], config: RecognizerConfig,
                     schedule: TrainSchedule):
    """
    Train the recognizer with teacher-forced cross-entropy.

    Returns:
        (model in eval mode, TrainingCurve with a 'char_accuracy' component)

    Raises:
        CharsetError: If a transcript cannot be encoded
    """
    validate_transcripts(transcripts, config)
    generator = seed_everything(schedule.seed)
    model = TextRecognizer(config)
    model.train()
    optimizer = make_optimizer(model.parameters(), schedule)
    inputs = prepare_crops(crops, config)
    transcripts = list(transcripts)

    curve = TrainingCurve('recognizer')
    for step, indices, _ in progress(batch_order(len(transcripts), schedule, generator), 'recognizer'):
        batch_text = [transcripts[i] for i in indices.tolist()]
        decoder_inputs, targets = encode_targets(batch_text, model.charset)
        logits = model(inputs[indices], decoder_inputs)
        loss = recognition_loss(logits, targets)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        valid = targets != -100
        correct = (logits.argmax(dim=-1) == targets) & valid
        curve.losses.append(float(loss))
        curve.add('char_accuracy', float(correct.sum()) / max(1, int(valid.sum())))
        log_step('recognizer', step, float(loss))

    model.eval()
    return model, curve


def recognizer_feature_net(model: TextRecognizer):
    """Perceptual feature function for the upscaler: pre-activation residual features of RGB images."""
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    model.eval()

    def features(x: Tensor) -> Tensor:
        return model.features(to_grayscale(x), pre_activation=True)

    return features


class AttentionRecognizer(RecognitionStage):
    """Pipeline adapter around a trained TextRecognizer."""

    def __init__(self, model: TextRecognizer):
        self.model = model

    def recognize(self, crop, context):
        return recognize(self.check_pixels(crop), self.model)
