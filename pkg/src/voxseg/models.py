"""Segmentation networks: 2D/3D U-Net plus FiLM, attention, and HeMIS variants.

All architectures share the same convolutional block structure, so a plain
U-Net's weights are a subset of every variant's state dict. Outputs pass
through a per-channel sigmoid (one-vs-all classes, soft-label friendly).
Models serialize to a directory holding the spec, the parameter blob, and
the metadata encoder, guarded by a format tag.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, VoxsegError
from .volume import Volume, bounding_box
from .errors import EmptyMaskError

logger = logging.getLogger(__name__)

FORMAT_TAG = "voxseg-model-v1"
_ARCHITECTURES = ("unet2d", "unet3d", "film_unet", "attention_unet", "hemis_unet")


@dataclass
class ModelSpec:
    architecture: str
    depth: int = 3
    base_filters: int = 16
    in_channels: int = 1
    out_classes: int = 1
    dropout_rate: float = 0.3
    film_layers: list = field(default_factory=list)
    film_metadata_key: str | None = None
    n_modalities: int = 1

    def __post_init__(self):
        if self.architecture not in _ARCHITECTURES:
            raise VoxsegError(
                f"unknown architecture {self.architecture!r}; choose from {_ARCHITECTURES}"
            )
        if self.depth < 1:
            raise VoxsegError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1 or self.in_channels < 1 or self.out_classes < 1:
            raise VoxsegError("base_filters, in_channels, out_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise VoxsegError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.film_layers and self.architecture != "film_unet":
            raise VoxsegError("film_layers only applies to film_unet")
        if self.architecture == "film_unet" and not self.film_layers:
            self.film_layers = [True] * self.depth
        if self.architecture == "film_unet" and len(self.film_layers) != self.depth:
            raise VoxsegError(
                f"film_layers must have one entry per decoder level ({self.depth})"
            )
        if self.architecture == "hemis_unet" and self.n_modalities < 1:
            raise VoxsegError("hemis_unet needs n_modalities >= 1")


@dataclass
class FilmParams:
    """Per modulated layer: a (gamma, beta) channel-vector pair."""

    gammas: list
    betas: list


def film_modulate(features: torch.Tensor, gamma: torch.Tensor,
                  beta: torch.Tensor) -> torch.Tensor:
    """out[:, c] = gamma[c] * features[:, c] + beta[c], broadcast spatially."""
    channels = features.shape[1]
    if gamma.shape[-1] != channels or beta.shape[-1] != channels:
        raise VoxsegError(
            f"FiLM vectors sized {gamma.shape[-1]}/{beta.shape[-1]} for {channels} channels"
        )
    shape = (-1, channels) + (1,) * (features.ndim - 2)
    return gamma.reshape(shape) * features + beta.reshape(shape)


class MetadataEncoder:
    """Map one metadata value to a fixed real vector.

    Categorical values one-hot over a fitted vocabulary plus a reserved
    "unknown" slot; numeric values z-score with fitted stats.
    """

    def __init__(self):
        self.kind = None
        self.vocabulary = []
        self.mean = 0.0
        self.std = 1.0

    def fit(self, values) -> "MetadataEncoder":
        values = list(values)
        if not values:
            raise VoxsegError("cannot fit a metadata encoder on zero values")
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            self.kind = "scalar"
            arr = np.asarray(values, dtype=float)
            self.mean = float(arr.mean())
            self.std = float(arr.std()) or 1.0
        else:
            self.kind = "categorical"
            self.vocabulary = sorted({str(v) for v in values})
        return self

    @property
    def dim(self) -> int:
        if self.kind == "categorical":
            return len(self.vocabulary) + 1  # + unknown slot
        return 1

    def encode(self, value) -> np.ndarray:
        if self.kind is None:
            raise VoxsegError("metadata encoder is not fitted")
        if self.kind == "scalar":
            try:
                return np.asarray([(float(value) - self.mean) / self.std], dtype=np.float32)
            except (TypeError, ValueError):
                return np.zeros(1, dtype=np.float32)
        vec = np.zeros(self.dim, dtype=np.float32)
        try:
            vec[self.vocabulary.index(str(value))] = 1.0
        except ValueError:
            vec[-1] = 1.0  # unseen category
        return vec

    def to_dict(self) -> dict:
        return {"kind": self.kind, "vocabulary": self.vocabulary,
                "mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataEncoder":
        enc = cls()
        enc.kind = d["kind"]
        enc.vocabulary = list(d["vocabulary"])
        enc.mean = float(d["mean"])
        enc.std = float(d["std"])
        return enc


class FilmGenerator(nn.Module):
    """Two-layer perceptron mapping a metadata vector to per-layer (gamma, beta).

    The output layer is zero-initialized so a fresh generator emits exactly
    gamma = 1, beta = 0 (modulation starts as identity).
    """

    def __init__(self, metadata_dim: int, channel_counts, hidden: int = 64):
        super().__init__()
        self.channel_counts = [int(c) for c in channel_counts]
        total = 2 * sum(self.channel_counts)
        self.net = nn.Sequential(
            nn.Linear(metadata_dim, hidden), nn.ReLU(), nn.Linear(hidden, total)
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, encoding: torch.Tensor) -> FilmParams:
        if encoding.ndim == 1:
            encoding = encoding.unsqueeze(0)
        raw = self.net(encoding)
        gammas, betas = [], []
        offset = 0
        for count in self.channel_counts:
            gammas.append(1.0 + raw[:, offset:offset + count])
            betas.append(raw[:, offset + count:offset + 2 * count])
            offset += 2 * count
        return FilmParams(gammas=gammas, betas=betas)


def film_generate(generator: FilmGenerator, encoding: torch.Tensor) -> FilmParams:
    expected = generator.net[0].in_features
    if encoding.shape[-1] != expected:
        raise VoxsegError(
            f"metadata encoding length {encoding.shape[-1]} != generator input {expected}"
        )
    return generator(encoding)


def _conv(dims):
    return nn.Conv2d if dims == 2 else nn.Conv3d


def _norm(dims):
    return nn.BatchNorm2d if dims == 2 else nn.BatchNorm3d


class ConvBlock(nn.Module):
    """Two conv -> norm -> ReLU stages; optional FiLM after the second norm."""

    def __init__(self, in_ch: int, out_ch: int, dims: int):
        super().__init__()
        self.conv1 = _conv(dims)(in_ch, out_ch, kernel_size=3, padding=1)
        self.norm1 = _norm(dims)(out_ch)
        self.conv2 = _conv(dims)(out_ch, out_ch, kernel_size=3, padding=1)
        self.norm2 = _norm(dims)(out_ch)

    def forward(self, x, gamma=None, beta=None):
        x = F.relu(self.norm1(self.conv1(x)))
        x = self.norm2(self.conv2(x))
        if gamma is not None:
            x = film_modulate(x, gamma, beta)
        return F.relu(x)


class AttentionGate(nn.Module):
    """Additive attention over a skip connection.

    Both inputs project to an intermediate width at the gating resolution;
    their sum passes ReLU then a single-channel sigmoid, and the resulting
    weight map is upsampled and multiplied into the skip features.
    """

    def __init__(self, skip_ch: int, gating_ch: int, inter_ch: int, dims: int):
        super().__init__()
        self.project_skip = _conv(dims)(skip_ch, inter_ch, kernel_size=1)
        self.project_gate = _conv(dims)(gating_ch, inter_ch, kernel_size=1)
        self.psi = _conv(dims)(inter_ch, 1, kernel_size=1)

    def forward(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        target = gating.shape[2:]
        skip_small = F.interpolate(skip, size=target, mode="nearest") \
            if skip.shape[2:] != target else skip
        mixed = F.relu(self.project_skip(skip_small) + self.project_gate(gating))
        weights = torch.sigmoid(self.psi(mixed))
        weights = F.interpolate(weights, size=skip.shape[2:], mode="nearest")
        return skip * weights, weights


def hemis_fuse(per_modality_features, availability_mask) -> torch.Tensor:
    """Concatenate masked mean and population variance across modalities.

    ``per_modality_features``: list of (B, C, ...) tensors, one per modality.
    ``availability_mask``: bool tensor (B, M) or per-modality list of bools.
    Variance uses the n divisor, so one modality gives exactly 0.
    """
    stack = torch.stack(per_modality_features, dim=1)  # (B, M, C, ...)
    batch, n_mod = stack.shape[0], stack.shape[1]
    mask = torch.as_tensor(availability_mask, dtype=stack.dtype, device=stack.device)
    if mask.ndim == 1:
        mask = mask.unsqueeze(0).expand(batch, -1)
    if mask.shape != (batch, n_mod):
        raise VoxsegError(f"availability mask shape {tuple(mask.shape)} != {(batch, n_mod)}")
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise VoxsegError("every sample needs at least one available modality")
    mshape = (batch, n_mod) + (1,) * (stack.ndim - 2)
    m = mask.reshape(mshape)
    n = counts.reshape((batch,) + (1,) * (stack.ndim - 2))
    mean = (stack * m).sum(dim=1) / n
    var = (m * (stack - mean.unsqueeze(1)) ** 2).sum(dim=1) / n
    return torch.cat([mean, var], dim=1)


class UNet(nn.Module):
    """U-Net backbone shared by all architecture variants.

    Channel width doubles per level; dropout sits at the bottleneck; the
    head is a 1x1 conv + sigmoid. FiLM modulates selected decoder blocks
    (after the second normalization), attention gates weight the skips, and
    the HeMIS variant runs one encoder per modality with moment fusion at
    every skip level and the bottleneck.
    """

    def __init__(self, spec: ModelSpec, metadata_dim: int | None = None):
        super().__init__()
        self.spec = spec
        self.dims = 2 if spec.architecture == "unet2d" else 3
        self.hemis = spec.architecture == "hemis_unet"
        depth, base = spec.depth, spec.base_filters
        feats = [base * 2**i for i in range(depth + 1)]
        fusion = 2 if self.hemis else 1

        def encoder_stack(in_ch):
            blocks = nn.ModuleList()
            prev = in_ch
            for f in feats[:-1]:
                blocks.append(ConvBlock(prev, f, self.dims))
                prev = f
            blocks.append(ConvBlock(feats[-2], feats[-1], self.dims))  # bottleneck
            return blocks

        if self.hemis:
            self.encoders = nn.ModuleList(
                encoder_stack(1) for _ in range(spec.n_modalities)
            )
        else:
            self.encoders = nn.ModuleList([encoder_stack(spec.in_channels)])

        self.pool = (nn.MaxPool2d if self.dims == 2 else nn.MaxPool3d)(2)
        self.dropout = nn.Dropout(spec.dropout_rate)

        upconv = nn.ConvTranspose2d if self.dims == 2 else nn.ConvTranspose3d
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(depth)):
            in_ch = feats[i + 1] * (fusion if i == depth - 1 else 1)
            self.upconvs.append(upconv(in_ch, feats[i], kernel_size=2, stride=2))
            self.decoders.append(ConvBlock(feats[i] * (1 + fusion), feats[i], self.dims))

        self.head = _conv(self.dims)(base, spec.out_classes, kernel_size=1)

        if spec.architecture == "attention_unet":
            self.gates = nn.ModuleList(
                AttentionGate(feats[i], feats[i + 1], max(feats[i] // 2, 1), self.dims)
                for i in reversed(range(depth))
            )
        if spec.architecture == "film_unet":
            if metadata_dim is None:
                raise VoxsegError("film_unet needs metadata_dim at build time")
            self.metadata_dim = metadata_dim
            counts = [feats[i] for i in reversed(range(depth))
                      if spec.film_layers[depth - 1 - i]]
            self.film_generator = FilmGenerator(metadata_dim, counts)

    def _check_divisible(self, x):
        div = 2**self.spec.depth
        if any(s % div for s in x.shape[2:]):
            raise VoxsegError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by 2^depth = {div}"
            )

    def _encode(self, x, availability):
        """Collect per-level skips and the bottleneck, fusing when HeMIS."""
        depth = self.spec.depth
        all_skips, bottoms = [], []
        for m, blocks in enumerate(self.encoders):
            inp = x[:, m:m + 1] if self.hemis else x
            skips = []
            for i in range(depth):
                inp = blocks[i](inp)
                skips.append(inp)
                inp = self.pool(inp)
            bottoms.append(blocks[depth](inp))
            all_skips.append(skips)
        if not self.hemis:
            return all_skips[0], self.dropout(bottoms[0])
        if availability is None:
            availability = torch.ones(
                (x.shape[0], self.spec.n_modalities), dtype=torch.bool, device=x.device
            )
        fused_skips = [
            hemis_fuse([s[i] for s in all_skips], availability) for i in range(depth)
        ]
        fused_bottom = hemis_fuse(bottoms, availability)
        return fused_skips, self.dropout(fused_bottom)

    def forward(self, x, metadata=None, availability=None):
        self._check_divisible(x)
        if self.hemis and x.shape[1] != self.spec.n_modalities:
            raise VoxsegError(
                f"hemis input has {x.shape[1]} channels, expected {self.spec.n_modalities}"
            )
        skips, current = self._encode(x, availability)

        film = None
        if metadata is not None and hasattr(self, "film_generator"):
            film = film_generate(self.film_generator, metadata)
        film_cursor = 0

        depth = self.spec.depth
        for pos, (up, block) in enumerate(zip(self.upconvs, self.decoders)):
            level = depth - 1 - pos
            skip = skips[level]
            gating = current
            current = up(current)
            if self.spec.architecture == "attention_unet":
                skip, _ = self.gates[pos](skip, gating)
            current = torch.cat([current, skip], dim=1)
            gamma = beta = None
            if film is not None and self.spec.film_layers[pos]:
                gamma = film.gammas[film_cursor]
                beta = film.betas[film_cursor]
                film_cursor += 1
            current = block(current, gamma, beta)
        return torch.sigmoid(self.head(current))


def build_model(spec: ModelSpec, metadata_dim: int | None = None) -> UNet:
    """Construct a model and verify the shape contract with a probe pass."""
    model = UNet(spec, metadata_dim=metadata_dim)
    side = 2**spec.depth * 2
    shape = (1, spec.n_modalities if spec.architecture == "hemis_unet"
             else spec.in_channels) + (side,) * model.dims
    probe = torch.zeros(shape)
    meta = torch.zeros((1, metadata_dim)) if spec.architecture == "film_unet" else None
    model.eval()
    with torch.no_grad():
        out = model(probe, metadata=meta)
    if out.shape[2:] != probe.shape[2:] or out.shape[1] != spec.out_classes:
        raise VoxsegError(
            f"probe produced {tuple(out.shape)} from {tuple(probe.shape)}"
        )
    return model


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(model_dir, model: UNet, encoder: MetadataEncoder | None = None) -> Path:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT_TAG, "spec": asdict(model.spec)}
    if hasattr(model, "metadata_dim"):
        payload["metadata_dim"] = model.metadata_dim
    (model_dir / "spec.json").write_text(json.dumps(payload, indent=2))
    torch.save(model.state_dict(), model_dir / "weights.pt")
    if encoder is not None:
        (model_dir / "metadata_encoder.json").write_text(json.dumps(encoder.to_dict()))
    return model_dir


def load_model(model_dir):
    """Rebuild (model, encoder) from a serialized directory."""
    model_dir = Path(model_dir)
    spec_file = model_dir / "spec.json"
    if not spec_file.exists():
        raise CheckpointError(f"{model_dir} has no spec.json")
    payload = json.loads(spec_file.read_text())
    if payload.get("format") != FORMAT_TAG:
        raise CheckpointError(
            f"unknown model format {payload.get('format')!r}, expected {FORMAT_TAG}"
        )
    spec = ModelSpec(**payload["spec"])
    encoder = None
    enc_file = model_dir / "metadata_encoder.json"
    if enc_file.exists():
        encoder = MetadataEncoder.from_dict(json.loads(enc_file.read_text()))
    model = UNet(spec, metadata_dim=payload.get("metadata_dim"))
    state = torch.load(model_dir / "weights.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, encoder


# ---------------------------------------------------------------------------
# cascaded inference
# ---------------------------------------------------------------------------


def _pad_to_divisible(data: np.ndarray, depth: int):
    div = 2**depth
    pads = [(0, (-s) % div) for s in data.shape[1:]]
    padded = np.pad(data, [(0, 0)] + pads)
    return padded, data.shape[1:]


def _forward_volume(model: UNet, data: np.ndarray) -> np.ndarray:
    padded, orig = _pad_to_divisible(data, model.spec.depth)
    x = torch.from_numpy(padded).unsqueeze(0)
    model.eval()
    with torch.no_grad():
        out = model(x)[0].numpy()
    return out[(slice(None),) + tuple(slice(0, s) for s in orig)]


def cascade_predict(image: Volume, detector: UNet, segmenter: UNet,
                    margin_voxels: int = 8) -> Volume:
    """Two-stage inference: detect, crop with margin, segment, pad back.

    An empty detection falls back to whole-image segmentation with a
    warning. Returns per-class probabilities in the input geometry.
    """
    if detector.dims != 3 or segmenter.dims != 3:
        raise VoxsegError("cascade_predict requires 3D detector and segmenter")
    coarse = _forward_volume(detector, image.data)
    coarse_mask = (coarse >= 0.5).astype(np.float32)
    try:
        lo, hi = bounding_box(image.with_data(coarse_mask), margin_voxels)
    except EmptyMaskError:
        logger.warning("detector found nothing; segmenting the whole image")
        probs = _forward_volume(segmenter, image.data)
        return image.with_data(probs)

    window = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    crop = image.data[(slice(None),) + window]
    probs_crop = _forward_volume(segmenter, crop)
    out = np.zeros((probs_crop.shape[0],) + tuple(image.shape), dtype=np.float32)
    out[(slice(None),) + window] = probs_crop
    return image.with_data(out)
