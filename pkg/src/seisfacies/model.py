"""Dual-head encoder-decoder for seismic slices.

One backbone feature map feeds two spatially aligned heads: a segmentation
head producing per-class logits and a representation head producing a
D-dimensional embedding per pixel. The reference backbone is a compact
U-shaped network (one downsampling stage per encoder channel entry, skip
connections, bilinear upsampling); any module with the same forward contract
can replace it.

Norm layers are GroupNorm and activations SiLU, so outputs are independent
of batch composition and smooth enough for finite-difference checks.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError
from .volume import SliceSet

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    classes: int
    rep_dim: int = 128
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    normalize_input: bool = False

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.rep_dim < 2:
            raise ConfigError(f"rep_dim must be >= 2, got {self.rep_dim}")
        if len(self.encoder_channels) < 1 or any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"bad encoder_channels {self.encoder_channels}")
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.encoder_channels)


@dataclass
class DualHeadOutput:
    """Batched head outputs, channels-first torch layout."""

    seg_logits: torch.Tensor  # (B, classes, H, W)
    rep_map: torch.Tensor     # (B, D, H, W)

    def seg_probs_hwc(self) -> np.ndarray:
        """Detached float64 softmax map, (B, H, W, classes)."""
        logits = self.seg_logits.detach().to(torch.float64)
        return torch.softmax(logits, dim=1).permute(0, 2, 3, 1).numpy()

    def seg_logits_hwc(self) -> np.ndarray:
        return self.seg_logits.detach().permute(0, 2, 3, 1).numpy()

    def rep_hwd(self) -> torch.Tensor:
        """Representation map as (B, H, W, D), gradient preserved."""
        return self.rep_map.permute(0, 2, 3, 1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class _ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
            _norm(c_out),
            nn.SiLU(),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.SiLU(),
        )


class DualHeadNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        chans = spec.encoder_channels
        self.stem = _ConvBlock(1, chans[0])
        self.down = nn.ModuleList(
            _ConvBlock(chans[max(i - 1, 0)], chans[i], stride=2)
            for i in range(len(chans))
        )
        self.up = nn.ModuleList()
        for i in reversed(range(len(chans))):
            skip = chans[i - 1] if i > 0 else chans[0]
            self.up.append(_ConvBlock(chans[i] + skip, skip))
        self.seg_head = nn.Sequential(
            nn.Conv2d(chans[0], chans[0], 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(chans[0], spec.classes, 1),
        )
        # nonlinear projection on top of the decoder feature
        self.rep_head = nn.Sequential(
            nn.Conv2d(chans[0], chans[0], 1),
            nn.SiLU(),
            nn.Conv2d(chans[0], spec.rep_dim, 1),
        )

    def _pad(self, x: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        factor = self.spec.downsample_factor
        h, w = x.shape[-2:]
        ph = (-h) % factor
        pw = (-w) % factor
        if ph or pw:
            pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
            # reflect needs pad < dim; fall back to replicate on tiny inputs
            mode = "reflect" if max(pad[1], pad[3]) < min(h, w) else "replicate"
            x = F.pad(x, pad, mode=mode)
        return x, (h, w)

    def forward(self, x: torch.Tensor) -> DualHeadOutput:
        if x.dim() != 4 or x.shape[1] != 1:
            raise NumericError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        if self.spec.normalize_input:
            mean = x.mean(dim=(2, 3), keepdim=True)
            std = x.std(dim=(2, 3), keepdim=True, unbiased=False)
            x = (x - mean) / torch.where(std > 0, std, torch.ones_like(std))
        x, (h, w) = self._pad(x)
        feats = [self.stem(x)]
        for block in self.down:
            feats.append(block(feats[-1]))
        y = feats[-1]
        for i, block in enumerate(self.up):
            skip = feats[len(self.down) - 1 - i]
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = block(torch.cat([y, skip], dim=1))
        y = y[..., :h, :w]
        out = DualHeadOutput(self.seg_head(y), self.rep_head(y))
        if not bool(torch.isfinite(out.seg_logits).all() & torch.isfinite(out.rep_map).all()):
            raise NumericError(
                f"non-finite activations in {self._locate_nonfinite(x)}"
            )
        return out

    @torch.no_grad()
    def _locate_nonfinite(self, x: torch.Tensor) -> str:
        """Re-run with hooks to name the first layer emitting non-finite values."""
        bad: list[str] = []

        def probe(name):
            def hook(_mod, _inp, out):
                if isinstance(out, torch.Tensor) and not bad:
                    if not bool(torch.isfinite(out).all()):
                        bad.append(name)
            return hook

        handles = [m.register_forward_hook(probe(n)) for n, m in self.named_modules() if n]
        try:
            feats = [self.stem(x)]
            for block in self.down:
                feats.append(block(feats[-1]))
            y = feats[-1]
            for i, block in enumerate(self.up):
                skip = feats[len(self.down) - 1 - i]
                y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
                y = block(torch.cat([y, skip], dim=1))
            self.seg_head(y)
            self.rep_head(y)
        finally:
            for h in handles:
                h.remove()
        return bad[0] if bad else "model output"


def build_model(spec: ModelSpec, seed: int = 0) -> DualHeadNet:
    """Construct a dual-head network with seed-deterministic initialization."""
    torch.manual_seed(seed)
    return DualHeadNet(spec)


def _as_batch_tensor(batch, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(batch, SliceSet):
        batch = batch.data
    if isinstance(batch, torch.Tensor):
        x = batch.to(dtype)
    else:
        x = torch.as_tensor(np.asarray(batch), dtype=dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    return x


def forward(model: DualHeadNet, batch, grad: bool = True) -> DualHeadOutput:
    """Run a batch of (B, H, W) slices through the model.

    With ``grad=False`` no autograd state is recorded (pseudo-label pass).
    """
    dtype = next(model.parameters()).dtype
    x = _as_batch_tensor(batch, dtype)
    if grad:
        return model(x)
    with torch.no_grad():
        return model(x)


def save_checkpoint(path, model: DualHeadNet, epoch: int, extra: dict | None = None):
    """Atomically write parameters + spec + epoch counter."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": asdict(model.spec),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "extra": extra or {},
    }
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[DualHeadNet, int, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    spec_dict = dict(payload["model_spec"])
    spec_dict["encoder_channels"] = tuple(spec_dict["encoder_channels"])
    spec = ModelSpec(**spec_dict)
    model = DualHeadNet(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, int(payload["epoch"]), payload.get("extra", {})
