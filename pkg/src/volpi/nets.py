"""Small 3D encoder-decoder segmentation nets and the volume regressor.

One U-shaped trunk serves three variants: the single-head baseline, the
dropout variant (same topology, channelwise dropout in every encoder and
decoder block), and the triple-head variant whose final convolutional
block is duplicated into identical lower/mean/upper heads. A separate
strided-convolution regressor predicts three volume quantiles per class.

Downsampling is stride-2 convolution, upsampling nearest-neighbor plus
convolution; initialization is fan-in-scaled uniform from an explicit
seeded generator, so builds are reproducible parameter-for-parameter.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from volpi import losses
from volpi.errors import FormatError, MissingArtifactError, NumericalError, ShapeError
from volpi.seeding import derive_seed

HEAD_NAMES_TRIAD = ("lower", "mean", "upper")
MC_CHUNK = 8  # passes per batched dropout forward; fixed so seeding is stable


@dataclass(frozen=True)
class NetSpec:
    in_channels: int
    n_classes: int
    base_filters: int = 8
    depth: int = 3
    n_heads: int = 1
    dropout_rate: float = 0.0
    head_kind: str = "segmentation"
    regression_outputs: int = 0

    def __post_init__(self):
        if self.head_kind not in ("segmentation", "regression"):
            raise ValueError(f"unknown head_kind '{self.head_kind}'")
        if self.n_heads not in (1, 3):
            raise ValueError("n_heads must be 1 or 3")
        if self.n_heads == 3 and self.head_kind != "segmentation":
            raise ValueError("n_heads=3 is only valid for segmentation heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.in_channels < 1 or self.n_classes < 2:
            raise ValueError("need in_channels >= 1 and n_classes >= 2")
        if self.base_filters < 1 or self.depth < 1:
            raise ValueError("base_filters and depth must be >= 1")
        if self.head_kind == "regression" and self.regression_outputs == 0:
            object.__setattr__(self, "regression_outputs", 3 * (self.n_classes - 1))

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "n_classes": self.n_classes,
            "base_filters": self.base_filters,
            "depth": self.depth,
            "n_heads": self.n_heads,
            "dropout_rate": self.dropout_rate,
            "head_kind": self.head_kind,
            "regression_outputs": self.regression_outputs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int
    loss_id: str  # "dice" | "triad" | "pinball-compound"
    seed: int
    learning_rate: float = 2e-4
    batch_size: int = 4
    gamma: float = 0.2  # triad loss asymmetry
    alpha: float = 0.1  # compound pinball miscoverage target

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_id not in ("dice", "triad", "pinball-compound"):
            raise ValueError(f"unknown loss_id '{self.loss_id}'")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "loss_id": self.loss_id,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "gamma": self.gamma,
            "alpha": self.alpha,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class SoftMaskSet:
    """Per-head voxelwise class distributions plus the raw logits."""

    probs: np.ndarray  # [n_heads, N, D, H, W] float32, softmax-normalized
    logits: np.ndarray  # same shape, pre-softmax
    head_names: tuple[str, ...]


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, dropout: float = 0.0):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm3d(cout, affine=True)
        self.drop = nn.Dropout3d(dropout) if dropout > 0 else None

    def forward(self, x):
        x = F.relu(self.norm(self.conv(x)))
        if self.drop is not None:
            x = self.drop(x)
        return x


class _Head(nn.Module):
    """One duplicated output block: conv block + 1x1x1 classifier."""

    def __init__(self, cin: int, n_classes: int):
        super().__init__()
        self.block = _ConvBlock(cin, cin)
        self.classifier = nn.Conv3d(cin, n_classes, kernel_size=1)

    def forward(self, x):
        return self.classifier(self.block(x))


class SegmentationNet(nn.Module):
    """U-shaped encoder-decoder with skip connections and 1..3 heads."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        if spec.head_kind != "segmentation":
            raise ValueError("SegmentationNet requires a segmentation NetSpec")
        self.spec = spec
        f, depth, p = spec.base_filters, spec.depth, spec.dropout_rate
        chans = [f * (2**i) for i in range(depth)]
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.enc_blocks.append(_ConvBlock(spec.in_channels, chans[0], p))
        for i in range(depth - 1):
            self.downs.append(nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            self.enc_blocks.append(_ConvBlock(chans[i + 1], chans[i + 1], p))
        self.up_convs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in range(depth - 2, -1, -1):
            self.up_convs.append(nn.Conv3d(chans[i + 1], chans[i], 3, padding=1))
            self.dec_blocks.append(_ConvBlock(2 * chans[i], chans[i], p))
        self.heads = nn.ModuleList(_Head(chans[0], spec.n_classes) for _ in range(spec.n_heads))

    def check_grid(self, spatial) -> None:
        step = 2 ** (self.spec.depth - 1)
        for axis in spatial:
            if axis < 2**self.spec.depth or axis % step != 0:
                raise ShapeError(
                    f"grid {tuple(spatial)} incompatible with depth {self.spec.depth}: "
                    f"axes must be >= {2 ** self.spec.depth} and divisible by {step}"
                )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, C, D, H, W] -> logits [B, n_heads, N, D, H, W]
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(
                f"expected {self.spec.in_channels} input channels, got {x.shape[1]}"
            )
        self.check_grid(x.shape[2:])
        skips = []
        h = x
        for i, block in enumerate(self.enc_blocks):
            h = block(h if i == 0 else self.downs[i - 1](h))
            skips.append(h)
        h = skips.pop()
        for up, block in zip(self.up_convs, self.dec_blocks):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skips.pop()], dim=1))
        return torch.stack([head(h) for head in self.heads], dim=1)


class VolumeRegressor(nn.Module):
    """Strided-conv encoder over image+segmentation, projecting to
    3*(N-1) per-class quantile scores (in mL)."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        if spec.head_kind != "regression":
            raise ValueError("VolumeRegressor requires a regression NetSpec")
        self.spec = spec
        f = spec.base_filters
        cin = spec.in_channels + spec.n_classes  # image channels + one-hot mask
        chans = [cin] + [f * (2**i) for i in range(1, spec.depth + 1)]
        layers = []
        for i in range(len(chans) - 1):
            layers.append(nn.Conv3d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            layers.append(nn.InstanceNorm3d(chans[i + 1], affine=True))
            layers.append(nn.ReLU())
        self.encoder = nn.Sequential(*layers)
        self.project = nn.Linear(chans[-1], spec.regression_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, C+N, D, H, W] -> [B, 3*(N-1)]
        expected = self.spec.in_channels + self.spec.n_classes
        if x.shape[1] != expected:
            raise ShapeError(f"expected {expected} channels (image + one-hot), got {x.shape[1]}")
        h = self.encoder(x)
        h = h.mean(dim=(2, 3, 4))  # global average pool
        return self.project(h)


def _init_parameters(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(derive_seed("init", seed))
    for module in net.modules():
        if isinstance(module, (nn.Conv3d, nn.Linear)):
            fan_in = module.weight.shape[1] * int(np.prod(module.weight.shape[2:]))
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.InstanceNorm3d) and module.affine:
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def build_net(spec: NetSpec, seed: int) -> SegmentationNet:
    """Construct and deterministically initialize a segmentation net.

    With three heads, all heads start from identical parameters; any later
    divergence comes from the loss alone.
    """
    net = SegmentationNet(spec)
    _init_parameters(net, seed)
    if spec.n_heads > 1:
        state = net.heads[0].state_dict()
        for head in list(net.heads)[1:]:
            head.load_state_dict({k: v.clone() for k, v in state.items()})
    net.eval()
    return net


def build_regressor(spec: NetSpec, seed: int) -> VolumeRegressor:
    net = VolumeRegressor(spec)
    _init_parameters(net, seed)
    net.eval()
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def head_param_count(net: SegmentationNet) -> int:
    return sum(p.numel() for p in net.heads.parameters())


def _as_input_tensor(net: nn.Module, intensities) -> torch.Tensor:
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(np.asarray(intensities), dtype=dtype)
    if x.dim() != 4:
        raise ShapeError(f"expected [C, D, H, W] input, got shape {tuple(x.shape)}")
    return x.unsqueeze(0)


def _mask_set_from_logits(logits: torch.Tensor, n_heads: int) -> SoftMaskSet:
    probs = torch.softmax(logits, dim=1)
    names = HEAD_NAMES_TRIAD if n_heads == 3 else ("mean",)
    return SoftMaskSet(
        probs=probs.numpy().astype(np.float32),
        logits=logits.numpy().astype(np.float32),
        head_names=names,
    )


def forward(net: SegmentationNet, intensities) -> SoftMaskSet:
    """Deterministic single forward pass (dropout inactive)."""
    x = _as_input_tensor(net, intensities)
    net.eval()
    with torch.inference_mode():
        logits = net(x)[0]  # [n_heads, N, D, H, W]
    return _mask_set_from_logits(logits.clone(), net.spec.n_heads)


def forward_batch(net: SegmentationNet, stack: np.ndarray) -> torch.Tensor:
    """Batched eval-mode logits for [B, C, D, H, W] input."""
    dtype = next(net.parameters()).dtype
    x = torch.as_tensor(stack, dtype=dtype)
    net.eval()
    with torch.inference_mode():
        logits = net(x)
    return logits.clone()


def forward_mc(net: SegmentationNet, intensities, T: int, seed: int) -> list[SoftMaskSet]:
    """T stochastic passes with dropout kept active, seeded reproducibly.

    Passes are executed in fixed-size batches; each batch draws its dropout
    masks from a stream derived from (seed, batch index), so results depend
    only on (T, seed).
    """
    if net.spec.dropout_rate <= 0:
        raise ValueError("forward_mc requires a net built with dropout_rate > 0")
    if T < 1:
        raise ValueError("T must be >= 1")
    x = _as_input_tensor(net, intensities)
    out: list[SoftMaskSet] = []
    net.train()  # activates dropout; InstanceNorm is stateless either way
    try:
        with torch.random.fork_rng(devices=[]):
            for start in range(0, T, MC_CHUNK):
                chunk = min(MC_CHUNK, T - start)
                torch.manual_seed(derive_seed("mc", seed, start))
                with torch.no_grad():
                    logits = net(x.expand(chunk, -1, -1, -1, -1))
                for b in range(chunk):
                    out.append(_mask_set_from_logits(logits[b], net.spec.n_heads))
    finally:
        net.eval()
    return out


def _one_hot(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    return F.one_hot(labels.long(), n_classes).permute(0, 4, 1, 2, 3).to(torch.float32)


def _batch_loss(net, xb, yb, cfg: TrainConfig) -> torch.Tensor:
    if cfg.loss_id == "pinball-compound":
        preds = net(xb)
        per_item = [
            losses.pinball_compound_loss(preds[b], yb[b], cfg.alpha) for b in range(len(preds))
        ]
        return torch.stack(per_item).mean()
    logits = net(xb)
    probs = torch.softmax(logits, dim=2)
    g = _one_hot(yb, net.spec.n_classes)
    per_item = []
    for b in range(len(logits)):
        if cfg.loss_id == "dice":
            per_item.append(losses.dice_loss(probs[b, 0], g[b]))
        else:
            per_item.append(
                losses.triad_loss(probs[b, 0], probs[b, 1], probs[b, 2], g[b], cfg.gamma)
            )
    return torch.stack(per_item).mean()


def train(net: nn.Module, dataset, cfg: TrainConfig):
    """Train in place with Adam; returns (net, per-epoch mean loss trace).

    ``dataset`` is a sequence of (input, target) pairs: (intensities,
    integer labels) for segmentation nets, (image+one-hot stack, true
    volumes) for the regressor. Data order per epoch derives from
    ``cfg.seed``; a non-finite loss aborts with epoch/batch diagnostics.
    """
    items = list(dataset)
    if not items:
        raise ValueError("training dataset is empty")
    is_regression = getattr(net.spec, "head_kind", "segmentation") == "regression"
    if is_regression and cfg.loss_id != "pinball-compound":
        raise ValueError(f"loss '{cfg.loss_id}' incompatible with a regression net")
    if not is_regression:
        needed = 3 if cfg.loss_id == "triad" else 1
        if cfg.loss_id == "pinball-compound":
            raise ValueError("pinball-compound loss requires a regression net")
        if net.spec.n_heads != needed:
            raise ValueError(f"loss '{cfg.loss_id}' requires n_heads={needed}")

    dtype = next(net.parameters()).dtype
    xs = [torch.as_tensor(np.asarray(x), dtype=dtype) for x, _ in items]
    if is_regression:
        ys = [torch.as_tensor(np.asarray(y), dtype=dtype) for _, y in items]
    else:
        ys = [torch.as_tensor(np.asarray(y).astype(np.int64)) for _, y in items]

    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    order_rng = np.random.default_rng(derive_seed("train-order", cfg.seed))
    trace: list[float] = []
    net.train()
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed("train-dropout", cfg.seed))
            for epoch in range(cfg.epochs):
                perm = order_rng.permutation(len(items))
                epoch_losses = []
                for bi, start in enumerate(range(0, len(items), cfg.batch_size)):
                    idx = perm[start : start + cfg.batch_size]
                    xb = torch.stack([xs[i] for i in idx])
                    yb = torch.stack([ys[i] for i in idx])
                    optimizer.zero_grad(set_to_none=True)
                    loss = _batch_loss(net, xb, yb, cfg)
                    if not torch.isfinite(loss):
                        raise NumericalError(
                            f"non-finite loss {loss.item()} at epoch {epoch}, batch {bi}"
                        )
                    loss.backward()
                    optimizer.step()
                    epoch_losses.append(float(loss.detach()))
                trace.append(float(np.mean(epoch_losses)))
    finally:
        net.eval()
    return net, trace


def regress(net: VolumeRegressor, intensities, one_hot_segmentation) -> np.ndarray:
    """Predict 3*(N-1) quantile scores for one case (deterministic)."""
    seg = np.asarray(one_hot_segmentation)
    img = np.asarray(intensities)
    if seg.shape[0] != net.spec.n_classes or seg.shape[1:] != img.shape[1:]:
        raise ShapeError(
            f"one-hot segmentation shape {seg.shape} incompatible with "
            f"image {img.shape} and {net.spec.n_classes} classes"
        )
    stack = np.concatenate([img, seg], axis=0)
    x = _as_input_tensor(net, stack)
    net.eval()
    with torch.inference_mode():
        out = net(x)[0]
    return out.numpy().astype(np.float64)


# --- checkpoint serialization -------------------------------------------------

MODEL_BIN = "model.bin"
MODEL_JSON = "model.json"


def save_checkpoint(ckpt_dir: str, net: nn.Module, train_cfg: TrainConfig | None,
                    seed: int, loss_trace) -> None:
    """Write model.bin (raw little-endian float32 params, name-sorted) and
    model.json (spec, config, trace, content hash)."""
    os.makedirs(ckpt_dir, exist_ok=True)
    state = net.state_dict()
    names = sorted(state.keys())
    blob = b"".join(
        np.ascontiguousarray(state[n].detach().numpy(), dtype="<f4").tobytes() for n in names
    )
    sha = hashlib.sha256(blob).hexdigest()
    meta = {
        "net_spec": net.spec.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg is not None else None,
        "seed": seed,
        "loss_trace": list(loss_trace),
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
        "bin_sha256": sha,
    }
    with open(os.path.join(ckpt_dir, MODEL_BIN), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(ckpt_dir, MODEL_JSON), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(ckpt_dir: str):
    """Rebuild the net from a checkpoint; returns (net, meta dict).

    Forward outputs after a round trip are bit-identical to the saved
    net's, because parameters are stored as raw float32.
    """
    json_path = os.path.join(ckpt_dir, MODEL_JSON)
    bin_path = os.path.join(ckpt_dir, MODEL_BIN)
    if not os.path.exists(json_path) or not os.path.exists(bin_path):
        raise MissingArtifactError(f"no checkpoint under {ckpt_dir}")
    with open(json_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(bin_path, "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != meta.get("bin_sha256"):
        raise FormatError(f"model.bin content hash mismatch under {ckpt_dir}")
    spec = NetSpec.from_dict(meta["net_spec"])
    if spec.head_kind == "regression":
        net = VolumeRegressor(spec)
    else:
        net = SegmentationNet(spec)
    state = net.state_dict()
    offset = 0
    tensors = {}
    for entry in meta["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += count * 4
        if name not in state:
            raise FormatError(f"checkpoint parameter '{name}' unknown to the architecture")
        tensors[name] = torch.as_tensor(arr.copy())
    if offset != len(blob):
        raise FormatError(
            f"model.bin holds {len(blob)} bytes but manifest accounts for {offset}"
        )
    net.load_state_dict(tensors)
    net.eval()
    return net, meta
