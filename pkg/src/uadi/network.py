"""Dual-head encoder-decoder with task interaction at every decoder level.

Layout (``H`` divisible by 32)::

    image (B,H,W,1)
      -> 5 encoder stages at H/2 .. H/32, each optionally refined by multi-scale fusion
      -> 4 decoder levels D_1 (H/16) .. D_4 (H/2): transposed conv, gated skip, two conv blocks,
         then task interaction + uncertainty weighting with a per-level classification stream
      -> seg head: 1x1 conv on D_4, bilinear x2 to H
      -> clf head: [GAP(deepest), f^1..f^4] -> dense -> relu -> dropout -> dense(num_classes)
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .core import ops
from .core.nn import Conv2d, ConvBNReLU, ConvTranspose2d, Dense, Dropout, Module
from .core.tensor import Tensor, as_tensor, dumps, loads
from .modules import AttentionGate, MultiScaleFusion, TaskInteraction, UncertaintyProxyAttention, upa_fuse

N_STAGES = 5
N_LEVELS = 4
STRIDE = 2 ** N_STAGES


@dataclass
class ModelConfig:
    input_size: int = 64
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    decoder_channels: tuple = (128, 64, 32, 16)
    clf_width: int = 256
    head_width: int = 256
    num_classes: int = 3
    use_hmsf: bool = True
    use_tim: bool = True
    use_upa: bool = True
    dropout: float = 0.3
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if len(self.encoder_channels) != N_STAGES:
            raise ValueError(f"encoder_channels needs {N_STAGES} widths, got {len(self.encoder_channels)}")
        if len(self.decoder_channels) != N_LEVELS:
            raise ValueError(f"decoder_channels needs {N_LEVELS} widths, got {len(self.decoder_channels)}")
        if min(self.encoder_channels + self.decoder_channels) < 1:
            raise ValueError("channel widths must be positive")
        if self.input_size < STRIDE or self.input_size % STRIDE:
            raise ValueError(f"input_size must be a positive multiple of {STRIDE}, got {self.input_size}")
        if self.use_hmsf and any(c % 8 for c in self.encoder_channels):
            raise ValueError(f"multi-scale fusion needs encoder widths divisible by 8, got {self.encoder_channels}")
        if self.use_upa and not self.use_tim:
            raise ValueError("use_upa requires use_tim (uncertainty weighting consumes task-interaction outputs)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.num_classes < 2 or self.clf_width < 1 or self.head_width < 1:
            raise ValueError("num_classes >= 2 and positive clf/head widths required")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("encoder_channels", "decoder_channels"):
            if key in kw:
                kw[key] = tuple(int(v) for v in kw[key])
        return cls(**kw)


@dataclass
class LevelDiagnostics:
    D: np.ndarray
    D_enh: np.ndarray
    D_final: np.ndarray
    f: np.ndarray
    f_enh: np.ndarray
    f_final: np.ndarray
    omega: np.ndarray  # (B, 2): w_seg, w_clf


@dataclass
class ForwardOutput:
    seg_logits: Tensor
    clf_logits: Tensor
    diagnostics: Optional[list] = None
    extras: dict = field(default_factory=dict)


class EncoderStage(Module):
    """2x average-pool downsampling followed by two conv-BN-ReLU blocks."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.block1 = ConvBNReLU(c_in, c_out, rng)
        self.block2 = ConvBNReLU(c_out, c_out, rng)

    def forward(self, x):
        return self.block2(self.block1(ops.avg_pool2x2(x)))


class DecoderLevel(Module):
    """Upsample, gate and merge the skip, then refine with two conv blocks."""

    def __init__(self, c_prev: int, c_skip: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.up = ConvTranspose2d(c_prev, c_out, rng)
        self.gate = AttentionGate(c_skip, c_out, rng)
        self.block1 = ConvBNReLU(c_out + c_skip, c_out, rng)
        self.block2 = ConvBNReLU(c_out, c_out, rng)

    def forward(self, prev, skip):
        up = self.up(prev)
        gated = self.gate(skip, up)
        return self.block2(self.block1(ops.concat([up, gated], axis=-1)))


class ClfInit(Module):
    """Classification stream for one level: relu(dense(GAP(encoder features)))."""

    def __init__(self, c_in: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Dense(c_in, width, rng)

    def forward(self, x):
        return ops.relu(self.proj(ops.global_avg_pool(x)))


class MultiTaskNet(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        enc, dec = config.encoder_channels, config.decoder_channels
        self.stages = [EncoderStage(1 if s == 0 else enc[s - 1], enc[s], rng) for s in range(N_STAGES)]
        self.fusion = [MultiScaleFusion(c, rng) for c in enc] if config.use_hmsf else []
        # level l consumes encoder stage 3 - l as its skip
        skips = [enc[N_STAGES - 2 - l] for l in range(N_LEVELS)]
        prev = [enc[-1]] + list(dec[:-1])
        self.levels = [DecoderLevel(prev[l], skips[l], dec[l], rng) for l in range(N_LEVELS)]
        self.clf_init = [ClfInit(skips[l], config.clf_width, rng) for l in range(N_LEVELS)]
        self.tim = [TaskInteraction(dec[l], rng, clf_width=config.clf_width) for l in range(N_LEVELS)] \
            if config.use_tim else []
        self.upa = [UncertaintyProxyAttention(rng) for _ in range(N_LEVELS)] if config.use_upa else []
        self.seg_head = Conv2d(dec[-1], 1, 1, rng)
        self.head_hidden = Dense(enc[-1] + N_LEVELS * config.clf_width, config.head_width, rng)
        self.head_dropout = Dropout(config.dropout, np.random.default_rng([config.seed, 1]))
        self.head_out = Dense(config.head_width, config.num_classes, rng)

    # -------------------------------------------------------------- pieces

    def encoder_forward(self, image) -> list:
        image = as_tensor(image)
        if image.ndim != 4 or image.shape[-1] != 1 or image.shape[1] != image.shape[2]:
            raise ValueError(f"expected images of shape (B, H, H, 1), got {image.shape}")
        if image.shape[1] % STRIDE:
            raise ValueError(f"image size {image.shape[1]} is not divisible by {STRIDE}")
        feats, x = [], image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        if self.fusion:
            # fusion refines what the skips and the deepest path see; the chain itself is unfused
            feats = [fuse(f) for fuse, f in zip(self.fusion, feats)]
        return feats

    def decoder_level_forward(self, level: int, prev, skip, f_clf, omega: Optional[np.ndarray] = None):
        """One decoder level; returns ``(D_final, f_final, LevelDiagnostics-like dict)``.

        ``omega`` overrides the learned ``(B, 2)`` weights (used for probing the interpolation).
        """
        D = self.levels[level](prev, skip)
        if not self.config.use_tim:
            ones = np.ones((D.shape[0], 2))
            return D, f_clf, dict(D=D, D_enh=D, f=f_clf, f_enh=f_clf, omega=ones)
        D_enh, f_enh = self.tim[level](D, f_clf)
        if omega is not None:
            w = Tensor(np.asarray(omega, dtype=float))
            D_final = upa_fuse(D, D_enh, _column(w, 0))
            f_final = upa_fuse(f_clf, f_enh, _column(w, 1))
        elif self.config.use_upa:
            D_final, f_final, w = self.upa[level](D, D_enh, f_clf, f_enh)
        else:
            # interaction without uncertainty weighting adopts the enhanced streams (w = 1)
            D_final, f_final, w = D_enh, f_enh, Tensor(np.ones((D.shape[0], 2)))
        w_data = w.data
        return D_final, f_final, dict(D=D, D_enh=D_enh, f=f_clf, f_enh=f_enh, omega=w_data)

    def classification_head_forward(self, deepest, streams) -> Tensor:
        if len(streams) != N_LEVELS or any(s is None for s in streams):
            raise ValueError(f"classification head needs {N_LEVELS} streams, got {len(streams)}")
        z = ops.concat([ops.global_avg_pool(deepest)] + list(streams), axis=-1)
        h = self.head_dropout(ops.relu(self.head_hidden(z)))
        return self.head_out(h)

    def forward(self, image, want_diagnostics: bool = False, omega_override: Optional[dict] = None) -> ForwardOutput:
        feats = self.encoder_forward(image)
        x = feats[-1]
        streams, diags = [], []
        for l in range(N_LEVELS):
            skip = feats[N_STAGES - 2 - l]
            f = self.clf_init[l](skip)
            omega = None if omega_override is None else omega_override.get(l)
            x, f_final, d = self.decoder_level_forward(l, x, skip, f, omega)
            streams.append(f_final)
            if want_diagnostics:
                diags.append(LevelDiagnostics(
                    D=d["D"].data.copy(), D_enh=d["D_enh"].data.copy(), D_final=x.data.copy(),
                    f=d["f"].data.copy(), f_enh=d["f_enh"].data.copy(), f_final=f_final.data.copy(),
                    omega=np.array(d["omega"], dtype=float)))
        seg = ops.upsample_bilinear(self.seg_head(x), 2)
        clf = self.classification_head_forward(feats[-1], streams)
        return ForwardOutput(seg, clf, diags if want_diagnostics else None)

    def parameter_counts(self) -> dict:
        groups: dict = {}
        for name, p in self.named_parameters():
            key = name.split(".")[0]
            groups[key] = groups.get(key, 0) + p.size
        groups["total"] = self.num_parameters()
        return groups


def _column(w: Tensor, k: int) -> Tensor:
    sel = np.zeros((w.shape[1], 1))
    sel[k, 0] = 1.0
    return ops.reshape(ops.matmul(w, sel), (w.shape[0],))


def build_model(config: ModelConfig) -> MultiTaskNet:
    return MultiTaskNet(config)


# -------------------------------------------------------------- checkpoints

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _config_text(config: ModelConfig) -> str:
    lines = []
    for key, value in sorted(config.to_dict().items()):
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        lines.append(f"model.{key} = {value}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> ModelConfig:
    d: dict = {}
    defaults = ModelConfig().to_dict()
    for raw in text.splitlines():
        if not raw.strip():
            continue
        key, _, value = raw.partition("=")
        key = key.strip().removeprefix("model.")
        value = value.strip()
        ref = defaults.get(key)
        if isinstance(ref, bool):
            d[key] = value.lower() == "true"
        elif isinstance(ref, tuple):
            d[key] = tuple(int(v) for v in value.split(","))
        elif isinstance(ref, int):
            d[key] = int(value)
        elif isinstance(ref, float):
            d[key] = float(value)
        else:
            d[key] = value
    return ModelConfig.from_dict(d)


def save_checkpoint(model: MultiTaskNet, path, extra: Optional[dict] = None) -> Path:
    """Zip archive: ``config.txt`` plus one tensor text dump per parameter/buffer.

    Entry order and timestamps are fixed so identical weights give identical bytes.
    """
    path = Path(path)
    entries = {"config.txt": _config_text(model.config)}
    if extra:
        entries["meta.txt"] = "".join(f"{k} = {v}\n" for k, v in sorted(extra.items()))
    for name, arr in model.state_dict().items():
        entries[f"tensors/{name}"] = dumps(arr)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> MultiTaskNet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with zipfile.ZipFile(path) as zf:
        config = _parse_config_text(zf.read("config.txt").decode())
        state = {n[len("tensors/"):]: loads(zf.read(n).decode()) for n in zf.namelist() if n.startswith("tensors/")}
    model = MultiTaskNet(config)
    model.load_state_dict(state)
    model.eval()
    return model
