"""ResNet-IBN feature extractor with GeM pooling, BNNeck and a bias-free classifier."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RunningStats, Tensor

N_BINS = 84
MIN_FRAMES = 8
GEM_P_RANGE = (1.0, 10.0)

# (frequency, time) stride of each stage's first block. Together with the
# stride-2 stem conv and max-pool this gives 84 -> 6 rows and T -> ceil(T/8).
STAGE_STRIDES = ((1, 1), (2, 2), (2, 1))


@dataclass
class ModelConfig:
    stage_blocks: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage_widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    block_kind: str = "bottleneck"
    ibn_stages: tuple[int, ...] = (1, 2, 3)
    last_stage_stride: int = 1
    num_classes: int = 1000
    gem_p_init: float = 3.0
    embed_dim: int = 0
    gem_split: bool = False
    bnneck: bool = True

    @classmethod
    def full(cls, num_classes: int, **kw) -> "ModelConfig":
        return cls(num_classes=num_classes, **kw)

    @classmethod
    def mini(cls, num_classes: int, **kw) -> "ModelConfig":
        return cls(
            stage_blocks=(1, 1, 1, 1),
            stage_widths=(16, 32, 64, 128),
            block_kind="basic",
            num_classes=num_classes,
            **kw,
        )

    @classmethod
    def preset(cls, name: str, num_classes: int, **kw) -> "ModelConfig":
        if name not in ("mini", "full"):
            raise ValueError(f"unknown preset {name!r}")
        return getattr(cls, name)(num_classes, **kw)

    @property
    def expansion(self) -> int:
        return 4 if self.block_kind == "bottleneck" else 1

    @property
    def channels(self) -> int:
        """K, the number of feature-map channels."""
        return self.stage_widths[-1] * self.expansion

    @property
    def pooled_dim(self) -> int:
        return 2 * self.channels if self.gem_split else self.channels

    @property
    def output_dim(self) -> int:
        return self.embed_dim or self.pooled_dim

    def validate(self) -> None:
        if len(self.stage_blocks) != 4 or len(self.stage_widths) != 4:
            raise ValueError("need exactly four stages")
        if min(self.stage_blocks) < 1 or min(self.stage_widths) < 2:
            raise ValueError("every stage needs at least one block and two channels")
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"unknown block kind {self.block_kind!r}")
        if not set(self.ibn_stages) <= {1, 2, 3}:
            raise ValueError("IBN can only be applied to stages 1-3")
        for s in self.ibn_stages:
            if self.stage_widths[s - 1] % 2:
                raise ValueError(f"stage {s} width must be even for the IN/BN split")
        if self.last_stage_stride != 1:
            raise ValueError("the last stage keeps stride 1")
        if self.num_classes < 1 or self.embed_dim < 0:
            raise ValueError("num_classes must be positive and embed_dim non-negative")
        if self.gem_p_init < 1:
            raise ValueError("GeM exponent must start at >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("stage_blocks", "stage_widths", "ibn_stages"):
            d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ForwardOutput:
    feature_map: Tensor
    f_t: Tensor
    f_c: Tensor
    logits: Tensor
    projected: Tensor | None = None

    @property
    def embedding(self) -> Tensor:
        """The vector used for retrieval."""
        return self.projected if self.projected is not None else self.f_c


# --------------------------------------------------------------------------
# pooling


def gem_pool(x: Tensor, p: Tensor) -> Tensor:
    """GeM over both spatial axes: (N, K, H, W) -> (N, K)."""
    return ad.gem(x, p, axes=(2, 3))


def gem_pool_split(x: Tensor, p_t: Tensor, p_f: Tensor) -> Tensor:
    """Two GeM orders concatenated: time-then-frequency with ``p_t``, then
    frequency-then-time with ``p_f``. Output (N, 2K)."""
    tf = ad.gem(ad.gem(x, p_t, axes=(3,)), p_t, axes=(2,))
    ft = ad.gem(ad.gem(x, p_f, axes=(2,)), p_f, axes=(2,))
    return ad.concat_channels([tf, ft])


# --------------------------------------------------------------------------
# network


class ResidualBlock:
    """Basic or bottleneck residual block; optionally IBN after the first conv.

    The stride sits on the block's first convolution. With IBN the first
    conv's output is split by channel: the lower half goes through instance
    norm, the upper half through batch norm.
    """

    def __init__(self, model: "ResNetIbnModel", prefix: str, cin: int, width: int, stride, kind: str, ibn: bool):
        self.model = model
        self.prefix = prefix
        self.kind = kind
        self.ibn = ibn
        self.stride = stride
        self.cout = width * (4 if kind == "bottleneck" else 1)
        if ibn and width % 2:
            raise ValueError(f"{prefix}: IBN split needs an even channel count, got {width}")

        if kind == "basic":
            self.convs = [(cin, width, 3), (width, width, 3)]
        else:
            self.convs = [(cin, width, 1), (width, width, 3), (width, self.cout, 1)]
        for i, (ci, co, k) in enumerate(self.convs, 1):
            model._conv(f"{prefix}.conv{i}", co, ci, k)
            if i == 1 and ibn:
                half = co // 2
                model._norm(f"{prefix}.in1", half, running=False)
                model._norm(f"{prefix}.bn1", co - half)
            else:
                model._norm(f"{prefix}.bn{i}", co)
        self.has_shortcut = stride != (1, 1) or cin != self.cout
        if self.has_shortcut:
            model._conv(f"{prefix}.down.conv", self.cout, cin, 1)
            model._norm(f"{prefix}.down.bn", self.cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        m, pre = self.model, self.prefix
        out = x
        n = len(self.convs)
        for i, (_, _, k) in enumerate(self.convs, 1):
            stride = self.stride if i == 1 else 1
            out = ad.conv2d(out, m.params[f"{pre}.conv{i}.weight"], stride=stride, padding=k // 2)
            if i == 1 and self.ibn:
                lo, hi = ad.split_channels(out, out.shape[1] // 2)
                lo = m._apply_in(f"{pre}.in1", lo)
                hi = m._apply_bn(f"{pre}.bn1", hi, training)
                out = ad.concat_channels([lo, hi])
            else:
                out = m._apply_bn(f"{pre}.bn{i}", out, training)
            if i < n:
                out = ad.relu(out)
        short = x
        if self.has_shortcut:
            short = ad.conv2d(x, m.params[f"{pre}.down.conv.weight"], stride=self.stride)
            short = m._apply_bn(f"{pre}.down.bn", short, training)
        return ad.relu(ad.add(out, short))


class ResNetIbnModel:
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self.stats: dict[str, RunningStats] = {}
        self._rng = np.random.default_rng(seed)

        c = config
        stem = c.stage_widths[0]
        self._conv("stem.conv", stem, 1, 7)
        self._norm("stem.bn", stem)

        self.blocks: list[ResidualBlock] = []
        cin = stem
        for s in range(4):
            stride = STAGE_STRIDES[s] if s < 3 else (c.last_stage_stride,) * 2
            for b in range(c.stage_blocks[s]):
                blk = ResidualBlock(
                    self,
                    f"layer{s + 1}.{b}",
                    cin,
                    c.stage_widths[s],
                    stride if b == 0 else (1, 1),
                    c.block_kind,
                    ibn=(s + 1) in c.ibn_stages,
                )
                self.blocks.append(blk)
                cin = blk.cout

        if c.gem_split:
            self._scalar("gem.p_t", c.gem_p_init)
            self._scalar("gem.p_f", c.gem_p_init)
        else:
            self._scalar("gem.p", c.gem_p_init)
        pooled = c.pooled_dim
        if c.bnneck:
            self._norm("neck.bn", pooled)
        if c.embed_dim:
            std = np.sqrt(1.0 / pooled)
            self._param("proj.weight", self._rng.normal(0, std, (c.embed_dim, pooled)))
            self._param("proj.bias", np.zeros(c.embed_dim))
        self._param("classifier.weight", self._rng.normal(0, 0.001, (c.num_classes, c.output_dim)))
        del self._rng

    # -- registration helpers ------------------------------------------------

    def _param(self, name: str, value) -> Parameter:
        p = Parameter(np.asarray(value, dtype=self.dtype), name=name)
        self.params[name] = p
        return p

    def _scalar(self, name: str, value: float) -> Parameter:
        return self._param(name, np.full(1, value))

    def _conv(self, name: str, cout: int, cin: int, k: int) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self._param(f"{name}.weight", self._rng.normal(0.0, std, (cout, cin, k, k)))

    def _norm(self, name: str, channels: int, running: bool = True) -> None:
        self._param(f"{name}.gamma", np.ones(channels))
        self._param(f"{name}.beta", np.zeros(channels))
        if running:
            self.stats[name] = RunningStats.fresh(channels, self.dtype)

    def _apply_bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        fn = ad.batch_norm2d if x.data.ndim == 4 else ad.batch_norm1d
        return fn(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.stats[name], training)

    def _apply_in(self, name: str, x: Tensor) -> Tensor:
        return ad.instance_norm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    # -- public API ----------------------------------------------------------

    @property
    def gem_params(self) -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith("gem.")]

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every parameter and running statistic, in a fixed order."""
        out = {n: p.data for n, p in self.params.items()}
        for n, s in self.stats.items():
            out[f"{n}.running_mean"] = s.mean
            out[f"{n}.running_var"] = s.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        current = self.state_arrays()
        if set(arrays) != set(current):
            missing = sorted(set(current) - set(arrays))
            extra = sorted(set(arrays) - set(current))
            raise ValueError(f"state mismatch; missing={missing[:3]} unexpected={extra[:3]}")
        for name, ref in current.items():
            a = np.asarray(arrays[name])
            if a.shape != ref.shape:
                raise ValueError(f"{name}: shape {a.shape} != expected {ref.shape}")
            ref[...] = a.astype(self.dtype)

    def astype(self, dtype) -> "ResNetIbnModel":
        self.dtype = np.dtype(dtype)
        for p in self.params.values():
            p.astype(dtype)
        for s in self.stats.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def features(self, x: Tensor, training: bool) -> Tensor:
        out = ad.conv2d(x, self.params["stem.conv.weight"], stride=2, padding=3)
        out = ad.relu(self._apply_bn("stem.bn", out, training))
        out = ad.max_pool2d(out, 3, 2, 1)
        for blk in self.blocks:
            out = blk(out, training)
        return out

    def forward(self, batch, training: bool = False) -> ForwardOutput:
        """``batch`` is (N, 1, 84, T) (or (N, 84, T)); T >= 8."""
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if data.ndim == 3:
            data = data[:, None]
        if data.ndim != 4 or data.shape[1] != 1 or data.shape[2] != N_BINS:
            raise ValueError(f"expected input (N, 1, {N_BINS}, T), got {data.shape}")
        if data.shape[3] < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {data.shape[3]}")
        x = batch if isinstance(batch, Tensor) and batch.data.ndim == 4 else Tensor(data.astype(self.dtype))

        fmap = self.features(x, training)
        p = self.params
        if self.config.gem_split:
            f_t = gem_pool_split(fmap, p["gem.p_t"], p["gem.p_f"])
        else:
            f_t = gem_pool(fmap, p["gem.p"])
        f_c = self._apply_bn("neck.bn", f_t, training) if self.config.bnneck else f_t
        projected = None
        head_in = f_c
        if self.config.embed_dim:
            projected = project(self, f_c)
            head_in = projected
        logits = ad.linear(head_in, p["classifier.weight"])
        return ForwardOutput(fmap, f_t, f_c, logits, projected)

    __call__ = forward

    def clamp_gem(self) -> None:
        lo, hi = GEM_P_RANGE
        for gp in self.gem_params:
            np.clip(gp.data, lo, hi, out=gp.data)


def project(model: ResNetIbnModel, f_c: Tensor) -> Tensor:
    if not model.config.embed_dim:
        raise ValueError("model has no projection head (embed_dim = 0)")
    return ad.linear(f_c, model.params["proj.weight"], model.params["proj.bias"])


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ResNetIbnModel:
    return ResNetIbnModel(config, seed=seed, dtype=dtype)


def output_frames(T: int) -> int:
    """Time extent of the feature map for a T-frame input."""
    return -(-T // 8)
