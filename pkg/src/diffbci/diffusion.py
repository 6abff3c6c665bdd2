"""Diffusion-conditioned 1D U-Net classifier.

The network sees a noised window ``x_t`` together with a timestep and an
optional class embedding.  It predicts the added noise through a
skip-connected decoder, reconstructs the clean window through a separate
light decoder, and classifies from the pooled bottleneck.  At inference
the clean window goes through once, conditioned on a fixed timestep and
no class.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NULL_LABEL = -1
ALPHA_BAR_FLOOR = 1e-5


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

def _cos_ramp(t: float, T: int, s: float) -> float:
    return math.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2


def cosine_alpha_bar(t: int, T: int = 1000, s: float = 0.008) -> float:
    """Cumulative signal retention at step ``t``.

    ``f(t) / f(0)`` mapped affinely onto ``[ALPHA_BAR_FLOOR, 1]``: the end
    points land exactly on 1 and the floor, and the table stays strictly
    decreasing where a hard clip would flatten the last few steps.
    """
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    raw = _cos_ramp(t, T, s) / _cos_ramp(0, T, s)
    if t == 0:
        return 1.0
    return ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * min(max(raw, 0.0), 1.0)


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    s: float = 0.008
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        table = np.array([cosine_alpha_bar(t, self.T, self.s) for t in range(self.T + 1)])
        table.setflags(write=False)
        object.__setattr__(self, "alpha_bar", table)

    def inference_step(self, tau: float) -> int:
        """Normalized noise level -> timestep, rounding half up."""
        if not 0.0 <= tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        return int(math.floor(tau * (self.T - 1) + 0.5))


def forward_noising(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` with per-sample ``t`` on axis 0."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > schedule.T):
        raise ValueError("timestep out of range")
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t, emb_dim: int) -> np.ndarray:
    """Sines then cosines of ``t * 10000**(-2i/emb_dim)``; shape (N, emb_dim)."""
    if emb_dim % 2:
        raise ValueError("emb_dim must be even")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-2.0 * np.arange(emb_dim // 2) / emb_dim)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# configuration and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    channels_in: int = 64
    length_in: int = 1000
    base_width: int = 8
    level_mult: tuple[int, int, int] = (1, 2, 4)
    kernel_len: tuple[int, int, int] = (7, 3, 3)
    emb_dim: int = 32
    n_classes: int = 4
    dropout_p: float = 0.1
    groups: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "level_mult", tuple(int(m) for m in self.level_mult))
        object.__setattr__(self, "kernel_len", tuple(int(k) for k in self.kernel_len))
        if len(self.level_mult) != 3 or len(self.kernel_len) != 3:
            raise ValueError("the U-Net has exactly three levels")
        if self.length_in % 4:
            raise ValueError("length_in must be divisible by 4")
        if any(k % 2 == 0 for k in self.kernel_len):
            raise ValueError("kernel lengths must be odd")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by {self.groups} groups")
        if self.emb_dim % 2:
            raise ValueError("emb_dim must be even")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.base_width * m for m in self.level_mult)  # type: ignore[return-value]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_mult"] = list(self.level_mult)
        d["kernel_len"] = list(self.kernel_len)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "level_mult": tuple(d["level_mult"]), "kernel_len": tuple(d["kernel_len"])})


def _conv(name, cout, cin, k):
    return [(f"{name}.w", (cout, cin, k)), (f"{name}.b", (cout,))]


def _norm(name, c):
    return [(f"{name}.g", (c,)), (f"{name}.beta", (c,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (serialization) order."""
    w1, w2, w3 = cfg.widths
    k1, k2, k3 = cfg.kernel_len
    e, c = cfg.emb_dim, cfg.channels_in
    widths, kernels = (w1, w2, w3), (k1, k2, k3)
    out: list[tuple[str, tuple[int, ...]]] = [
        ("time.w", (e, e)), ("time.b", (e,)),
        ("class_emb", (cfg.n_classes, e)),
    ]
    out += _conv("in", w1, c, 1)
    for i, (w, k) in enumerate(zip(widths, kernels), start=1):
        out += _conv(f"enc{i}.conv1", w, w, k) + _norm(f"enc{i}.gn1", w)
        out += _conv(f"enc{i}.conv2", w, w, k) + _norm(f"enc{i}.gn2", w)
        out += [(f"enc{i}.cond.w", (w, e)), (f"enc{i}.cond.b", (w,))]
        if i < 3:
            out += _conv(f"down{i}", widths[i], w, 3)
    out += _conv("mid", w3, w3, k3) + _norm("mid.gn", w3)
    out += _conv("dec3", w3, 2 * w3, k3) + _norm("dec3.gn", w3)
    out += _conv("up2", w2, w3, k2)
    out += _conv("dec2", w2, 2 * w2, k2) + _norm("dec2.gn", w2)
    out += _conv("up1", w1, w2, k1)
    out += _conv("dec1", w1, 2 * w1, k1) + _norm("dec1.gn", w1)
    out += _conv("eps_head", c, w1, 1)
    out += _conv("rec.up2", w2, w3, k2) + _norm("rec.gn2", w2)
    out += _conv("rec.up1", w1, w2, k1) + _norm("rec.gn1", w1)
    out += _conv("rec.out", c, w1, 1)
    out += [("cls.w", (cfg.n_classes, w3)), ("cls.b", (cfg.n_classes,))]
    return out


def count_params(cfg: ModelConfig) -> int:
    return int(sum(math.prod(shape) for _, shape in param_shapes(cfg)))


class ModelParams:
    """Ordered store of trainable tensors."""

    def __init__(self, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]"):
        expected = param_shapes(config)
        if [(n, tuple(a.shape)) for n, a in arrays.items()] != expected:
            raise ValueError("parameter arrays do not match the model configuration")
        self.config = config
        self.tensors: OrderedDict[str, Tensor] = OrderedDict(
            (n, Tensor(np.array(a, dtype=np.float64), requires_grad=True)) for n, a in arrays.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors.values()]

    def grads(self) -> list[np.ndarray]:
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in self.tensors.values()]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def size(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != count_params(config):
            raise ValueError(f"expected {count_params(config)} parameters, got {flat.size}")
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        pos = 0
        for name, shape in param_shapes(config):
            n = math.prod(shape)
            arrays[name] = flat[pos: pos + n].reshape(shape)
            pos += n
        return cls(config, arrays)

    def copy(self) -> "ModelParams":
        return ModelParams.from_flat(self.config, self.flat())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, shape in param_shapes(config):
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif name.endswith((".b", ".beta")):
            arrays[name] = np.zeros(shape)
        elif name == "class_emb":
            arrays[name] = rng.standard_normal(shape)
        else:
            fan_in = math.prod(shape[1:])
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def time_embedding(t, params: ModelParams) -> Tensor:
    """Learned projection of the sinusoidal timestep code; shape (N, emb_dim)."""
    raw = Tensor(sinusoidal_embedding(t, params.config.emb_dim))
    return ad.silu(ad.linear(raw, params["time.w"], params["time.b"]))


def class_projection(labels, params: ModelParams) -> Tensor:
    """Rows of the class matrix; ``NULL_LABEL`` (or None) selects the zero vector."""
    if labels is None:
        labels = [NULL_LABEL]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = params.config.n_classes
    if np.any(labels >= k) or np.any(labels < NULL_LABEL):
        raise ValueError(f"class label outside [0, {k}) and not NULL")
    onehot = np.zeros((labels.size, k))
    known = labels >= 0
    onehot[np.flatnonzero(known), labels[known]] = 1.0
    # (N, K) @ (K, E) as linear with weight (E, K)
    return _onehot_rows(Tensor(onehot), params["class_emb"])


def _onehot_rows(onehot: Tensor, table: Tensor) -> Tensor:
    od, td = onehot.data, table.data
    return ad._result(od @ td, (onehot, table), lambda g: (g @ td.T, od.T @ g), "class_rows")


def _block(h: Tensor, p: ModelParams, name: str, gn: str, groups: int, stride: int = 1) -> Tensor:
    k = p[f"{name}.w"].shape[2]
    h = ad.conv1d(h, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=k // 2)
    return ad.silu(ad.group_norm(h, groups, p[f"{gn}.g"], p[f"{gn}.beta"]))


@dataclass
class UNetOutput:
    z: Tensor
    eps_hat: Tensor
    x0_hat: Tensor


def unet_forward(x_t, t_emb: Tensor, c_emb: Tensor, params: ModelParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> UNetOutput:
    """Encoder L -> L/2 -> L/4 with conditioning after each level, then two decoders."""
    cfg = params.config
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1, *x.shape))
    if x.shape[1:] != (cfg.channels_in, cfg.length_in):
        raise ValueError(f"input shape {x.shape[1:]} != ({cfg.channels_in}, {cfg.length_in})")
    n = x.shape[0]
    cond = ad.add(t_emb, c_emb)
    if cond.shape != (n, cfg.emb_dim):
        if cond.shape == (1, cfg.emb_dim):
            cond = ad.add(cond, np.zeros((n, cfg.emb_dim)))
        else:
            raise ValueError(f"conditioning shape {cond.shape} does not match batch {n}")
    g = cfg.groups
    p = params

    h = ad.conv1d(x, p["in.w"], p["in.b"])
    skips = []
    for i in (1, 2, 3):
        h = _block(h, p, f"enc{i}.conv1", f"enc{i}.gn1", g)
        h = _block(h, p, f"enc{i}.conv2", f"enc{i}.gn2", g)
        c = ad.linear(cond, p[f"enc{i}.cond.w"], p[f"enc{i}.cond.b"])
        h = ad.add(h, ad.reshape(c, (n, c.shape[1], 1)))
        skips.append(h)
        if i < 3:
            h = ad.conv1d(h, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, padding=1)

    z = ad.dropout(_block(h, p, "mid", "mid.gn", g), cfg.dropout_p, rng, training)

    d = _block(ad.concat([z, skips[2]], axis=1), p, "dec3", "dec3.gn", g)
    d = _conv_same(ad.upsample_nearest(d), p, "up2")
    d = _block(ad.concat([d, skips[1]], axis=1), p, "dec2", "dec2.gn", g)
    d = _conv_same(ad.upsample_nearest(d), p, "up1")
    d = _block(ad.concat([d, skips[0]], axis=1), p, "dec1", "dec1.gn", g)
    eps_hat = ad.conv1d(d, p["eps_head.w"], p["eps_head.b"])

    r = _block(ad.upsample_nearest(z), p, "rec.up2", "rec.gn2", g)
    r = _block(ad.upsample_nearest(r), p, "rec.up1", "rec.gn1", g)
    x0_hat = ad.conv1d(r, p["rec.out.w"], p["rec.out.b"])

    if squeeze:
        z = ad.reshape(z, z.shape[1:])
        eps_hat = ad.reshape(eps_hat, eps_hat.shape[1:])
        x0_hat = ad.reshape(x0_hat, x0_hat.shape[1:])
    return UNetOutput(z, eps_hat, x0_hat)


def _conv_same(h: Tensor, p: ModelParams, name: str) -> Tensor:
    k = p[f"{name}.w"].shape[2]
    return ad.conv1d(h, p[f"{name}.w"], p[f"{name}.b"], padding=k // 2)


def classify(z: Tensor, params: ModelParams) -> Tensor:
    """Global average pool over time, then a linear map to class logits."""
    return ad.linear(ad.mean(z, axis=-1), params["cls.w"], params["cls.b"])


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties go to the lower index."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


# ---------------------------------------------------------------------------
# training objective and inference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    ddpm: float = 1.0
    rec: float = 1.0
    ce: float = 1.0


@dataclass
class LossParts:
    total: Tensor
    ddpm: float
    rec: float
    ce: float


def total_loss(x0: np.ndarray, labels: Sequence[int], params: ModelParams, schedule: NoiseSchedule,
               weights: LossWeights = LossWeights(), rng: np.random.Generator | None = None,
               training: bool = True, tau_ce: float = 0.5) -> LossParts:
    """Joint noise-prediction, reconstruction and classification loss over a batch.

    Per sample: ``t ~ U{1..T}``, ``eps ~ N(0, I)``; the noised pass is
    conditioned on the true label and feeds the two regression terms.  The
    classifier is trained on a second, label-free pass over the clean window
    at the inference timestep, i.e. on exactly what it sees at decode time;
    reading logits off the label-conditioned pass would let it copy the
    answer from its own conditioning.  The second pass is skipped when
    ``weights.ce == 0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x0.ndim != 3 or x0.shape[0] == 0:
        raise ValueError("total_loss needs a non-empty (B, C, L) batch")
    if labels.shape != (x0.shape[0],):
        raise ValueError("one label per batch entry required")
    if rng is None:
        raise ValueError("total_loss needs an rng")
    b = x0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)

    x_t = forward_noising(x0, t, eps, schedule)
    out = unet_forward(x_t, time_embedding(t, params), class_projection(labels, params),
                       params, training=training, rng=rng)
    l_ddpm = ad.mse(out.eps_hat, eps)
    l_rec = ad.mse(out.x0_hat, x0)
    total = ad.add(ad.scale(l_ddpm, weights.ddpm), ad.scale(l_rec, weights.rec))
    ce_val = 0.0
    if weights.ce != 0.0:
        t_ce = np.full(b, schedule.inference_step(tau_ce))
        null = np.full(b, NULL_LABEL)
        clean = unet_forward(x0, time_embedding(t_ce, params), class_projection(null, params),
                             params, training=training, rng=rng)
        l_ce = ad.softmax_cross_entropy(classify(clean.z, params), labels)
        ce_val = float(l_ce.data)
        total = ad.add(total, ad.scale(l_ce, weights.ce))
    return LossParts(total, float(l_ddpm.data), float(l_rec.data), ce_val)


def infer_logits(x: np.ndarray, params: ModelParams, schedule: NoiseSchedule, tau: float = 0.5) -> np.ndarray:
    """Evaluation-mode logits for one (C, L) window or a (N, C, L) batch."""
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    if x.shape[-2:] != (cfg.channels_in, cfg.length_in):
        raise ValueError(f"window shape {x.shape[-2:]} != ({cfg.channels_in}, {cfg.length_in})")
    single = x.ndim == 2
    xb = x[None] if single else x
    n = xb.shape[0]
    t = np.full(n, schedule.inference_step(tau))
    with ad.no_grad():
        out = unet_forward(xb, time_embedding(t, params), class_projection(np.full(n, NULL_LABEL), params),
                           params, training=False)
        logits = classify(out.z, params).data
    return logits[0] if single else logits


def infer_window(x: np.ndarray, params: ModelParams, schedule: NoiseSchedule, tau: float = 0.5) -> np.ndarray:
    """Class probabilities from one clean forward pass (no sampling, no label)."""
    return ad.softmax(infer_logits(x, params, schedule, tau))
