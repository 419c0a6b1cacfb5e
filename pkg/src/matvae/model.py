"""matVAE (transformer -> DwFC -> simplex bottleneck -> mirror decoder) and
matENC (same encoder with a small regression head)."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from matvae import tensor as T
from matvae.tensor import Tensor

MATVAE = "matvae"
MATENC = "matenc"
MODES = (MATVAE, MATENC)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``H`` defaults to ``min(h_min, L)``; ``transformer_hidden`` to ``2 * d``.
    ``mask`` is an L x L boolean attention mask, None meaning all-true.
    """

    L: int
    d: int = 21
    D: int = 10
    h_min: int = 200
    H: int | None = None
    transformer_layers: int = 3
    transformer_hidden: int | None = None
    fcb_hidden: tuple[int, ...] = (1000, 300)
    head_hidden: int = 10
    gumbel_temperature: float = 1.0
    beta_train: float = 0.01
    beta_test: float = 1.0
    use_transformer: bool = True
    matenc_noise: bool = False
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.H is None:
            self.H = min(self.h_min, self.L)
        if self.transformer_hidden is None:
            self.transformer_hidden = 2 * self.d
        self.fcb_hidden = tuple(int(w) for w in self.fcb_hidden)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        self.validate()

    def validate(self) -> None:
        if self.H > self.L:
            raise ConfigError(f"H={self.H} exceeds L={self.L}")
        if self.D < 2:
            raise ConfigError(f"latent dimension D must be >= 2, got {self.D}")
        widths = [self.L, self.d, self.H, self.transformer_hidden, self.head_hidden, *self.fcb_hidden]
        if min(widths) < 1:
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.gumbel_temperature <= 0:
            raise ConfigError("gumbel_temperature must be positive")
        if self.mask is not None:
            if self.mask.shape != (self.L, self.L):
                raise ConfigError(f"mask shape {self.mask.shape} does not match L={self.L}")
            if not self.mask.diagonal().all():
                raise ConfigError("mask diagonal must be all true")

    def attention_mask(self) -> np.ndarray:
        return self.mask if self.mask is not None else np.ones((self.L, self.L), dtype=bool)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "mask"}
        out["fcb_hidden"] = list(self.fcb_hidden)
        return out

    @classmethod
    def from_dict(cls, data: dict, mask: np.ndarray | None = None) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"mask"}
        return cls(**{k: v for k, v in data.items() if k in known}, mask=mask)


# ---------------------------------------------------------------------------
# parameter layout


def _transformer_shapes(prefix: str, d: int, hidden: int) -> list[tuple[str, tuple[int, ...], str]]:
    # (name, shape, init) with init in {"glorot", "zeros", "ones"}
    out = []
    for p in ("q", "k", "v", "o"):
        out.append((f"{prefix}.w{p}", (d, d), "glorot"))
        out.append((f"{prefix}.b{p}", (d,), "zeros"))
    out += [
        (f"{prefix}.fc1.w", (d, hidden), "glorot"),
        (f"{prefix}.fc1.b", (hidden,), "zeros"),
        (f"{prefix}.fc2.w", (hidden, d), "glorot"),
        (f"{prefix}.fc2.b", (d,), "zeros"),
        (f"{prefix}.ln1.gain", (d,), "ones"),
        (f"{prefix}.ln1.offset", (d,), "zeros"),
        (f"{prefix}.ln2.gain", (d,), "ones"),
        (f"{prefix}.ln2.offset", (d,), "zeros"),
        (f"{prefix}.raw_tau1", (), "zeros"),
        (f"{prefix}.raw_tau2", (), "zeros"),
    ]
    return out


def _fc_shapes(prefix: str, widths: list[int]):
    out = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        out.append((f"{prefix}{i}.w", (a, b), "glorot"))
        out.append((f"{prefix}{i}.b", (b,), "zeros"))
    return out


def param_layout(config: ModelConfig, mode: str) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) of every trainable array."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    c = config
    flat = c.H * c.d
    layout = []
    if c.use_transformer:
        for i in range(c.transformer_layers):
            layout += _transformer_shapes(f"enc.tf{i}", c.d, c.transformer_hidden)
    layout += [("enc.dwfc.U", (c.H, c.L), "glorot"), ("enc.dwfc.b", (c.H,), "zeros")]
    layout += _fc_shapes("enc.fc", [flat, *c.fcb_hidden, c.D])
    if mode == MATVAE:
        layout += _fc_shapes("dec.fc", [c.D, *reversed(c.fcb_hidden), flat])
        layout += [("dec.dwfc.U", (c.L, c.H), "glorot"), ("dec.dwfc.b", (c.L,), "zeros")]
        if c.use_transformer:
            for i in range(c.transformer_layers):
                layout += _transformer_shapes(f"dec.tf{i}", c.d, c.transformer_hidden)
        layout.append(("dec.raw_temp", (), "zeros"))
    else:
        layout += _fc_shapes("head.fc", [c.D, c.head_hidden, 1])
    return layout


class ModelParams:
    """Named parameter tensors plus the config and mode they belong to."""

    def __init__(self, config: ModelConfig, mode: str, tensors: dict[str, Tensor]):
        self.config = config
        self.mode = mode
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.mode, {k: Tensor(t.data.copy(), requires_grad=True) for k, t in self})

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, t in self:
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig, rng: np.random.Generator, mode: str = MATVAE) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit gains, tau = 0.5, temperature 1."""
    tensors = {}
    for name, shape, init in param_layout(config, mode):
        if init == "glorot":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arr = rng.uniform(-limit, limit, size=shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr, requires_grad=True)
    return ModelParams(config, mode, tensors)


def param_count(config: ModelConfig, mode: str = MATVAE) -> int:
    """Closed-form number of trainable scalars."""
    c = config
    d, hid = c.d, c.transformer_hidden
    # 4 projections, 2-layer FC, 2 layer norms, 2 gates
    per_layer = 4 * (d * d + d) + (d * hid + hid) + (hid * d + d) + 2 * 2 * d + 2
    tf = c.transformer_layers * per_layer if c.use_transformer else 0
    widths = [c.H * c.d, *c.fcb_hidden, c.D]
    fc_enc = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    total = tf + (c.H * c.L + c.H) + fc_enc
    if mode == MATVAE:
        dwidths = widths[::-1]
        fc_dec = sum(a * b + b for a, b in zip(dwidths[:-1], dwidths[1:]))
        total += fc_dec + (c.L * c.H + c.L) + tf + 1
    else:
        total += (c.D * c.head_hidden + c.head_hidden) + (c.head_hidden + 1)
    return total


# ---------------------------------------------------------------------------
# building blocks


def tau(params: ModelParams, prefix: str, which: str) -> Tensor:
    return T.sigmoid(params[f"{prefix}.raw_{which}"])


def attention(x: Tensor, params: ModelParams, prefix: str, mask: np.ndarray) -> Tensor:
    """Single-head masked scaled dot-product attention with output projection."""
    p = params
    d = x.shape[-1]
    q = T.add(T.matmul(x, p[f"{prefix}.wq"]), p[f"{prefix}.bq"])
    k = T.add(T.matmul(x, p[f"{prefix}.wk"]), p[f"{prefix}.bk"])
    v = T.add(T.matmul(x, p[f"{prefix}.wv"]), p[f"{prefix}.bv"])
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d))
    a = T.softmax(logits, mask=mask)
    return T.add(T.matmul(T.matmul(a, v), p[f"{prefix}.wo"]), p[f"{prefix}.bo"])


def position_fc(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    p = params
    h = T.relu(T.add(T.matmul(x, p[f"{prefix}.fc1.w"]), p[f"{prefix}.fc1.b"]))
    return T.add(T.matmul(h, p[f"{prefix}.fc2.w"]), p[f"{prefix}.fc2.b"])


def _gate(t: Tensor, skip: Tensor, branch: Tensor) -> Tensor:
    return T.add(T.mul(t, skip), T.mul(T.sub(1.0, t), branch))


def transformer_layer(x: Tensor, params: ModelParams, prefix: str, mask: np.ndarray) -> Tensor:
    """Gated-skip post-norm layer:
    x1 = Norm(t1 x + (1 - t1) Attn(x)), out = Norm(t2 x1 + (1 - t2) FC(x1))."""
    L = x.shape[-2]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (L, L):
        raise T.ShapeError(f"transformer_layer: mask shape {mask.shape} does not match sequence length {L}")
    p = params
    x1 = T.layer_norm(_gate(tau(p, prefix, "tau1"), x, attention(x, p, prefix, mask)),
                      p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.offset"])
    return T.layer_norm(_gate(tau(p, prefix, "tau2"), x1, position_fc(x1, p, prefix)),
                        p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.offset"])


def transformer_stack(x: Tensor, params: ModelParams, side: str) -> Tensor:
    c = params.config
    if not c.use_transformer:
        return x
    mask = c.attention_mask()
    for i in range(c.transformer_layers):
        x = transformer_layer(x, params, f"{side}.tf{i}", mask)
    return x


def dwfc(x: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """s = U x + b, the same map over positions for every feature column."""
    if U.shape[1] != x.shape[-2]:
        raise T.ShapeError(f"dwfc: weight shape {U.shape} incompatible with input {x.shape}")
    return T.add(T.matmul(U, x), T.reshape(b, (b.shape[0], 1)))


def dwfc_encode(x: Tensor, params: ModelParams) -> Tensor:
    return dwfc(x, params["enc.dwfc.U"], params["enc.dwfc.b"])


def fc_stack(x: Tensor, params: ModelParams, prefix: str, n_layers: int) -> Tensor:
    """Linear layers with ReLU between them and none after the last."""
    if x.ndim == 1:
        y = fc_stack(T.reshape(x, (1, x.shape[0])), params, prefix, n_layers)
        return T.reshape(y, y.shape[1:])
    for i in range(n_layers):
        x = T.add(T.matmul(x, params[f"{prefix}{i}.w"]), params[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            x = T.relu(x)
    return x


def encoder_logits(s: Tensor, params: ModelParams) -> Tensor:
    c = params.config
    flat = T.reshape(s, s.shape[:-2] + (c.H * c.d,))
    return fc_stack(flat, params, "enc.fc", len(c.fcb_hidden) + 1)


def fcb_encode(s: Tensor, params: ModelParams) -> Tensor:
    """h = softmax(FC(Vec(s))), a point on the simplex."""
    return T.softmax(encoder_logits(s, params))


def encode(x, params: ModelParams) -> Tensor:
    """Input one-hot (B x L x d or L x d) to latent simplex h."""
    x = T.as_tensor(x)
    return fcb_encode(dwfc_encode(transformer_stack(x, params, "enc"), params), params)


def latent(h: Tensor, config: ModelConfig, rng: np.random.Generator | None, phase: str) -> Tensor:
    if phase == "test":
        return h
    if phase != "train":
        raise ValueError(f"unknown phase {phase!r}")
    return T.gumbel_softmax_sample(h, config.gumbel_temperature, rng)


def decoder_temperature(params: ModelParams) -> Tensor:
    return T.exp(params["dec.raw_temp"])


def decode(z: Tensor, params: ModelParams) -> Tensor:
    """Latent to an L x d row-stochastic reconstruction."""
    c = params.config
    s_hat = fc_stack(z, params, "dec.fc", len(c.fcb_hidden) + 1)
    s_hat = T.reshape(s_hat, s_hat.shape[:-1] + (c.H, c.d))
    x = dwfc(s_hat, params["dec.dwfc.U"], params["dec.dwfc.b"])
    x = transformer_stack(x, params, "dec")
    return T.softmax(x, temperature=decoder_temperature(params))


def matvae_forward(x, params: ModelParams, rng: np.random.Generator | None = None, phase: str = "train"):
    """Returns (h, z, x_hat)."""
    if params.mode != MATVAE:
        raise ValueError("matvae_forward needs matVAE parameters")
    x = T.as_tensor(x)
    c = params.config
    if x.shape[-2:] != (c.L, c.d):
        raise T.ShapeError(f"matvae_forward: input shape {x.shape} does not end in ({c.L}, {c.d})")
    h = encode(x, params)
    z = latent(h, c, rng, phase)
    return h, z, decode(z, params)


def matenc_forward(x, params: ModelParams, rng: np.random.Generator | None = None, phase: str = "test") -> Tensor:
    """Predicted DMS score(s); shape (B,) for batched input, () otherwise.

    Deterministic unless the config enables ``matenc_noise`` and phase is
    ``train``.
    """
    if params.mode != MATENC:
        raise ValueError("matenc_forward needs matENC parameters")
    x = T.as_tensor(x)
    c = params.config
    h = encode(x, params)
    if c.matenc_noise and phase == "train":
        h = latent(h, c, rng, "train")
    y = fc_stack(h, params, "head.fc", 2)
    return T.reshape(y, y.shape[:-1])


def matenc_from_matvae(vae: ModelParams, rng: np.random.Generator) -> ModelParams:
    """Encoder arrays copied from ``vae`` plus a freshly initialised head."""
    fresh = init_model(vae.config, rng, MATENC)
    tensors = {}
    for name, t in fresh:
        src = vae.tensors.get(name)
        tensors[name] = Tensor(src.data.copy(), requires_grad=True) if src is not None else t
    return ModelParams(vae.config, MATENC, tensors)
