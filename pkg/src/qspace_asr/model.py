"""Desk-scale diffusion transformer over spatial-angular token grids.

Each gradient direction contributes one group of image-patch tokens;
attention runs jointly over all direction/patch tokens. A lightweight
MLP maps (b-vector, timestep embedding) to six per-direction
scale/shift/gate vectors that modulate every block's attention and MLP
paths. Gates and the output head start at exactly zero, so a fresh
model is the identity on tokens and predicts zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .phantom import AngularMask, GradientTable
from .sh import dirs_to_angles


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    heads: int = 4
    dim: int = 128
    patch: int = 8
    mlp_ratio: int = 4
    max_angular_freq: int = 16
    max_timestep: int = 1000
    init_seed: int = 0
    dtype: str = "float32"
    conditioning: str = "bvec"  # "bvec" or "neutral" (modulation forced to identity)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.conditioning not in ("bvec", "neutral"):
            raise ModelError(f"unknown conditioning {self.conditioning!r}")
        if 4 * self.max_angular_freq > self.dim:
            raise ModelError("4 * max_angular_freq must fit in dim")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def parameter_count(config: ModelConfig) -> int:
    """Closed-form total parameter count for a config."""
    d, p2 = config.dim, config.patch**2
    hidden = config.mlp_ratio * d
    embed = p2 * d + d
    mask = 2 * d
    time_token = d * d + d
    cond = (3 + d) * d + d + d * 6 * d + 6 * d
    block = 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    head = d * p2 + p2
    return embed + mask + time_token + cond + config.depth * block + head


# ---------------------------------------------------------------------------
# Fixed encodings
# ---------------------------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _encode_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half) / half))
    args = np.outer(pos, omega)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def spatial_encoding(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2D sinusoidal encoding per patch position, shape (P, dim)."""
    out = np.zeros((grid_h, grid_w, dim))
    row = _encode_1d(np.arange(grid_h), dim // 2)
    col = _encode_1d(np.arange(grid_w), dim - dim // 2)
    out[..., : dim // 2] = row[:, None, :]
    out[..., dim // 2:] = col[None, :, :]
    return out.reshape(grid_h * grid_w, dim)


def angular_encoding(bvecs: np.ndarray, dim: int, n_freqs: int) -> np.ndarray:
    """Fixed sinusoidal features of each direction's spherical angles.

    Convention: theta = arccos(z), phi = atan2(y, x); antipodal directions
    map to (pi - theta, phi + pi) and therefore get distinct encodings.
    Per-direction norm is constant (sin/cos pairs), zero-padded to dim.
    """
    theta, phi = dirs_to_angles(np.asarray(bvecs, dtype=np.float64))
    freqs = np.arange(1, n_freqs + 1, dtype=np.float64)
    feats = [np.sin(freqs * theta[:, None]), np.cos(freqs * theta[:, None]),
             np.sin(freqs * phi[:, None]), np.cos(freqs * phi[:, None])]
    enc = np.concatenate(feats, axis=1)
    out = np.zeros((enc.shape[0], dim))
    out[:, : enc.shape[1]] = enc
    return out


# ---------------------------------------------------------------------------
# Token grid rearrangement
# ---------------------------------------------------------------------------

def patchify_tokens(x: ad.Tensor, patch: int) -> ad.Tensor:
    """(B, H, W, N) -> (B, N, P, patch*patch) token grid (pure rearrangement)."""
    b, h, w, n = x.shape
    if h % patch or w % patch:
        raise ModelError(f"spatial dims {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = ad.reshape(x, (b, gh, patch, gw, patch, n))
    x = ad.transpose(x, (0, 5, 1, 3, 2, 4))
    return ad.reshape(x, (b, n, gh * gw, patch * patch))


def unpatchify_tokens(tokens: ad.Tensor, patch: int, height: int, width: int) -> ad.Tensor:
    """Exact inverse of `patchify_tokens` for matching geometry."""
    b, n, p, _ = tokens.shape
    gh, gw = height // patch, width // patch
    if p != gh * gw:
        raise ModelError(f"{p} patches incompatible with {height}x{width}/{patch}")
    x = ad.reshape(tokens, (b, n, gh, gw, patch, patch))
    x = ad.transpose(x, (0, 2, 4, 3, 5, 1))
    return ad.reshape(x, (b, height, width, n))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ModulationParams:
    """Six per-direction modulation vectors (Tensors, shape (B, N, D))."""

    gamma_attn: ad.Tensor
    beta_attn: ad.Tensor
    gate_attn: ad.Tensor
    gamma_mlp: ad.Tensor
    beta_mlp: ad.Tensor
    gate_mlp: ad.Tensor


class DiffusionTransformer:
    """Noise predictor conditioned on direction geometry, mask and timestep."""

    def __init__(self, config: ModelConfig, params: dict[str, ad.Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, config: ModelConfig) -> "DiffusionTransformer":
        rng = np.random.default_rng(config.init_seed)
        dt = config.np_dtype
        d, p2 = config.dim, config.patch**2
        hidden = config.mlp_ratio * d

        params: dict[str, ad.Tensor] = {}

        def par(name, shape, std=None, zero=False):
            if zero:
                vals = np.zeros(shape)
            else:
                if std is None:
                    std = 1.0 / np.sqrt(shape[0]) if len(shape) > 1 else 0.02
                vals = rng.normal(0.0, std, size=shape)
            params[name] = ad.tensor(vals.astype(dt), requires_grad=True, name=name)

        par("embed.weight", (p2, d))
        par("embed.bias", (d,))
        par("mask_embed", (2, d), std=0.02)
        par("time_token.weight", (d, d))
        par("time_token.bias", (d,))
        par("cond.w1", (3 + d, d))
        par("cond.b1", (d,))
        par("cond.w2", (d, 6 * d), zero=True)   # all six modulation parts start at 0
        par("cond.b2", (6 * d,), zero=True)
        for i in range(config.depth):
            for nm in ("wq", "wk", "wv", "wo"):
                par(f"blocks.{i}.attn.{nm}", (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                par(f"blocks.{i}.attn.{nm}", (d,))
            par(f"blocks.{i}.mlp.w1", (d, hidden))
            par(f"blocks.{i}.mlp.b1", (hidden,))
            par(f"blocks.{i}.mlp.w2", (hidden, d))
            par(f"blocks.{i}.mlp.b2", (d,))
        par("head.weight", (d, p2), zero=True)  # fresh model predicts zero noise
        par("head.bias", (p2,), zero=True)

        model = cls(config, params)
        assert model.n_parameters == parameter_count(config)
        return model

    @property
    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, v in self.params.items():
            if k not in state:
                raise ModelError(f"missing parameter {k!r} in state")
            if state[k].shape != v.values.shape:
                raise ModelError(
                    f"parameter {k!r}: shape {state[k].shape} vs {v.values.shape}"
                )
            v.values = state[k].astype(v.values.dtype).copy()

    # -- conditioning -------------------------------------------------------

    def modulation_params(self, bvecs: np.ndarray, t: np.ndarray | int) -> ModulationParams:
        """Map (b-vectors, timestep embedding) to the six modulation vectors.

        bvecs (N, 3) unit; t scalar or (B,). Output tensors are (B, N, D),
        broadcast over patches by the block forward.
        """
        bvecs = np.atleast_2d(np.asarray(bvecs, dtype=np.float64))
        norms = np.linalg.norm(bvecs, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ModelError("b-vectors must be unit length")
        dt = self.config.np_dtype
        t_arr = np.atleast_1d(np.asarray(t))
        b, n, d = len(t_arr), bvecs.shape[0], self.config.dim
        t_emb = timestep_embedding(t_arr, d)
        cond_in = np.concatenate(
            [np.broadcast_to(bvecs, (b, n, 3)),
             np.broadcast_to(t_emb[:, None, :], (b, n, d))], axis=-1
        ).astype(dt)
        h = ad.gelu(ad.add(ad.matmul(ad.tensor(cond_in), self.params["cond.w1"]),
                           self.params["cond.b1"]))
        mods = ad.add(ad.matmul(h, self.params["cond.w2"]), self.params["cond.b2"])
        parts = ad.split(mods, 6, axis=-1)
        return ModulationParams(*parts)

def _per_direction(vec: ad.Tensor, p: int) -> ad.Tensor:
    """(B, N, D) modulation vector -> (B, N, P, D) broadcast over patches."""
    b, n, d = vec.shape
    return ad.expand(ad.reshape(vec, (b, n, 1, d)), (b, n, p, d))


def _attention(model: DiffusionTransformer, x: ad.Tensor, i: int) -> ad.Tensor:
    cfg = model.config
    b, s, d = x.shape
    heads, dh = cfg.heads, d // cfg.heads
    p = model.params

    def proj(nm):
        z = ad.add(ad.matmul(x, p[f"blocks.{i}.attn.w{nm}"]),
                   p[f"blocks.{i}.attn.b{nm}"])
        z = ad.reshape(z, (b, s, heads, dh))
        return ad.transpose(z, (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    q = ad.scale(q, 1.0 / np.sqrt(dh))  # cheaper than scaling the S x S scores
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, s, d))
    return ad.add(ad.matmul(out, p[f"blocks.{i}.attn.wo"]),
                  p[f"blocks.{i}.attn.bo"])


def _mlp(model: DiffusionTransformer, x: ad.Tensor, i: int) -> ad.Tensor:
    p = model.params
    h = ad.gelu(ad.add(ad.matmul(x, p[f"blocks.{i}.mlp.w1"]),
                       p[f"blocks.{i}.mlp.b1"]))
    return ad.add(ad.matmul(h, p[f"blocks.{i}.mlp.w2"]), p[f"blocks.{i}.mlp.b2"])


def dit_block_forward(model: DiffusionTransformer, tokens: ad.Tensor,
                      mods: ModulationParams, i: int) -> ad.Tensor:
    """One modulated pre-norm block on a (B, N, P, D) token grid.

    h <- h + g_attn * Attn(gamma_attn * LN(h) + beta_attn), then the same
    with the MLP path. All-zero gates make the block the identity.
    """
    b, n, p, d = tokens.shape

    def modulated(x, gamma, beta):
        return ad.add(ad.mul(_per_direction(gamma, p), ad.layer_norm(x)),
                      _per_direction(beta, p))

    x = modulated(tokens, mods.gamma_attn, mods.beta_attn)
    x = ad.reshape(x, (b, n * p, d))
    attn_out = ad.reshape(_attention(model, x, i), (b, n, p, d))
    tokens = ad.add(tokens, ad.mul(_per_direction(mods.gate_attn, p), attn_out))

    x = modulated(tokens, mods.gamma_mlp, mods.beta_mlp)
    mlp_out = _mlp(model, x, i)
    tokens = ad.add(tokens, ad.mul(_per_direction(mods.gate_mlp, p), mlp_out))
    return tokens


def predict_noise(model: DiffusionTransformer, x_t, x_obs, mask, t,
                  table: GradientTable) -> ad.Tensor:
    """Predict the injected noise over all directions.

    x_t, x_obs: (B, H, W, N) arrays (or x_t a Tensor when guidance needs
    gradients with respect to it). mask: AngularMask or (B, N)/(N,) bool,
    True = observed. Observed direction tokens carry x_obs content, masked
    ones carry x_t content; mask state and timestep enter as additive token
    embeddings, direction geometry through the modulation MLP and the
    angular encoding. t: int or (B,) ints in [1, max_timestep].
    """
    cfg = model.config
    dt = cfg.np_dtype
    x_t = x_t if isinstance(x_t, ad.Tensor) else ad.tensor(np.asarray(x_t, dtype=dt))
    b, h, w, n = x_t.shape
    if len(table) != n:
        raise ModelError(f"table has {len(table)} directions, data has {n}")

    if isinstance(mask, AngularMask):
        observed = mask.observed
    else:
        observed = np.asarray(mask, dtype=bool)
    observed = np.broadcast_to(observed, (b, n))

    t_arr = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (b,))
    if t_arr.min() < 1 or t_arr.max() > cfg.max_timestep:
        raise ModelError(
            f"timestep outside [1, {cfg.max_timestep}]: {t_arr.min()}..{t_arr.max()}"
        )

    m = np.broadcast_to(observed.astype(dt)[:, None, None, :], x_t.shape).copy()
    x_obs_c = ad.tensor(np.asarray(x_obs, dtype=dt))
    x_inp = ad.add(ad.mul(x_obs_c, ad.tensor(m)), ad.mul(x_t, ad.tensor(1.0 - m)))

    tokens = patchify_tokens(x_inp, cfg.patch)
    tokens = ad.add(ad.matmul(tokens, model.params["embed.weight"]),
                    model.params["embed.bias"])
    _, _, p, d = tokens.shape

    spatial = spatial_encoding(h // cfg.patch, w // cfg.patch, d).astype(dt)
    angular = angular_encoding(table.bvecs, d, cfg.max_angular_freq).astype(dt)
    tokens = ad.add(tokens, ad.tensor(spatial))
    tokens = ad.add(tokens, ad.tensor(
        np.broadcast_to(angular[:, None, :], (n, p, d)).copy()))

    sel = np.zeros((b, n, 2), dtype=dt)
    sel[..., 1] = observed
    sel[..., 0] = ~observed
    mask_tok = ad.matmul(ad.tensor(sel), model.params["mask_embed"])
    tokens = ad.add(tokens, _per_direction(mask_tok, p))

    t_emb = timestep_embedding(t_arr, d).astype(dt)
    time_tok = ad.add(ad.matmul(ad.tensor(t_emb), model.params["time_token.weight"]),
                      model.params["time_token.bias"])
    tokens = ad.add(tokens, ad.expand(ad.reshape(time_tok, (b, 1, 1, d)),
                                      (b, n, p, d)))

    if cfg.conditioning == "bvec":
        mods = model.modulation_params(table.bvecs, t_arr)
    else:
        ones = ad.tensor(np.ones((b, n, d), dtype=dt))
        zeros = ad.tensor(np.zeros((b, n, d), dtype=dt))
        mods = ModulationParams(ones, zeros, ones, ones, zeros, ones)

    for i in range(cfg.depth):
        tokens = dit_block_forward(model, tokens, mods, i)

    # no final norm: the head must be able to pass patch magnitudes through
    # unchanged (at high noise levels the optimal prediction is close to a
    # copy of the noisy input tokens)
    out = ad.add(ad.matmul(tokens, model.params["head.weight"]),
                 model.params["head.bias"])
    return unpatchify_tokens(out, cfg.patch, h, w)
