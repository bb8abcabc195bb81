"""Signature-informed transformer for long-only allocation.

Tokens live on an (H slices) x (d assets) grid.  Each layer runs causal
multi-head attention along time (assets as batch) and then multi-head
attention across assets (time as batch) whose logits carry an additive bias
built from pairwise cross-signatures.  The last slice feeds a linear head
producing K x d logits that a temperature softmax turns into weights.

All functions take batched features with a leading scenario axis N.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidConfig, ShapeError
from .sigcore import MAX_LEVEL, sig_dim

VARIANTS = ("full", "no_cvar", "no_asset_attn", "no_bias", "no_gate")
N_CALENDAR = 6


@dataclass(frozen=True)
class SitConfig:
    n_assets: int = 8
    lookback: int = 8  # H slices
    horizon: int = 20  # K forecast steps
    slice_len: int = 5  # P observations per slice and per rebalance period
    m_slice: int = 3
    m_cross: int = 2
    n_calendar: int = N_CALENDAR
    d_model: int = 16
    d_ff: int = 16
    n_layers: int = 1
    n_heads: int = 2
    d_beta: int | None = None  # defaults to d_model // n_heads
    hidden_c: int = 16
    tau: float = 1.0
    dropout: float = 0.1
    cvar_alpha: float = 0.95
    variant: str = "full"

    def __post_init__(self):
        if self.d_beta is None:
            object.__setattr__(self, "d_beta", self.d_model // max(self.n_heads, 1))
        problems = []
        for name in ("n_assets", "lookback", "horizon", "slice_len", "d_model", "d_ff",
                     "n_layers", "n_heads", "d_beta", "hidden_c", "n_calendar"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if not 1 <= self.m_slice <= MAX_LEVEL or not 1 <= self.m_cross <= MAX_LEVEL:
            problems.append(f"signature levels must be in 1..{MAX_LEVEL}")
        if not self.tau > 0:
            problems.append("tau must be > 0")
        if not 0 < self.cvar_alpha < 1:
            problems.append("cvar_alpha must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            problems.append("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_sig(self) -> int:
        # slice paths are time-augmented, so they have 2 channels
        return sig_dim(2, self.m_slice)

    @property
    def d_cross(self) -> int:
        return sig_dim(2, self.m_cross)

    @property
    def window(self) -> int:
        """Observations spanned by the lookback window (slices share endpoints)."""
        return self.lookback * self.slice_len + 1

    def replace(self, **changes) -> "SitConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ScenarioFeatures:
    """Model inputs for N scenarios.

    slice_sigs: (N, H, d, d_sig); cross_sigs: (N, d, d, d_cross); calendar: (N, H, F).
    """

    slice_sigs: np.ndarray
    cross_sigs: np.ndarray
    calendar: np.ndarray

    def __post_init__(self):
        if self.slice_sigs.ndim == 3:
            self.slice_sigs = self.slice_sigs[None]
            self.cross_sigs = self.cross_sigs[None]
            self.calendar = self.calendar[None]

    def __len__(self) -> int:
        return self.slice_sigs.shape[0]

    def __getitem__(self, idx) -> "ScenarioFeatures":
        if isinstance(idx, (int, np.integer)):
            idx = slice(idx, idx + 1)
        return ScenarioFeatures(self.slice_sigs[idx], self.cross_sigs[idx], self.calendar[idx])

    def check(self, config: SitConfig) -> None:
        n, h, d = len(self), config.lookback, config.n_assets
        expected = {
            "slice_sigs": (n, h, d, config.d_sig),
            "cross_sigs": (n, d, d, config.d_cross),
            "calendar": (n, h, config.n_calendar),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name}: expected {shape}, got {got}")
        for name in expected:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name} contains non-finite values")


@dataclass
class AllocationOutput:
    mu_hat: Tensor  # (N, K, d) allocation logits
    weights: Tensor  # (N, K, d), rows on the simplex


class Params(OrderedDict):
    """Named trainable tensors; iteration order is the checkpoint order."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def copy(self) -> "Params":
        return Params((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    def n_params(self) -> int:
        return sum(t.size for t in self.values())


# --- initialisation -----------------------------------------------------------------
def _uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


def init_params(config: SitConfig, rng: np.random.Generator | int) -> Params:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    D, F, K = config.d_model, config.n_calendar, config.horizon
    raw: list[tuple[str, np.ndarray]] = []

    def linear(name, n_in, n_out, bias=True):
        raw.append((f"{name}.w", _uniform(rng, n_in, (n_in, n_out))))
        if bias:
            raw.append((f"{name}.b", np.zeros(n_out)))

    def norm(name):
        raw.append((f"{name}.g", np.ones(D)))
        raw.append((f"{name}.b", np.zeros(D)))

    linear("sig_proj", config.d_sig, D)
    linear("date_proj", F, D)
    raw.append(("asset_embed", rng.normal(0.0, 0.02, size=(config.n_assets, D))))
    linear("proj", 3 * D, D, bias=False)
    for i in range(config.n_layers):
        for block in ("temporal", "asset"):
            p = f"layer{i}.{block}"
            for m in ("wq", "wk", "wv", "wo"):
                linear(f"{p}.{m}", D, D, bias=False)
            norm(f"{p}.ln1")
            linear(f"{p}.ff1", D, config.d_ff)
            linear(f"{p}.ff2", config.d_ff, D)
            norm(f"{p}.ln2")
        nb = config.n_heads * config.d_beta
        linear(f"layer{i}.asset.beta1", config.d_cross, config.hidden_c)
        linear(f"layer{i}.asset.beta2", config.hidden_c, nb)
        linear(f"layer{i}.asset.qdyn1", D, config.hidden_c)
        linear(f"layer{i}.asset.qdyn2", config.hidden_c, nb)
    raw.append(("gate_raw", np.array(softplus_inverse(1.0))))
    linear("head", D, K)
    return Params((name, Tensor(value, requires_grad=True, name=name)) for name, value in raw)


# --- building blocks -------------------------------------------------------------------
def _linear(x: Tensor, params: Params, name: str) -> Tensor:
    out = x @ params[f"{name}.w"]
    bias = params.get(f"{name}.b")
    return out if bias is None else out + bias


def _mlp(x: Tensor, params: Params, first: str, second: str) -> Tensor:
    return _linear(ad.relu(_linear(x, params, first)), params, second)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (N, A, S, D) -> (N, A, heads, S, d_k)
    n, a, s, dm = x.shape
    return x.reshape(n, a, s, n_heads, dm // n_heads).transpose(0, 1, 3, 2, 4)


def _merge_heads(x: Tensor) -> Tensor:
    n, a, h, s, dk = x.shape
    return x.transpose(0, 1, 3, 2, 4).reshape(n, a, s, h * dk)


def multi_head_attention(x, params, prefix, n_heads, mask=None, bias=None, trace=None):
    """Self-attention over axis 2 of ``x`` (N, A, S, D).

    ``bias`` is added to the scaled logits and must broadcast to
    (N, A, heads, S, S).  ``mask`` marks logits to drop.
    """
    q = _split_heads(_linear(x, params, f"{prefix}.wq"), n_heads)
    k = _split_heads(_linear(x, params, f"{prefix}.wk"), n_heads)
    v = _split_heads(_linear(x, params, f"{prefix}.wv"), n_heads)
    logits = (q @ k.transpose(0, 1, 2, 4, 3)) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    if mask is not None:
        logits = ad.masked_fill(logits, mask, -1e30)
    attn = ad.softmax(logits, axis=-1)
    if trace is not None:
        trace.setdefault(f"{prefix}.attn", attn.data)
        trace.setdefault(f"{prefix}.logits", logits.data)
    return _linear(_merge_heads(attn @ v), params, f"{prefix}.wo")


def _add_norm(x, sub, params, name, config, train, rng):
    sub = ad.dropout(sub, config.dropout, train, rng)
    return ad.layer_norm(x + sub, params[f"{name}.g"], params[f"{name}.b"])


def _ffn_block(x, params, prefix, config, train, rng):
    ff = _mlp(x, params, f"{prefix}.ff1", f"{prefix}.ff2")
    return _add_norm(x, ff, params, f"{prefix}.ln2", config, train, rng)


def embed(features: ScenarioFeatures, params: Params, config: SitConfig) -> Tensor:
    """Input tokens (N, H, d, d_model) from signature, date and asset embeddings."""
    features.check(config)
    n, h, d = len(features), config.lookback, config.n_assets
    D = config.d_model
    e_sig = _linear(Tensor(features.slice_sigs), params, "sig_proj")
    e_date = _linear(Tensor(features.calendar), params, "date_proj").reshape(n, h, 1, D)
    e_date = ad.broadcast_to(e_date, (n, h, d, D))
    e_asset = ad.broadcast_to(params["asset_embed"], (n, h, d, D))
    return ad.concat([e_sig, e_date, e_asset], axis=-1) @ params["proj.w"]


def temporal_attention(x, params, config, layer=0, train=False, rng=None, trace=None):
    """Causal attention across the H slices of each asset, then add&norm and FFN."""
    prefix = f"layer{layer}.temporal"
    xt = x.transpose(0, 2, 1, 3)  # (N, d, H, D)
    h = xt.shape[2]
    causal = np.triu(np.ones((h, h), dtype=bool), k=1)
    att = multi_head_attention(xt, params, prefix, config.n_heads, mask=causal, trace=trace)
    out = _add_norm(xt, att, params, f"{prefix}.ln1", config, train, rng)
    out = _ffn_block(out, params, prefix, config, train, rng)
    return out.transpose(0, 2, 1, 3)


def gate_value(params: Params, config: SitConfig) -> Tensor | None:
    """Gate multiplying the signature bias: softplus(raw), 1 without gate, None without bias."""
    if config.variant == "no_bias":
        return None
    if config.variant == "no_gate":
        return Tensor(1.0)
    return ad.softplus(params["gate_raw"])


def signature_bias(x, cross_sigs, params, config, layer=0) -> Tensor:
    """Bias B (N, H, heads, d, d) with B[.., j, l] = <q_dyn(x_j), beta(c_jl)> per head."""
    n, h, d, _ = x.shape
    nh, db = config.n_heads, config.d_beta
    prefix = f"layer{layer}.asset"
    beta = _mlp(Tensor(cross_sigs), params, f"{prefix}.beta1", f"{prefix}.beta2")
    beta = beta.reshape(n, d, d, nh, db).transpose(0, 3, 1, 4, 2)  # (N, heads, j, db, l)
    beta = beta.reshape(n, 1, nh, d, db, d)
    q = _mlp(x, params, f"{prefix}.qdyn1", f"{prefix}.qdyn2")
    q = q.reshape(n, h, d, nh, db).transpose(0, 1, 3, 2, 4).reshape(n, h, nh, d, 1, db)
    return (q @ beta).reshape(n, h, nh, d, d)


def asset_attention(x, cross_sigs, params, config, layer=0, train=False, rng=None, trace=None):
    """Signature-informed attention across assets for every slice, then add&norm and FFN."""
    prefix = f"layer{layer}.asset"
    cross_sigs = np.asarray(cross_sigs, dtype=np.float64)
    if cross_sigs.shape[1:] != (config.n_assets, config.n_assets, config.d_cross):
        raise ShapeError(f"cross_sigs shape {cross_sigs.shape} does not match config")
    gamma = gate_value(params, config)
    bias = None
    if gamma is not None:
        raw_bias = signature_bias(x, cross_sigs, params, config, layer)
        if trace is not None:
            trace.setdefault(f"{prefix}.bias", raw_bias.data)
            trace.setdefault(f"{prefix}.gamma", gamma.item())
        bias = raw_bias * gamma
    att = multi_head_attention(x, params, prefix, config.n_heads, bias=bias, trace=trace)
    out = _add_norm(x, att, params, f"{prefix}.ln1", config, train, rng)
    return _ffn_block(out, params, prefix, config, train, rng)


def allocation_weights(mu_hat, tau: float):
    """softmax(mu_hat / tau) over the asset axis; accepts Tensor or ndarray."""
    if isinstance(mu_hat, Tensor):
        return ad.softmax(mu_hat / tau, axis=-1)
    z = np.asarray(mu_hat, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(features: ScenarioFeatures, params: Params, config: SitConfig, train: bool = False,
            rng: np.random.Generator | None = None, trace: dict | None = None) -> AllocationOutput:
    x = embed(features, params, config)
    x = ad.dropout(x, config.dropout, train, rng)
    for layer in range(config.n_layers):
        x = temporal_attention(x, params, config, layer, train, rng, trace)
        if config.variant != "no_asset_attn":
            x = asset_attention(x, features.cross_sigs, params, config, layer, train, rng, trace)
    last = x[:, -1]  # (N, d, D)
    mu_hat = _linear(last, params, "head").transpose(0, 2, 1)  # (N, K, d)
    return AllocationOutput(mu_hat, allocation_weights(mu_hat, config.tau))


# --- attention-row calculus used by the property checks ----------------------------------
def biased_attention_row(scores, q, betas, gamma: float) -> np.ndarray:
    """Softmax over m of scores[m] + gamma * <q, betas[m]> for one query row."""
    z = np.asarray(scores, dtype=np.float64) + gamma * (np.asarray(betas) @ np.asarray(q))
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def directional_derivative_along_query(alpha_l: float, gamma: float, q) -> float:
    """d alpha_l / d beta_l in direction q: gamma * alpha_l (1 - alpha_l) |q|^2."""
    q = np.asarray(q, dtype=np.float64)
    return gamma * alpha_l * (1.0 - alpha_l) * float(q @ q)


def gate_derivative(alpha, bias) -> np.ndarray:
    """d alpha_l / d gamma = alpha_l (b_l - sum_m alpha_m b_m), for all l."""
    alpha, bias = np.asarray(alpha), np.asarray(bias)
    return alpha * (bias - alpha @ bias)


# --- checkpoints -------------------------------------------------------------------------
CHECKPOINT_MAGIC = "SIGALLOC-CHECKPOINT v1"


def save_params(params: Params, path) -> None:
    """Write a text header of ``name<TAB>shape<TAB>offset`` lines, then raw <f8 data.

    Offsets count float64 elements from the start of the data section, which
    begins right after the ``END`` line.
    """
    lines = [CHECKPOINT_MAGIC, str(len(params))]
    offset = 0
    for name, t in params.items():
        shape = ",".join(str(s) for s in t.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        offset += t.size
    lines.append("END")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.values())
    Path(path).write_bytes(header + body)


def load_params(path) -> Params:
    raw = Path(path).read_bytes()
    marker = b"\nEND\n"
    end = raw.find(marker)
    if end < 0:
        raise ValueError(f"{path}: missing checkpoint header terminator")
    header = raw[:end].decode("ascii").split("\n")
    if header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    data = np.frombuffer(raw[end + len(marker):], dtype="<f8")
    params = Params()
    for line in header[2:]:
        name, shape, offset = line.split("\t")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        start = int(offset)
        size = int(np.prod(dims)) if dims else 1
        params[name] = Tensor(data[start:start + size].reshape(dims).copy(), requires_grad=True, name=name)
    if len(params) != int(header[1]):
        raise ValueError(f"{path}: header declares {header[1]} tensors, found {len(params)}")
    return params
