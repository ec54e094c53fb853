"""
Few-step student generators.

Every stage owns its own parameters. A stage maps its input ``x_{t_{i+1}}``
to a clean prediction ``x0_hat``; the distillation loop carries the DDIM
transfer between stages. Two variants exist:

    affine     x0_hat = x_in @ W.T + u
    attention  one masked single-head attention layer over T tokens of c
               channels followed by an affine read-out

Gradients are vector-Jacobian products written out by hand, averaged over
the batch.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from src.attention.config import AttnConfig
from src.attention.maskgen import BlockMask, threshold_mask
from src.attention.prober import FULL_ORACLE, ImportanceMap
from src.tensor.core import RngStream, ensure_finite
from src.utils.errors import ValidationError
from src.utils.logger import get_logger

logger = get_logger(__name__)

STUDENT_VARIANTS = ("affine", "attn")

Params = Dict[str, np.ndarray]


@dataclass
class AttnCache:
    """Forward intermediates for one batch; shapes are (B, T, .)."""

    X: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    P: np.ndarray
    O: np.ndarray
    scale: float


def _softmax_last(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def masked_attention_forward(
    params: Params,
    X: np.ndarray,
    token_mask: Optional[np.ndarray] = None,
    scale: Optional[float] = None,
):
    """``softmax(mask(X Wq (X Wk)^T * scale)) X Wv Wo + U``.

    Args:
        params: Wq, Wk (c, h); Wv (c, h_v); Wo (h_v, c); U (T, c).
        X: (B, T, c) tokens.
        token_mask: (T, T) boolean, True where a query may attend a key.
            Every row must keep at least one key.
        scale: Logit scale, 1/sqrt(h) when omitted.

    Returns:
        (Y, cache) with Y of shape (B, T, c).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValidationError(f"tokens must be (B, T, c), got {X.shape}")
    h = params["Wq"].shape[1]
    scale = 1.0 / np.sqrt(h) if scale is None else scale

    Q = X @ params["Wq"]
    K = X @ params["Wk"]
    V = X @ params["Wv"]
    S = np.einsum("bth,bsh->bts", Q, K) * scale
    if token_mask is not None:
        token_mask = np.asarray(token_mask, dtype=bool)
        if not token_mask.any(axis=1).all():
            raise ValidationError("token mask has a query with no visible keys")
        S = np.where(token_mask[None], S, -np.inf)
    P = _softmax_last(S)
    O = P @ V
    Y = O @ params["Wo"] + params["U"]
    return Y, AttnCache(X=X, Q=Q, K=K, V=V, P=P, O=O, scale=scale)


def masked_attention_backward(params: Params, cache: AttnCache, G: np.ndarray) -> Params:
    """VJP of ``masked_attention_forward`` for the output cotangent ``G``.

    Parameter gradients are summed over the batch. Token-level gradients
    ``K_tokens``, ``V_tokens`` and ``X`` are returned per sample; key and
    value rows no query attends to receive exactly zero.
    """
    G = np.asarray(G, dtype=np.float64)
    P, O = cache.P, cache.O

    dWo = np.einsum("btv,btc->vc", O, G)
    dU = G.sum(axis=0)
    dO = G @ params["Wo"].T
    dP = dO @ np.swapaxes(cache.V, 1, 2)
    dV = np.swapaxes(P, 1, 2) @ dO
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True))
    dQ = dS @ cache.K * cache.scale
    dK = np.swapaxes(dS, 1, 2) @ cache.Q * cache.scale

    X = cache.X
    return {
        "Wq": np.einsum("btc,bth->ch", X, dQ),
        "Wk": np.einsum("btc,bth->ch", X, dK),
        "Wv": np.einsum("btc,btv->cv", X, dV),
        "Wo": dWo,
        "U": dU,
        "K_tokens": dK,
        "V_tokens": dV,
        "X": dQ @ params["Wq"].T + dK @ params["Wk"].T + dV @ params["Wv"].T,
    }


def batch_importance(params: Params, X: np.ndarray, block_size: int, scale: Optional[float] = None) -> ImportanceMap:
    """Batch mean of the exhaustive block-importance maps of the attention logits."""
    X = np.asarray(X, dtype=np.float64)
    _, T, _ = X.shape
    if T % block_size:
        raise ValidationError(f"{T} tokens do not split into blocks of {block_size}")
    h = params["Wq"].shape[1]
    scale = 1.0 / np.sqrt(h) if scale is None else scale
    S = np.einsum("bth,bsh->bts", X @ params["Wq"], X @ params["Wk"]) * scale
    P = _softmax_last(S)
    n_b = T // block_size
    pooled = P.reshape(P.shape[0], n_b, block_size, n_b, block_size).max(axis=(2, 4))
    return ImportanceMap(values=pooled.mean(axis=0).astype(np.float32), provenance=FULL_ORACLE)


class StudentGenerator:
    """Per-stage parameter sets plus forward and VJP."""

    variant = ""

    def __init__(self, n_stages: int, dim: int):
        if n_stages < 1 or dim < 1:
            raise ValidationError(f"need n_stages >= 1 and dim >= 1, got {n_stages}, {dim}")
        self.n_stages = n_stages
        self.dim = dim
        self.params: Dict[int, Params] = {}

    def forward(self, x_in: np.ndarray, stage: int, mask: Optional[BlockMask] = None):
        raise NotImplementedError

    def vjp(self, stage: int, cache, cotangent: np.ndarray) -> Params:
        raise NotImplementedError

    def apply_update(self, stage: int, grads: Params, lr: float) -> None:
        for name, value in self.params[stage].items():
            value -= lr * grads[name]
            ensure_finite(value, f"stage {stage} parameter {name}")

    def parameter_names(self):
        return tuple(self.params[0].keys())

    def copy_params(self) -> Dict[int, Params]:
        return {i: {n: v.copy() for n, v in p.items()} for i, p in self.params.items()}


class AffineStudent(StudentGenerator):
    variant = "affine"

    def __init__(self, n_stages: int, dim: int, params: Optional[Dict[int, Params]] = None):
        super().__init__(n_stages, dim)
        for i in range(n_stages):
            if params is not None:
                p = params[i]
                self.params[i] = {"W": np.array(p["W"], dtype=np.float64), "u": np.array(p["u"], dtype=np.float64)}
            else:
                self.params[i] = {"W": np.eye(dim), "u": np.zeros(dim)}
            if self.params[i]["W"].shape != (dim, dim) or self.params[i]["u"].shape != (dim,):
                raise ValidationError(f"stage {i} parameters do not match dim={dim}")

    def forward(self, x_in, stage, mask=None):
        x_in = np.asarray(x_in, dtype=np.float64)
        p = self.params[stage]
        return x_in @ p["W"].T + p["u"], x_in

    def vjp(self, stage, cache, cotangent):
        n = cotangent.shape[0]
        return {"W": cotangent.T @ cache / n, "u": cotangent.mean(axis=0)}


class AttnStudent(StudentGenerator):
    """Masked attention student over ``tokens`` x ``channels`` samples.

    Masks are block masks over groups of ``block_size`` tokens.
    """

    variant = "attn"

    def __init__(
        self,
        n_stages: int,
        tokens: int,
        channels: int,
        head_dim: int,
        block_size: int,
        rng: RngStream,
    ):
        super().__init__(n_stages, tokens * channels)
        if tokens % block_size:
            raise ValidationError(f"{tokens} tokens do not split into blocks of {block_size}")
        self.tokens = tokens
        self.channels = channels
        self.head_dim = head_dim
        self.block_size = block_size
        for i in range(n_stages):
            gen = rng.split(i).generator()
            self.params[i] = {
                "Wq": 0.5 * gen.standard_normal((channels, head_dim)) / np.sqrt(channels),
                "Wk": 0.5 * gen.standard_normal((channels, head_dim)) / np.sqrt(channels),
                "Wv": gen.standard_normal((channels, head_dim)) / np.sqrt(channels),
                "Wo": gen.standard_normal((head_dim, channels)) / np.sqrt(head_dim),
                "U": np.zeros((tokens, channels)),
            }

    @property
    def n_blocks(self) -> int:
        return self.tokens // self.block_size

    def to_tokens(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).reshape(-1, self.tokens, self.channels)

    def select_mask(self, x_in: np.ndarray, stage: int, cfg: AttnConfig) -> BlockMask:
        """Threshold mask from the batch-mean importance of the current parameters."""
        importance = batch_importance(self.params[stage], self.to_tokens(x_in), self.block_size)
        return threshold_mask(importance, cfg)

    def forward(self, x_in, stage, mask=None):
        token_mask = None if mask is None else mask.token_mask(self.tokens, self.block_size)
        y, cache = masked_attention_forward(self.params[stage], self.to_tokens(x_in), token_mask)
        return y.reshape(-1, self.dim), cache

    def vjp(self, stage, cache, cotangent):
        G = self.to_tokens(cotangent)
        grads = masked_attention_backward(self.params[stage], cache, G)
        n = G.shape[0]
        return {name: grads[name] / n for name in self.params[stage]}


def build_student(variant: str, n_stages: int, dim: int, rng: RngStream, **attn_kwargs) -> StudentGenerator:
    """Construct a student; ``attn_kwargs`` are tokens, channels, head_dim and block_size."""
    if variant == "affine":
        return AffineStudent(n_stages, dim)
    if variant == "attn":
        tokens = attn_kwargs.get("tokens", 8)
        channels = attn_kwargs.get("channels", max(1, dim // tokens))
        if tokens * channels != dim:
            raise ValidationError(f"dim={dim} is not tokens x channels = {tokens} x {channels}")
        return AttnStudent(
            n_stages,
            tokens,
            channels,
            attn_kwargs.get("head_dim", 4),
            attn_kwargs.get("block_size", 2),
            rng,
        )
    raise ValidationError(f"student variant must be one of {STUDENT_VARIANTS}, got {variant!r}")
