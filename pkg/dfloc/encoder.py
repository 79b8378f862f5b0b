#!/usr/bin/env python3
"""
Encoder - scene context from a ground/satellite token-grid pair

Fixed 2D sinusoidal positional encodings are added to both grids, ground
tokens query satellite tokens through one multi-head cross-attention layer,
and the attended ground tokens are mean-pooled into f_vis. The encoder also
owns the coordinate projection that embeds a pose hypothesis.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

PE_BASE = 10000.0
ACTIVATIONS = ('tanh', 'identity')


@dataclass
class TokenGrid:
    """Flattened [height*width x dim] token sequence of one view."""

    height: int
    width: int
    dim: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height * self.width, self.dim):
            raise ShapeError(f"token grid values {self.values.shape} do not match "
                             f"{self.height}x{self.width}x{self.dim}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("token grid contains non-finite values")

    @property
    def count(self) -> int:
        return self.height * self.width


@dataclass
class VisualContext:
    """Pooled scene vector f_vis; `tensor` is set when it was built on a training tape."""

    f_vis: np.ndarray
    tensor: Optional[ad.Tensor] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return int(self.f_vis.shape[0])


@dataclass
class EncoderParams:
    """
    Cross-attention projections and the coordinate projection.

    Attributes:
        W_Q, W_K, W_V: [d x d]; heads split d into contiguous blocks
        W_c: [2 x embed_dim], b_c: [embed_dim]
        heads: number of attention heads
        coord_activation: 'tanh' (default) or 'identity' after the coordinate projection
    """

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_c: np.ndarray
    b_c: np.ndarray
    heads: int = 4
    coord_activation: str = 'tanh'

    NAMES = ('W_Q', 'W_K', 'W_V', 'W_c', 'b_c')

    def __post_init__(self):
        d = self.W_Q.shape[0]
        if d % self.heads != 0:
            raise ContractError(f"dim {d} is not divisible by {self.heads} heads")
        if self.coord_activation not in ACTIVATIONS:
            raise ContractError(f"coord_activation must be one of {ACTIVATIONS}")

    @property
    def dim(self) -> int:
        return int(self.W_Q.shape[0])

    @property
    def embed_dim(self) -> int:
        return int(self.W_c.shape[1])

    @classmethod
    def initialize(cls, dim: int, heads: int, embed_dim: int, rng: np.random.Generator,
                   coord_activation: str = 'tanh', scale: float = 1.0,
                   tied_qk: bool = False) -> 'EncoderParams':
        """tied_qk starts W_K as a copy of W_Q so initial scores follow token similarity."""
        std = scale / np.sqrt(dim)
        w_q = rng.normal(0.0, std, (dim, dim))
        w_k = w_q.copy() if tied_qk else rng.normal(0.0, std, (dim, dim))
        return cls(
            W_Q=w_q,
            W_K=w_k,
            W_V=rng.normal(0.0, std, (dim, dim)),
            W_c=rng.normal(0.0, scale, (2, embed_dim)),
            b_c=np.zeros(embed_dim),
            heads=heads,
            coord_activation=coord_activation,
        )

    def named(self) -> Dict[str, np.ndarray]:
        return {f"encoder.{n}": getattr(self, n) for n in self.NAMES}

    def replace(self, named: Dict[str, np.ndarray]) -> 'EncoderParams':
        values = {n: np.asarray(named[f"encoder.{n}"], dtype=np.float64) for n in self.NAMES}
        return EncoderParams(heads=self.heads, coord_activation=self.coord_activation, **values)

    def bind(self, tape: ad.Tape, trainable: bool = False) -> 'BoundEncoder':
        make = tape.leaf if trainable else tape.constant
        tensors = {n: make(getattr(self, n), name=f"encoder.{n}") for n in self.NAMES}
        return BoundEncoder(tensors, self.heads, self.coord_activation)


@dataclass
class BoundEncoder:
    """EncoderParams placed on a tape."""

    tensors: Dict[str, ad.Tensor]
    heads: int
    coord_activation: str

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]


def sinusoidal_pe_2d(height: int, width: int, dim: int) -> np.ndarray:
    """
    Fixed 2D positional encoding, [height*width x dim].

    The first dim/2 channels encode the row, the last dim/2 the column; inside
    each half even channels are sin and odd channels cos of position * w_k with
    w_k = 1 / 10000^(2k / (dim/2)).
    """
    if dim % 4 != 0:
        raise ShapeError(f"positional encoding dim must be divisible by 4, got {dim}")
    half = dim // 2
    freqs = np.exp(np.arange(0, half, 2, dtype=np.float64) * (-np.log(PE_BASE) / half))

    def table(n: int) -> np.ndarray:
        pos = np.arange(n, dtype=np.float64)[:, None]
        pe = np.zeros((n, half))
        pe[:, 0::2] = np.sin(pos * freqs)
        pe[:, 1::2] = np.cos(pos * freqs)
        return pe

    pe_rows = table(height)
    pe_cols = table(width)
    pe = np.concatenate([
        np.broadcast_to(pe_rows[:, None, :], (height, width, half)),
        np.broadcast_to(pe_cols[None, :, :], (height, width, half)),
    ], axis=-1)
    return pe.reshape(height * width, dim)


def add_positional_encoding(grid: TokenGrid) -> TokenGrid:
    """Both views share one frequency table."""
    pe = sinusoidal_pe_2d(grid.height, grid.width, grid.dim)
    return TokenGrid(grid.height, grid.width, grid.dim, grid.values + pe)


def _bound(params: Union[EncoderParams, BoundEncoder], tape: ad.Tape) -> BoundEncoder:
    if isinstance(params, EncoderParams):
        return params.bind(tape)
    return params


def _token_tensor(grid: Union[TokenGrid, ad.Tensor], tape: ad.Tape) -> ad.Tensor:
    if isinstance(grid, TokenGrid):
        return tape.constant(grid.values)
    return grid


def _attend(ground: ad.Tensor, satellite: ad.Tensor, bound: BoundEncoder,
            keep_maps: Optional[List[np.ndarray]] = None) -> ad.Tensor:
    d = ground.shape[1]
    heads = bound.heads
    d_k = d // heads
    q = ad.matmul(ground, bound['W_Q'])
    k = ad.matmul(satellite, bound['W_K'])
    v = ad.matmul(satellite, bound['W_V'])
    scale = 1.0 / np.sqrt(d_k)
    out = None
    for h in range(heads):
        lo, hi = h * d_k, (h + 1) * d_k
        scores = ad.mul(ad.matmul(ad.columns(q, lo, hi), ad.transpose(ad.columns(k, lo, hi))), scale)
        weights = ad.softmax_rows(scores)
        if keep_maps is not None:
            keep_maps.append(weights.value.copy())
        head_out = ad.matmul(weights, ad.columns(v, lo, hi))
        out = head_out if out is None else ad.concat(out, head_out, axis=1)
    return out


def cross_attend(ground: Union[TokenGrid, ad.Tensor], satellite: Union[TokenGrid, ad.Tensor],
                 params: Union[EncoderParams, BoundEncoder],
                 tape: Optional[ad.Tape] = None) -> ad.Tensor:
    """
    Multi-head cross-attention, ground tokens as queries, satellite as keys/values.

    Args:
        ground: positionally-encoded ground tokens [N_g x d]
        satellite: positionally-encoded satellite tokens [N_s x d]
        params: EncoderParams, or EncoderParams already bound to the tape
        tape: tape to record on (a fresh one when omitted)

    Returns:
        Attended ground tokens [N_g x d]
    """
    if tape is None:
        if isinstance(ground, ad.Tensor):
            tape = ground.tape
        elif isinstance(params, BoundEncoder):
            tape = params['W_Q'].tape
        else:
            tape = ad.Tape()
    g = _token_tensor(ground, tape)
    s = _token_tensor(satellite, tape)
    if g.shape[1] != s.shape[1]:
        raise ShapeError(f"ground dim {g.shape[1]} != satellite dim {s.shape[1]}")
    bound = _bound(params, tape)
    if bound['W_Q'].shape[0] != g.shape[1]:
        raise ShapeError(f"token dim {g.shape[1]} != encoder dim {bound['W_Q'].shape[0]}")
    return _attend(g, s, bound)


def attention_maps(ground: TokenGrid, satellite: TokenGrid, params: EncoderParams) -> List[np.ndarray]:
    """Per-head [N_g x N_s] attention weights, for diagnostics."""
    tape = ad.Tape()
    maps: List[np.ndarray] = []
    _attend(tape.constant(ground.values), tape.constant(satellite.values),
            params.bind(tape), keep_maps=maps)
    return maps


def encode_scene(ground: Union[TokenGrid, ad.Tensor], satellite: Union[TokenGrid, ad.Tensor],
                 params: Union[EncoderParams, BoundEncoder],
                 tape: Optional[ad.Tape] = None) -> VisualContext:
    """f_vis = mean_pool(cross_attend(ground, satellite))."""
    attended = cross_attend(ground, satellite, params, tape)
    pooled = ad.mean_pool(attended)
    return VisualContext(f_vis=pooled.value.copy(), tensor=pooled)


def _check_coordinates(q: np.ndarray):
    if np.any(np.abs(q) > 1.0):
        raise ContractError("hypothesis coordinates must lie in [-1, 1]")


def embed_batch(q: np.ndarray, bound: BoundEncoder,
                tape: ad.Tape) -> ad.Tensor:
    """Coordinate projection of [B x 2] hypotheses -> [B x embed_dim]."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != 2:
        raise ShapeError(f"hypotheses must be [B x 2], got {q.shape}")
    _check_coordinates(q)
    projected = ad.add(ad.matmul(tape.constant(q), bound['W_c']), bound['b_c'])
    return ad.tanh(projected) if bound.coord_activation == 'tanh' else projected


def embed_hypothesis(q0, params: EncoderParams) -> np.ndarray:
    """16-dim (embed_dim) positional embedding s of one hypothesis."""
    tape = ad.Tape()
    s = embed_batch(np.array([[q0.x, q0.y]]), params.bind(tape), tape)
    return s.value[0].copy()


def fuse(f_vis: Union[VisualContext, np.ndarray], s: np.ndarray) -> np.ndarray:
    """z = [f_vis (+) s]"""
    f = f_vis.f_vis if isinstance(f_vis, VisualContext) else np.asarray(f_vis, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if f.ndim != 1 or s.ndim != 1:
        raise ShapeError(f"fuse needs two vectors, got {f.shape} and {s.shape}")
    tape = ad.Tape()
    return ad.concat(tape.constant(f), tape.constant(s), axis=0).value.copy()


def fuse_batch(f_rows: Sequence[ad.Tensor], s: ad.Tensor) -> ad.Tensor:
    """[B x d] context rows (one per sample) joined with [B x e] embeddings."""
    if len(f_rows) != s.shape[0]:
        raise ShapeError(f"{len(f_rows)} context rows for {s.shape[0]} embeddings")
    return ad.concat(ad.stack_rows(f_rows), s, axis=1)
