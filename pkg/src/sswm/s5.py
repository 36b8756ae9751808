"""Resettable diagonal state-space (S5) sequence layers.

A layer is a diagonal complex linear recurrence x_t = lam_bar*x_{t-1} + b_bar*u_t
with real readout y_t = Re(C x_t) + D u_t, discretized from a continuous system
by zero-order hold with a learned per-state timescale. Episode boundaries reset
the state to its initial value (zero) by gating the decay term, so training
sequences may span episodes without leaking history across them.

Two execution modes are provided with identical results: a sequential scan
(the autodiff/BPTT path) and a parallel associative scan (forward-only fast
path). Blocks follow pre-norm -> scan -> GELU -> residual, and the stacked
internal states double as the deterministic part of a world-model state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm
from .tensor import (
    Tensor,
    add,
    complex_exp,
    complex_mul,
    concat,
    gelu,
    linear_recurrence,
    matmul,
    mul,
    neg,
    reshape,
    transpose,
    tslice,
    tsum,
    exp,
    log,
)


class ConfigError(ValueError):
    """Invalid structural configuration (dimensions, block counts, ...)."""


class DiscretizationError(ValueError):
    """Zero-order hold is singular (a continuous eigenvalue is zero)."""


def normal_hippo_dense(n: int) -> np.ndarray:
    """Dense normal part of the HiPPO-LegS matrix (real part -1/2 + skew)."""
    q = np.sqrt(2.0 * np.arange(n) + 1.0)
    a = np.tril(np.outer(q, q)) - np.diag(np.arange(n, dtype=np.float64))
    p = np.sqrt(np.arange(n) + 0.5)
    return -a + np.outer(p, p)


def normal_hippo_eigen(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (sorted by imaginary part) and unitary eigenvectors.

    The normal matrix is -1/2*I plus a skew-symmetric part, so -1j*(S + I/2)
    is Hermitian and eigh gives an exact unitary basis; all real parts are
    exactly -1/2.
    """
    s = normal_hippo_dense(n)
    skew = s + 0.5 * np.eye(n)
    omega, v = np.linalg.eigh(-1j * skew)
    lam = -0.5 + 1j * omega
    return lam, v


@dataclass
class S5Params:
    """One diagonal SSM layer: recurrence diagonal, input/output maps, timescale.

    The continuous diagonal is parameterized as lam = -exp(log_neg_re) + i*im
    so its real part stays negative under gradient updates. b_mat is the
    (P, H, 2) complex input matrix, c_mat the (H, P, 2) complex output matrix,
    d_vec the real feedthrough and log_delta the per-state log timescale.
    """

    log_neg_re: Tensor
    im: Tensor
    b_mat: Tensor
    c_mat: Tensor
    d_vec: Tensor
    log_delta: Tensor

    @property
    def state_dim(self) -> int:
        return self.log_neg_re.shape[0]

    @property
    def width(self) -> int:
        return self.d_vec.shape[0]

    def lam(self) -> Tensor:
        """Continuous diagonal as a (P, 2) pair tensor."""
        p = self.state_dim
        re = reshape(neg(exp(self.log_neg_re)), (p, 1))
        im = reshape(self.im, (p, 1))
        return concat([re, im], axis=1)

    def lam_value(self) -> np.ndarray:
        return -np.exp(self.log_neg_re.data) + 1j * self.im.data

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.log_neg_re": self.log_neg_re,
            f"{prefix}.im": self.im,
            f"{prefix}.b_mat": self.b_mat,
            f"{prefix}.c_mat": self.c_mat,
            f"{prefix}.d_vec": self.d_vec,
            f"{prefix}.log_delta": self.log_delta,
        }


def hippo_n_init(
    state_dim: int,
    blocks: int,
    width: int,
    rng: np.random.Generator,
    bc_init: str = "eigen",
) -> S5Params:
    """HiPPO-N initialization: J copies of the size-(P/J) normal-matrix spectrum.

    b_mat/c_mat are either projected into the eigenvector basis of each block
    ("eigen", default) or drawn as plain complex Gaussians ("random"); the
    timescale is log-uniform in [1e-3, 1e-1].
    """
    if state_dim % blocks != 0:
        raise ConfigError(f"state_dim {state_dim} not divisible by init blocks {blocks}")
    n = state_dim // blocks
    lam_block, v = normal_hippo_eigen(n)

    im = np.tile(lam_block.imag, blocks)
    log_neg_re = np.full(state_dim, np.log(0.5))

    b_cols = []
    c_cols = []
    for _ in range(blocks):
        if bc_init == "eigen":
            b_blk = v.conj().T @ rng.normal(0.0, 1.0 / np.sqrt(width), size=(n, width))
            c_blk = rng.normal(0.0, 1.0 / np.sqrt(state_dim), size=(width, n)) @ v
        elif bc_init == "random":
            b_blk = (
                rng.normal(0.0, 1.0, size=(n, width)) + 1j * rng.normal(0.0, 1.0, size=(n, width))
            ) / np.sqrt(2.0 * width)
            c_blk = (
                rng.normal(0.0, 1.0, size=(width, n)) + 1j * rng.normal(0.0, 1.0, size=(width, n))
            ) / np.sqrt(2.0 * state_dim)
        else:
            raise ConfigError(f"unknown bc_init {bc_init!r}")
        b_cols.append(b_blk)
        c_cols.append(c_blk)
    b = np.concatenate(b_cols, axis=0)  # (P, H) complex
    c = np.concatenate(c_cols, axis=1)  # (H, P) complex

    def pairs(z: np.ndarray) -> np.ndarray:
        out = np.empty(z.shape + (2,), dtype=np.float64)
        out[..., 0] = z.real
        out[..., 1] = z.imag
        return out

    return S5Params(
        log_neg_re=Tensor(log_neg_re, requires_grad=True),
        im=Tensor(im, requires_grad=True),
        b_mat=Tensor(pairs(b), requires_grad=True),
        c_mat=Tensor(pairs(c), requires_grad=True),
        d_vec=Tensor(rng.normal(0.0, 1.0, size=width), requires_grad=True),
        log_delta=Tensor(rng.uniform(np.log(1e-3), np.log(1e-1), size=state_dim), requires_grad=True),
    )


def discretize(params: S5Params) -> tuple[Tensor, Tensor]:
    """Zero-order hold: lam_bar = exp(delta*lam), b_bar = ((lam_bar-1)/lam)*B."""
    p = params.state_dim
    lam = params.lam()  # (P, 2)
    lam_abs2 = np.abs(params.lam_value()) ** 2
    if lam_abs2.min() < 1e-24:
        raise DiscretizationError("continuous eigenvalue is zero; ZOH coefficient undefined")
    delta = reshape(exp(params.log_delta), (p, 1))
    lam_bar = complex_exp(mul(lam, delta))
    # (lam_bar - 1) / lam via conj(lam)/|lam|^2.
    num = add(lam_bar, Tensor(np.tile([-1.0, 0.0], (p, 1))))
    conj_lam = mul(lam, Tensor(np.tile([1.0, -1.0], (p, 1))))
    inv_abs2 = exp(neg(log(tsum(mul(lam, lam), axis=-1, keepdims=True))))
    coef = complex_mul(num, mul(conj_lam, inv_abs2))  # (P, 2)
    b_bar = complex_mul(reshape(coef, (p, 1, 2)), params.b_mat)  # (P, H, 2)
    return lam_bar, b_bar


def _as_batched(u, resets):
    """Promote (T,H)/(T,) inputs to batched form; report whether we did."""
    squeeze = False
    if u.data.ndim == 2:
        u = reshape(u, (1,) + u.shape)
        squeeze = True
    resets = np.asarray(resets, dtype=bool)
    if resets.ndim == 1:
        resets = resets[None, :]
    return u, resets, squeeze


def _drive(u: Tensor, b_bar: Tensor) -> Tensor:
    """Input drive b_bar @ u_t for all steps at once: (B,T,H) -> (B,T,P,2)."""
    bsz, t, h = u.shape
    p = b_bar.shape[0]
    u2 = reshape(u, (bsz * t, h))
    dre = matmul(u2, transpose(tslice(b_bar, (slice(None), slice(None), 0)), (1, 0)))
    dim = matmul(u2, transpose(tslice(b_bar, (slice(None), slice(None), 1)), (1, 0)))
    pair = concat([reshape(dre, (bsz * t, p, 1)), reshape(dim, (bsz * t, p, 1))], axis=2)
    return reshape(pair, (bsz, t, p, 2))


def _readout(x: Tensor, u: Tensor, params: S5Params) -> Tensor:
    """y_t = Re(C x_t) + D u_t."""
    bsz, t, p, _ = x.shape
    h = params.width
    xre = reshape(tslice(x, (slice(None), slice(None), slice(None), 0)), (bsz * t, p))
    xim = reshape(tslice(x, (slice(None), slice(None), slice(None), 1)), (bsz * t, p))
    cre = transpose(tslice(params.c_mat, (slice(None), slice(None), 0)), (1, 0))
    cim = transpose(tslice(params.c_mat, (slice(None), slice(None), 1)), (1, 0))
    y = add(matmul(xre, cre), neg(matmul(xim, cim)))
    y = add(y, mul(reshape(u, (bsz * t, h)), params.d_vec))
    return reshape(y, (bsz, t, h))


def scan_sequential(params: S5Params, u: Tensor, resets) -> tuple[Tensor, Tensor]:
    """Recurrent scan (autodiff path). u: (T,H) or (B,T,H); resets: bool per step.

    Returns internal states x ((B,)T,P,2) and outputs y ((B,)T,H). A reset at
    step t zeroes the carried state before that step's update.
    """
    u, resets, squeeze = _as_batched(u, resets)
    lam_bar, b_bar = discretize(params)
    gates = 1.0 - resets.astype(np.float64)
    x = linear_recurrence(lam_bar, _drive(u, b_bar), gates)
    y = _readout(x, u, params)
    if squeeze:
        return reshape(x, x.shape[1:]), reshape(y, y.shape[1:])
    return x, y


def scan_parallel(params: S5Params, u: Tensor, resets) -> tuple[Tensor, Tensor]:
    """Associative-scan evaluation; identical contract to scan_sequential.

    Combine rule over (decay, accumulated drive) elements:
    (a1, b1) o (a2, b2) = (a2*a1, a2*b1 + b2), with reset steps contributing
    decay 0. Uses a fixed log2(T)-round doubling schedule, so the result does
    not depend on any worker partitioning. Forward-only: gradients do not flow
    through this path.
    """
    u, resets, squeeze = _as_batched(u, resets)
    with_no_grad_u = Tensor(u.data)
    lam_bar, b_bar = discretize(params)
    bsz, t, _ = u.shape
    p = params.state_dim
    lamc = lam_bar.data[..., 0] + 1j * lam_bar.data[..., 1]
    drive = _drive(with_no_grad_u, Tensor(b_bar.data)).data
    a = np.broadcast_to(lamc, (bsz, t, p)).copy()
    a[resets] = 0.0
    b = drive[..., 0] + 1j * drive[..., 1]
    stride = 1
    while stride < t:
        a_prev = a[:, :-stride]
        b_prev = b[:, :-stride]
        a_cur = a[:, stride:]
        new_a = a.copy()
        new_b = b.copy()
        new_a[:, stride:] = a_cur * a_prev
        new_b[:, stride:] = a_cur * b_prev + b[:, stride:]
        a, b = new_a, new_b
        stride *= 2
    x = np.stack([b.real, b.imag], axis=-1)
    xt = Tensor(x)
    y = _readout(xt, with_no_grad_u, params)
    yt = Tensor(y.data)
    if squeeze:
        return Tensor(x[0]), Tensor(yt.data[0])
    return xt, yt


@dataclass
class ScanElement:
    """(decay, drive) element of the associative scan monoid."""

    a_coef: np.ndarray
    b_accum: np.ndarray

    def combine(self, later: "ScanElement") -> "ScanElement":
        return ScanElement(later.a_coef * self.a_coef, later.a_coef * self.b_accum + later.b_accum)


def s5_step(
    params: S5Params,
    lam_bar: Tensor,
    b_bar: Tensor,
    x_prev: Tensor,
    u: Tensor,
    reset: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """One recurrence step for online use. x_prev: (B,P,2), u: (B,H), reset: (B,) bool."""
    bsz, h = u.shape
    p = params.state_dim
    gate = Tensor((1.0 - np.asarray(reset, dtype=np.float64)).reshape(bsz, 1, 1))
    dre = matmul(u, transpose(tslice(b_bar, (slice(None), slice(None), 0)), (1, 0)))
    dim = matmul(u, transpose(tslice(b_bar, (slice(None), slice(None), 1)), (1, 0)))
    drive = concat([reshape(dre, (bsz, p, 1)), reshape(dim, (bsz, p, 1))], axis=2)
    x = add(mul(complex_mul(lam_bar, x_prev), gate), drive)
    xre = tslice(x, (slice(None), slice(None), 0))
    xim = tslice(x, (slice(None), slice(None), 1))
    cre = transpose(tslice(params.c_mat, (slice(None), slice(None), 0)), (1, 0))
    cim = transpose(tslice(params.c_mat, (slice(None), slice(None), 1)), (1, 0))
    y = add(add(matmul(xre, cre), neg(matmul(xim, cim))), mul(u, params.d_vec))
    return x, y


class S5Block:
    """Pre-norm S5 layer with GELU nonlinearity and a residual connection."""

    def __init__(self, rng, width: int, state_dim: int, init_blocks: int, bc_init: str = "eigen", dropout_p: float = 0.0):
        self.s5 = hippo_n_init(state_dim, init_blocks, width, rng, bc_init=bc_init)
        self.norm = LayerNorm(width)
        self.dropout_p = dropout_p

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.s5.params(f"{prefix}.s5")
        out.update(self.norm.params(f"{prefix}.norm"))
        return out


class S5Stack:
    """Stack of S5 blocks exposing the concatenated internal states.

    The per-step deterministic state h_t is, per block, the realified internal
    state [Re x_t | Im x_t] concatenated over blocks (width n_blocks * 2P); in
    "output" mode h_t is instead the final block's output m_t.
    """

    def __init__(
        self,
        rng,
        width: int,
        state_dim: int,
        n_blocks: int,
        init_blocks: int,
        bc_init: str = "eigen",
        h_mode: str = "state",
    ):
        if n_blocks < 1:
            raise ConfigError("need at least one S5 block")
        if h_mode not in ("state", "output"):
            raise ConfigError(f"unknown h_mode {h_mode!r}")
        self.width = width
        self.state_dim = state_dim
        self.h_mode = h_mode
        self.blocks = [S5Block(rng, width, state_dim, init_blocks, bc_init) for _ in range(n_blocks)]

    @property
    def h_width(self) -> int:
        if self.h_mode == "output":
            return self.width
        return len(self.blocks) * 2 * self.state_dim

    def params(self, prefix: str = "stack") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.b{i}"))
        return out

    def forward(self, u: Tensor, resets, mode: str = "sequential") -> tuple[Tensor, Tensor]:
        """Full-sequence pass. Returns (m, h): outputs and deterministic states."""
        u, resets, squeeze = _as_batched(u, resets)
        scan = scan_sequential if mode == "sequential" else scan_parallel
        bsz, t, _ = u.shape
        h_parts = []
        for blk in self.blocks:
            v = blk.norm(reshape(u, (bsz * t, self.width)))
            x, y = scan(blk.s5, reshape(v, (bsz, t, self.width)), resets)
            u = add(u, reshape(gelu(reshape(y, (bsz * t, self.width))), (bsz, t, self.width)))
            h_parts.append(
                concat(
                    [
                        tslice(x, (slice(None), slice(None), slice(None), 0)),
                        tslice(x, (slice(None), slice(None), slice(None), 1)),
                    ],
                    axis=2,
                )
            )
        m = u
        h = m if self.h_mode == "output" else concat(h_parts, axis=2)
        if squeeze:
            return reshape(m, m.shape[1:]), reshape(h, h.shape[1:])
        return m, h

    def discretized(self) -> list[tuple[Tensor, Tensor]]:
        """Per-block ZOH coefficients, for repeated online stepping."""
        return [discretize(blk.s5) for blk in self.blocks]

    def initial_state(self, batch: int) -> np.ndarray:
        """Zero packed state (the reset target), in the layout step() expects."""
        return np.zeros((batch, len(self.blocks) * 2 * self.state_dim))

    def step(
        self,
        h_prev: Tensor,
        u: Tensor,
        reset: np.ndarray,
        discretized: list[tuple[Tensor, Tensor]] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """One online step from the packed deterministic state h_prev.

        h_prev packs each block's [Re x | Im x]; the return is (m, h) with h in
        the same packed layout ("state" mode is required for stepping).
        """
        if self.h_mode == "output":
            raise ConfigError("online stepping needs h_mode='state' (packed internal states)")
        if discretized is None:
            discretized = self.discretized()
        bsz = u.shape[0]
        p = self.state_dim
        h_parts = []
        for i, blk in enumerate(self.blocks):
            lam_bar, b_bar = discretized[i]
            seg = tslice(h_prev, (slice(None), slice(i * 2 * p, (i + 1) * 2 * p)))
            x_prev = concat(
                [
                    reshape(tslice(seg, (slice(None), slice(0, p))), (bsz, p, 1)),
                    reshape(tslice(seg, (slice(None), slice(p, 2 * p))), (bsz, p, 1)),
                ],
                axis=2,
            )
            v = blk.norm(u)
            x, y = s5_step(blk.s5, lam_bar, b_bar, x_prev, v, reset)
            u = add(u, gelu(y))
            h_parts.append(
                concat(
                    [tslice(x, (slice(None), slice(None), 0)), tslice(x, (slice(None), slice(None), 1))],
                    axis=1,
                )
            )
        return u, concat(h_parts, axis=1)
