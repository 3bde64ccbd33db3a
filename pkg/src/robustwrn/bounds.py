"""Theoretical Lipschitz machinery.

Closed-form bounds for Gaussian-weight chains, spectral norms of dense and
convolutional layers, residual-block and whole-network bounds, per-layer
weight statistics and a Monte Carlo check of extreme singular values of
Gaussian matrices.

Spectral norms are L2 operator norms. BatchNorm is an affine map at
evaluation time; its per-channel multiplier is folded (in absolute value)
into the input channels of the next conv or linear layer, which is exact
for the norm because ReLU's Jacobian is diagonal and commutes with it.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from ._kernels import jacobi_eigvalsh
from .nn import BatchNorm2d, Conv2d, Linear, Network, ResidualBlock

log = logging.getLogger(__name__)

METHODS = ("dense-exact", "power-iteration", "circulant-exact")


# ---------------------------------------------------------------------------
# closed-form terms
# ---------------------------------------------------------------------------


def mlp_bound(widths, sigmas) -> float:
    """prod_j (sqrt(h_{j-1}) + sqrt(h_j)) * sigma_j for a dense chain."""
    widths, sigmas = list(widths), list(sigmas)
    if len(sigmas) != len(widths) - 1:
        raise ValueError(f"need len(sigmas) == len(widths) - 1, got {len(sigmas)} and {len(widths)}")
    if any(h < 1 for h in widths) or any(s < 0 for s in sigmas):
        raise ValueError("widths must be >= 1 and sigmas >= 0")
    out = 1.0
    for h0, h1, s in zip(widths, widths[1:], sigmas):
        out *= (math.sqrt(h0) + math.sqrt(h1)) * s
    return out


def conv_bound(m: int, k: int, w_in: int, w_out: int, sigma: float) -> float:
    """(m sqrt(W_in) + (m - k + 1) sqrt(W_out)) * sigma for one conv layer."""
    if k > m:
        raise ValueError(f"kernel {k} larger than feature map {m}")
    if k < 1 or w_in < 1 or w_out < 1:
        raise ValueError("k, w_in and w_out must be >= 1")
    return (m * math.sqrt(w_in) + (m - k + 1) * math.sqrt(w_out)) * sigma


def residual_bound(conv_spectral_norms, shortcut: float = 1.0) -> float:
    """shortcut + prod of the residual branch's spectral norms (shortcut = 1 for identity)."""
    norms = list(conv_spectral_norms)
    if not norms:
        raise ValueError("a residual block has at least one convolution")
    if any(v < 0 for v in norms):
        raise ValueError("spectral norms must be >= 0")
    return shortcut + math.prod(norms)


# ---------------------------------------------------------------------------
# conv as a matrix
# ---------------------------------------------------------------------------


def conv_operator_matrix(kernel: np.ndarray, m: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Dense matrix of a strided, zero-padded 2-d cross-correlation on m x m inputs.

    Vectorization is channel-major, then row-major over space, on both sides.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    cout, cin, k, _ = kernel.shape
    mo = T.conv_output_size(m, k, stride, padding)
    if mo < 1:
        raise ValueError(f"kernel {k} larger than padded feature map {m + 2 * padding}")
    M = np.zeros((cout, mo, mo, cin, m, m))
    for oy in range(mo):
        for ox in range(mo):
            for i in range(k):
                y = oy * stride + i - padding
                if not 0 <= y < m:
                    continue
                for j in range(k):
                    x = ox * stride + j - padding
                    if 0 <= x < m:
                        M[:, oy, ox, :, y, x] = kernel[:, :, i, j]
    return M.reshape(cout * mo * mo, cin * m * m)


def conv_to_matrix(kernel: np.ndarray, m: int) -> np.ndarray:
    """Doubly block Toeplitz matrix of a valid, stride-1 convolution.

    Shape ``[out * (m-k+1)^2, in * m^2]``; block (o, c) has (m-k+1)^2 rows
    and m^2 columns and holds kernel entries and zeros.
    """
    k = np.asarray(kernel).shape[2]
    if k > m:
        raise ValueError(f"kernel {k} larger than feature map {m}")
    return conv_operator_matrix(kernel, m, 1, 0)


# ---------------------------------------------------------------------------
# spectral norms
# ---------------------------------------------------------------------------


class PowerIterationResult(NamedTuple):
    value: float
    converged: bool
    iterations: int


def power_iteration(matvec, rmatvec, dim: int, tol: float = 1e-6, max_iter: int = 100, seed: int = 0) -> PowerIterationResult:
    """Largest singular value of a linear map given only A v and A^T u.

    Each iteration applies A and A^T once, as plain power iteration does,
    but keeps the whole Krylov basis (Golub-Kahan-Lanczos bidiagonalization
    with full reorthogonalization) and reads the estimate off the small
    bidiagonal matrix. This converges far faster when the top two singular
    values are close. Stops when the Ritz residual is <= tol * estimate.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    u = np.asarray(matvec(v), dtype=np.float64)
    alpha = float(np.linalg.norm(u))
    if alpha == 0.0:
        return PowerIterationResult(0.0, True, 1)
    u /= alpha
    V, U = [v], [u]
    alphas, betas = [alpha], []
    sigma = alpha
    for it in range(1, max_iter + 1):
        w = np.asarray(rmatvec(u), dtype=np.float64) - alpha * v
        for _ in range(2):
            Vm = np.array(V)
            w -= Vm.T @ (Vm @ w)
        beta = float(np.linalg.norm(w))
        B = np.diag(alphas) + np.diag(betas, 1)
        P, svals, _ = np.linalg.svd(B)
        sigma = float(svals[0])
        # Residual of the top Ritz triple: beta_k * |last entry of its left singular vector|.
        if beta * abs(P[-1, 0]) <= tol * sigma or beta <= 1e-14 * sigma or len(V) >= dim:
            return PowerIterationResult(sigma, True, it)
        v = w / beta
        p = np.asarray(matvec(v), dtype=np.float64) - beta * u
        for _ in range(2):
            Um = np.array(U)
            p -= Um.T @ (Um @ p)
        alpha = float(np.linalg.norm(p))
        V.append(v)
        betas.append(beta)
        alphas.append(alpha)
        if alpha <= 1e-14 * sigma:
            B = np.diag(alphas) + np.diag(betas, 1)
            return PowerIterationResult(float(np.linalg.svd(B, compute_uv=False)[0]), True, it)
        u = p / alpha
        U.append(u)
    B = np.diag(alphas) + np.diag(betas, 1)
    return PowerIterationResult(float(np.linalg.svd(B, compute_uv=False)[0]), False, max_iter)


def gram_jacobi_norm(a: np.ndarray) -> float:
    """sqrt of the largest eigenvalue of the smaller Gram matrix, by cyclic Jacobi."""
    a = np.asarray(a, dtype=np.float64)
    g = a @ a.T if a.shape[0] <= a.shape[1] else a.T @ a
    return float(math.sqrt(max(jacobi_eigvalsh(g)[-1], 0.0)))


def _conv_maps(kernel: np.ndarray, m: int, stride: int, padding: int):
    w = T.Tensor(np.asarray(kernel, dtype=np.float64))
    cin = kernel.shape[1]

    def matvec(v):
        return T.conv2d(T.Tensor(v.reshape(1, cin, m, m)), w, stride, padding).data.reshape(-1)

    def rmatvec(u):
        x = T.Tensor(np.zeros((1, cin, m, m)))
        tape = T.Tape(inputs=x, param_grads=False)
        y = T.conv2d(x, w, stride, padding, tape)
        g = tape.nodes[-1].backward(u.reshape(y.shape))[0]
        return g.reshape(-1)

    return matvec, rmatvec, cin * m * m


def spectral_norm(
    weight, shape=None, method: str = "dense-exact", tol: float = 1e-6, max_iter: int = 100, padding: int | None = None
) -> float:
    """Largest singular value of a dense weight or of a conv layer's linear map.

    ``shape`` (a LayerShape or anything with kernel/stride/spatial) gives
    the conv's feature-map size and stride; zero padding defaults to the
    layer's own k // 2, or pass ``padding=0`` for a valid convolution.
    A 4-d kernel with ``shape=None`` is treated as a valid, stride-1
    convolution on a feature map of its own kernel size.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    w = np.asarray(weight.data if isinstance(weight, T.Tensor) else weight, dtype=np.float64)
    if w.ndim == 4:
        k = w.shape[2]
        if shape is None:
            m, stride, pad = k, 1, 0
        else:
            m, stride, pad = shape.spatial, shape.stride, shape.kernel // 2
        if padding is not None:
            pad = int(padding)
        if method == "power-iteration":
            mv, rmv, dim = _conv_maps(w, m, stride, pad)
            res = power_iteration(mv, rmv, dim, tol, max_iter)
            if not res.converged:
                log.warning("power iteration did not converge in %d iterations", max_iter)
            return res.value
        if method == "circulant-exact" and m > 16:
            raise ValueError(f"circulant-exact is limited to m <= 16, got {m}")
        mat = conv_operator_matrix(w, m, stride, pad)
    elif w.ndim == 2:
        if method == "circulant-exact":
            raise ValueError("circulant-exact applies to conv kernels only")
        mat = w
        if method == "power-iteration":
            res = power_iteration(lambda v: mat @ v, lambda u: mat.T @ u, mat.shape[1], tol, max_iter)
            if not res.converged:
                log.warning("power iteration did not converge in %d iterations", max_iter)
            return res.value
    else:
        raise ValueError(f"weight must be 2-d or 4-d, got shape {w.shape}")
    if method == "dense-exact" and mat.size > 10**6:
        raise ValueError(f"dense-exact limited to 1e6 entries, matrix has {mat.size}")
    return float(np.linalg.svd(mat, compute_uv=False)[0])


# ---------------------------------------------------------------------------
# weight statistics
# ---------------------------------------------------------------------------


class SigmaEstimate(NamedTuple):
    mean: float
    std: float
    excess_kurtosis: float
    degenerate: bool


def estimate_sigma(weight) -> SigmaEstimate:
    """Population mean, std and excess kurtosis over all elements."""
    w = np.asarray(weight.data if isinstance(weight, T.Tensor) else weight, dtype=np.float64).reshape(-1)
    if w.size < 2:
        raise ValueError("need at least 2 elements")
    mean = float(w.mean())
    c = w - mean
    var = float(np.mean(c * c))
    if var == 0.0:
        return SigmaEstimate(mean, 0.0, float("nan"), True)
    kurt = float(np.mean(c**4) / var**2 - 3.0)
    return SigmaEstimate(mean, math.sqrt(var), kurt, False)


# ---------------------------------------------------------------------------
# Monte Carlo: extreme singular values of Gaussian matrices
# ---------------------------------------------------------------------------


@dataclass
class MCStats:
    N: int
    n: int
    trials: int
    sigma: float
    mean_lambda_max: float
    mean_lambda_min: float
    se_lambda_max: float
    se_lambda_min: float

    @property
    def bracket(self) -> tuple[float, float]:
        return (self.sigma * (math.sqrt(self.N) - math.sqrt(self.n)), self.sigma * (math.sqrt(self.N) + math.sqrt(self.n)))

    def check(self, n_se: float = 3.0) -> bool:
        """Mean lambda_max inside the bracket with n_se standard errors to spare,
        and mean lambda_min no lower than the bracket's low end minus n_se."""
        lo, hi = self.bracket
        inside = lo + n_se * self.se_lambda_max <= self.mean_lambda_max <= hi - n_se * self.se_lambda_max
        return bool(inside and self.mean_lambda_min >= lo - n_se * self.se_lambda_min)


def mc_singular_values(N: int, n: int, trials: int, seed: int = 0, sigma: float = 1.0) -> MCStats:
    """Extreme singular values of ``trials`` N x n matrices with iid N(0, sigma^2) entries."""
    if not N >= n >= 1:
        raise ValueError(f"need N >= n >= 1, got N={N}, n={n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(trials)
    lmax = np.empty(trials)
    lmin = np.empty(trials)
    for t, ss in enumerate(streams):
        a = sigma * np.random.default_rng(ss).standard_normal((N, n))
        s = np.linalg.svd(a, compute_uv=False)
        lmax[t], lmin[t] = s[0], s[-1]
    se = (lambda v: float(v.std(ddof=1) / math.sqrt(trials)) if trials > 1 else float("inf"))
    return MCStats(N, n, trials, sigma, float(lmax.mean()), float(lmin.mean()), se(lmax), se(lmin))


# ---------------------------------------------------------------------------
# network bounds
# ---------------------------------------------------------------------------


@dataclass
class LayerBound:
    name: str
    kind: str
    m: int
    k: int
    w_in: int
    w_out: int
    sigma_hat: float
    bound_term: float
    spectral_norm: float


@dataclass
class BoundReport:
    """Per-layer terms and whole-network bounds.

    ``product_bound`` multiplies the selected term of every conv and linear
    layer as if the network were a plain chain. ``residual_form_bound``
    combines plain factors (stem, stage projections, classifier) with
    ``n + prod_j L(block_j)`` over the n residual blocks, where each
    ``L(block) = L(shortcut) + prod(branch norms)``.
    ``l1_linf_bound`` converts the L2 bound into one for
    ||f(x) - f(x')||_1 / ||x - x'||_inf by sqrt(outputs * inputs).
    """

    method: str
    per_layer: list[LayerBound]
    block_bounds: list[float]
    product_bound: float
    residual_form_bound: float
    l1_linf_bound: float
    notes: list[str] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer_index", "kind", "m", "k", "w_in", "w_out", "sigma_hat", "bound_term", "spectral_norm"])
            for i, lb in enumerate(self.per_layer):
                w.writerow([i, lb.kind, lb.m, lb.k, lb.w_in, lb.w_out, repr(lb.sigma_hat), repr(lb.bound_term), repr(lb.spectral_norm)])
            w.writerow(["summary", "method", self.method, "", "", "", "", "", ""])
            w.writerow(["summary", "product_bound", "", "", "", "", "", repr(self.product_bound), ""])
            w.writerow(["summary", "residual_form_bound", "", "", "", "", "", repr(self.residual_form_bound), ""])
            w.writerow(["summary", "l1_linf_bound", "", "", "", "", "", repr(self.l1_linf_bound), ""])


def _layer_spectral(weight: np.ndarray, m: int, stride: int, exact_limit: int, seed: int) -> float:
    if weight.ndim == 2:
        if weight.size <= 10**6:
            return float(np.linalg.svd(weight, compute_uv=False)[0])
        return power_iteration(lambda v: weight @ v, lambda u: weight.T @ u, weight.shape[1], 1e-8, 1000, seed).value
    cout, cin, k, _ = weight.shape
    mo = T.conv_output_size(m, k, stride, k // 2)
    rows, cols = cout * mo * mo, cin * m * m
    if min(rows, cols) <= exact_limit and m <= 16:
        return float(np.linalg.svd(conv_operator_matrix(weight, m, stride, k // 2), compute_uv=False)[0])
    mv, rmv, dim = _conv_maps(weight, m, stride, k // 2)
    return power_iteration(mv, rmv, dim, 1e-8, 1000, seed).value


def network_bound(net: Network, method: str = "spectral", exact_limit: int = 1024) -> BoundReport:
    """Lipschitz upper bound of ``net`` in eval mode.

    ``method="spectral"`` measures each layer's spectral norm with adjacent
    BatchNorm multipliers folded in; ``"theorem-sigma"`` substitutes the
    Gaussian-weight terms built from each raw weight's estimated std.
    """
    if method not in ("spectral", "theorem-sigma"):
        raise ValueError(f"method must be spectral|theorem-sigma, got {method!r}")
    m = net.input_shape[1] if len(net.input_shape) == 3 else 1
    per_layer: list[LayerBound] = []
    plain_factors: list[float] = []
    block_bounds: list[float] = []
    pending_bn: np.ndarray | None = None

    def term(name, weight: np.ndarray, m_in: int, stride: int, bn_scale: np.ndarray | None) -> float:
        w = weight.astype(np.float64)
        sig = estimate_sigma(w).std
        if w.ndim == 4:
            cout, cin, k, _ = w.shape
            # The valid-conv formula is applied to the zero-padded map: padding is a
            # norm-1 injection and striding a norm-1 subsampling, so the term still bounds.
            m_pad = m_in + 2 * (k // 2)
            theory = conv_bound(m_pad, k, cin, cout, sig)
            kind, kk = "conv", k
        else:
            cout, cin = w.shape
            theory = (math.sqrt(cin) + math.sqrt(cout)) * sig
            kind, kk = "linear", 1
        folded = w
        if bn_scale is not None:
            s = np.abs(bn_scale)
            folded = w * (s[None, :, None, None] if w.ndim == 4 else s[None, :])
        spec = _layer_spectral(folded, m_in, stride, exact_limit, len(per_layer)) if method == "spectral" else float("nan")
        per_layer.append(LayerBound(name, kind, m_in, kk, cin, cout, sig, theory, spec))
        return spec if method == "spectral" else theory

    n_out = net.num_classes
    for layer in net.layers:
        if isinstance(layer, ResidualBlock):
            s1 = layer.bn1.scale_factors()
            s2 = layer.bn2.scale_factors()
            m_out = T.conv_output_size(m, 3, layer.stride, 1)
            if layer.shortcut is not None:
                skip = term(layer.shortcut.name, layer.shortcut.weight.data, m, layer.stride, s1)
            else:
                skip = 1.0
            a = term(layer.conv1.name, layer.conv1.weight.data, m, layer.stride, s1)
            b = term(layer.conv2.name, layer.conv2.weight.data, m_out, 1, s2)
            block_bounds.append(residual_bound([a, b], shortcut=skip))
            m = m_out
        elif isinstance(layer, Conv2d):
            plain_factors.append(term(layer.name, layer.weight.data, m, layer.stride, pending_bn))
            pending_bn = None
            m = T.conv_output_size(m, layer.k, layer.stride, layer.padding)
        elif isinstance(layer, BatchNorm2d):
            pending_bn = layer.scale_factors()
        elif isinstance(layer, Linear):
            plain_factors.append(term(layer.name, layer.weight.data, 1, 1, pending_bn))
            pending_bn = None
    if pending_bn is not None:
        plain_factors.append(float(np.abs(pending_bn).max()))
    chosen = [lb.spectral_norm if method == "spectral" else lb.bound_term for lb in per_layer]
    product = math.prod(chosen)
    n = len(block_bounds)
    residual = math.prod(plain_factors) * ((n + math.prod(block_bounds)) if n else 1.0)
    d_in = int(np.prod(net.input_shape))
    notes = [] if method == "spectral" else ["theorem-sigma ignores BatchNorm; terms bound expectations over Gaussian weights"]
    return BoundReport(method, per_layer, block_bounds, product, residual, residual * math.sqrt(n_out * d_in), notes)
