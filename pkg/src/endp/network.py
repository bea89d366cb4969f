"""Batched torch implementation of EnDP networks and the deterministic baseline.

Representation between layers: after every nonlinearity a feature map is held
as its ensemble, a tensor of shape (B, C, Q, N) (batch, channels, spatial
positions, members).  Its Gaussian summary is the per-channel sample mean and
(N - 1) sample covariance, with zero covariance across channels.

The first convolution sees a deterministic image, so its output ensemble is
drawn as X (m + L eps), which has exactly the law N(X m, X Sigma X^T) without
factorising the rank-deficient positions x positions covariance.  Later
convolutions see a random input; their output moments are assembled exactly
and sampled through a Cholesky factor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng
from .errors import DimensionMismatch, GeometryMismatch, NotFactorizable, UnknownActivation
from .gaussian import JITTER_LADDER
from .objective import expected_nll_batch, kl_from_factor, kl_from_variances

DEFAULT_DELTA = 0.05
MICRO_BATCH = 4


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

@dataclass
class ConvSpec:
    kernels: int
    size: int
    activation: str = "relu"
    ensemble_size: int | str = 200      # an int, or "auto" for 2 x positions
    pool: tuple[int, int] | None = (2, 2)

    def __post_init__(self):
        if self.pool is not None:
            self.pool = tuple(int(v) for v in self.pool)


@dataclass
class NetworkSpec:
    input_shape: tuple[int, int, int] = (1, 28, 28)
    conv: list[ConvSpec] = field(default_factory=lambda: [ConvSpec(32, 5)])
    num_classes: int = 10
    kind: str = "endp"                  # "endp" or "baseline"
    dense_cov: str = "diag"             # "diag" or "full"
    init_delta: float = DEFAULT_DELTA

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv = [c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.conv]
        if self.kind not in ("endp", "baseline"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dense_cov not in ("diag", "full"):
            raise ValueError(f"dense_cov must be 'diag' or 'full', got {self.dense_cov!r}")
        for c in self.conv:
            if c.activation not in TORCH_ACTIVATIONS:
                raise UnknownActivation(c.activation)
        self.geometry()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        for c in d["conv"]:
            c["pool"] = list(c["pool"]) if c["pool"] is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["conv"] = [ConvSpec(**c) for c in d.get("conv", [])]
        return cls(**d)

    def geometry(self) -> list[dict]:
        """Per conv layer: input shape, conv output side, pooled side, ensemble size."""
        c, h, w = self.input_shape
        out = []
        for i, layer in enumerate(self.conv):
            if h < layer.size or w < layer.size:
                raise GeometryMismatch(f"layer {i}: kernel {layer.size} larger than {h}x{w}")
            ch, cw = h - layer.size + 1, w - layer.size + 1
            ph, pw = ch, cw
            if layer.pool is not None:
                p, s = layer.pool
                if (ch - p) % s or (cw - p) % s or ch < p:
                    raise GeometryMismatch(f"layer {i}: pool {p}/{s} does not tile {ch}x{cw}")
                ph, pw = (ch - p) // s + 1, (cw - p) // s + 1
            n = layer.ensemble_size
            n = 2 * ch * cw if n == "auto" else int(n)
            if n < 2:
                raise ValueError(f"layer {i}: ensemble size must be >= 2")
            out.append(dict(in_shape=(c, h, w), conv_shape=(ch, cw), pooled_shape=(ph, pw),
                            patch=c * layer.size ** 2, ensemble=n))
            c, h, w = layer.kernels, ph, pw
        return out

    @property
    def dense_in(self) -> int:
        g = self.geometry()[-1]
        return self.conv[-1].kernels * g["pooled_shape"][0] * g["pooled_shape"][1]


def sample_size_rule(feature_dim: int) -> int:
    """Ensemble size of twice the feature-map dimension of the preceding convolution."""
    return 2 * int(feature_dim)


def mnist_spec(ensemble_size: int = 1000, kind: str = "endp") -> NetworkSpec:
    return NetworkSpec((1, 28, 28), [ConvSpec(32, 5, "relu", ensemble_size, (2, 2))], 10, kind)


def cifar_spec(kind: str = "endp") -> NetworkSpec:
    """Three blocks of two 3x3 ELU convolutions.  Without padding the third block
    ends on a 1x1 map, so only the first two blocks are pooled."""
    layers = []
    for k, pool in ((32, (2, 2)), (64, (2, 2)), (128, None)):
        layers.append(ConvSpec(k, 3, "elu", "auto", None))
        layers.append(ConvSpec(k, 3, "elu", "auto", pool))
    return NetworkSpec((3, 32, 32), layers, 10, kind)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

TORCH_ACTIVATIONS = {
    "relu": torch.relu,
    "elu": F.elu,
    "selu": torch.selu,
    "swish": F.silu,
    "identity": lambda x: x,
}


def _act_grad(name: str, z: torch.Tensor) -> torch.Tensor:
    if name == "relu":
        return (z > 0).to(z.dtype)
    if name == "elu":
        return torch.where(z > 0, torch.ones_like(z), torch.exp(z.clamp(max=0)))
    if name == "selu":
        return SELU_SCALE * torch.where(z > 0, torch.ones_like(z), SELU_ALPHA * torch.exp(z.clamp(max=0)))
    if name == "swish":
        s = torch.sigmoid(z)
        return s * (1 + z * (1 - s))
    return torch.ones_like(z)


class EnsembleDense(torch.autograd.Function):
    """act(Xk W^T) reduced straight to the statistics the dense layer needs.

    Inputs: Xk (B, K, Q, P) gathered patches, W (K, N, P) kernel ensemble,
    M (H, K, Q) dense weight means.  Outputs: per-position member mean (B, K, Q),
    per-position sum of squares (B, K, Q) and the projection g^T M (B, K, N, H).
    The (B, K, Q, N) activation tensor never leaves this function.
    """

    @staticmethod
    def forward(ctx, Xk, W, M, act):
        z = torch.matmul(Xk, W.transpose(1, 2).unsqueeze(0))
        if act == "relu":
            g = torch.relu_(z)
            saved = g
        else:
            saved = z.clone()
            g = TORCH_ACTIVATIONS[act](z)
        mean = g.mean(-1)
        sumsq = torch.einsum("bkqn,bkqn->bkq", g, g)
        gM = torch.matmul(g.transpose(-1, -2), M.permute(1, 2, 0).unsqueeze(0))
        ctx.act = act
        ctx.save_for_backward(Xk, W, M, saved)
        return mean, sumsq, gM

    @staticmethod
    def backward(ctx, d_mean, d_sumsq, d_gM):
        Xk, W, M, saved = ctx.saved_tensors
        act = ctx.act
        n = W.shape[1]
        if act == "relu":
            g = saved
            grad = (g > 0).to(g.dtype)
        else:
            g = TORCH_ACTIVATIONS[act](saved)
            grad = _act_grad(act, saved)
        dg = torch.matmul(M.permute(1, 2, 0).unsqueeze(0), d_gM.transpose(-1, -2))
        dg.add_((d_mean / n).unsqueeze(-1))
        dg.addcmul_(g, (2 * d_sumsq).unsqueeze(-1))
        dz = dg.mul_(grad)
        dXk = torch.matmul(dz, W.unsqueeze(0)) if ctx.needs_input_grad[0] else None
        dW = torch.matmul(dz.transpose(-1, -2), Xk).sum(0) if ctx.needs_input_grad[1] else None
        dM = torch.einsum("bkqn,bknh->hkq", g, d_gM) if ctx.needs_input_grad[2] else None
        return dXk, dW, dM, None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def lower_factor(raw: torch.Tensor) -> torch.Tensor:
    """Strict lower part of ``raw`` plus a softplus-positive diagonal."""
    return torch.tril(raw, -1) + torch.diag_embed(F.softplus(torch.diagonal(raw, dim1=-2, dim2=-1)))


def window_argmax(mean_map: torch.Tensor, shape: tuple[int, int], p: int, s: int) -> torch.Tensor:
    """Flat kept index per pooling window of (..., H*W) mean maps; ties -> lowest index."""
    h, w = shape
    oh, ow = (h - p) // s + 1, (w - p) // s + 1
    di, dj = torch.meshgrid(torch.arange(p), torch.arange(p), indexing="ij")
    local = (di * w + dj).reshape(-1)
    oi, oj = torch.meshgrid(torch.arange(oh) * s, torch.arange(ow) * s, indexing="ij")
    windows = (oi * w + oj).reshape(-1, 1) + local.reshape(1, -1)        # (Q2, p*p)
    vals = mean_map[..., windows]                                          # (..., Q2, p*p)
    pick = torch.argmax(vals, dim=-1)                                      # first max wins
    return windows.expand(*pick.shape, -1).gather(-1, pick.unsqueeze(-1)).squeeze(-1)


def batched_cholesky(cov: torch.Tensor) -> torch.Tensor:
    """Cholesky of a batch of covariances with the relative jitter ladder."""
    d = cov.shape[-1]
    scale = (torch.diagonal(cov, dim1=-2, dim2=-1).sum(-1) / d).detach()
    scale = torch.where(scale > 0, scale, torch.ones_like(scale))
    eye = torch.eye(d, dtype=cov.dtype)
    out = None
    done = torch.zeros(cov.shape[:-2], dtype=torch.bool)
    for rung in JITTER_LADDER:
        L, info = torch.linalg.cholesky_ex(cov + (rung * scale)[..., None, None] * eye)
        ok = (info == 0) & ~done
        if out is None:
            out = torch.zeros_like(L)
        out = torch.where(ok[..., None, None], L, out)
        done = done | ok
        if bool(done.all()):
            return out
    raise NotFactorizable("jitter ladder exhausted inside the network")


def layer_noise(seed: int, purpose: int, layer: int, step: int, n: int, k: int, width: int,
                dtype=torch.float64) -> torch.Tensor:
    """Standard-normal draws (k, n, width) keyed on (seed, purpose, layer, step, member)."""
    eps = rng.keyed_normals(seed, (purpose, layer, step), n, k * width)
    return torch.from_numpy(eps.reshape(n, k, width).transpose(1, 0, 2).copy()).to(dtype)


@dataclass
class Prediction:
    mu_y: torch.Tensor                   # (B, K) float64
    cov_y: torch.Tensor | None           # (B, K, K) float64, None for the baseline
    mu_f: torch.Tensor | None = None
    cov_f: torch.Tensor | None = None

    @property
    def labels(self) -> torch.Tensor:
        return self.mu_y.argmax(-1)

    @property
    def var_y(self) -> torch.Tensor | None:
        return None if self.cov_y is None else torch.diagonal(self.cov_y, dim1=-2, dim2=-1)


def softmax_moments(mu_f: torch.Tensor, cov_f: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    y = torch.softmax(mu_f, dim=-1)
    J = torch.diag_embed(y) - y.unsqueeze(-1) * y.unsqueeze(-2)
    cov = J @ cov_f @ J.transpose(-1, -2)
    return y, 0.5 * (cov + cov.transpose(-1, -2))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class EnDPNet(nn.Module):
    """Bayesian CNN whose layers carry (mean, covariance) instead of point values."""

    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=torch.float32, fused: bool = True):
        super().__init__()
        self.spec = spec
        self.seed = int(seed)
        self.dtype = dtype
        self.fused = fused
        self.geom = spec.geometry()
        gen = rng.keyed_generator(self.seed, (rng.INIT,))
        raw_diag = inverse_softplus(spec.init_delta)
        self.conv_mean = nn.ParameterList()
        self.conv_raw = nn.ParameterList()
        for layer, g in zip(spec.conv, self.geom):
            P = g["patch"]
            mean = gen.standard_normal((layer.kernels, P)) * math.sqrt(2.0 / P)
            raw = np.zeros((layer.kernels, P, P))
            raw[:, np.arange(P), np.arange(P)] = raw_diag
            self.conv_mean.append(nn.Parameter(torch.tensor(mean, dtype=dtype)))
            if spec.kind == "endp":
                self.conv_raw.append(nn.Parameter(torch.tensor(raw, dtype=dtype)))
        D, H = spec.dense_in, spec.num_classes
        self.dense_mean = nn.Parameter(torch.tensor(gen.standard_normal((H, D)) * math.sqrt(2.0 / D), dtype=dtype))
        if spec.kind == "endp":
            if spec.dense_cov == "diag":
                self.dense_raw = nn.Parameter(torch.full((H, D), raw_diag, dtype=dtype))
            else:
                raw = np.zeros((H, D, D))
                raw[:, np.arange(D), np.arange(D)] = raw_diag
                self.dense_raw = nn.Parameter(torch.tensor(raw, dtype=dtype))

    # -- parameter views ---------------------------------------------------
    @property
    def is_endp(self) -> bool:
        return self.spec.kind == "endp"

    def conv_factor(self, i: int) -> torch.Tensor:
        return lower_factor(self.conv_raw[i])

    def dense_sd(self) -> torch.Tensor:
        return F.softplus(self.dense_raw)

    def dense_factor(self) -> torch.Tensor:
        return lower_factor(self.dense_raw)

    def kl(self, prior_var: float) -> torch.Tensor:
        if not self.is_endp:
            return torch.zeros((), dtype=torch.float64)
        total = torch.zeros((), dtype=torch.float64)
        for i in range(len(self.spec.conv)):
            total = total + kl_from_factor(self.conv_mean[i].double(), self.conv_factor(i).double(), prior_var)
        if self.spec.dense_cov == "diag":
            total = total + kl_from_variances(self.dense_mean.double(), self.dense_sd().double() ** 2, prior_var)
        else:
            total = total + kl_from_factor(self.dense_mean.double(), self.dense_factor().double(), prior_var)
        return total

    # -- forward -----------------------------------------------------------
    def forward(self, x: torch.Tensor, purpose: int = rng.EVAL, step: int = 0) -> Prediction:
        x = x.to(self.dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise DimensionMismatch(f"input {tuple(x.shape[1:])} vs spec {self.spec.input_shape}")
        if not self.is_endp:
            return self._baseline_forward(x)
        return self._endp_forward(x, purpose, step)

    def _baseline_forward(self, x):
        h = x
        for i, (layer, g) in enumerate(zip(self.spec.conv, self.geom)):
            c = g["in_shape"][0]
            h = F.conv2d(h, self.conv_mean[i].view(layer.kernels, c, layer.size, layer.size))
            h = TORCH_ACTIVATIONS[layer.activation](h)
            if layer.pool is not None:
                h = F.max_pool2d(h, layer.pool[0], layer.pool[1])
        logits = h.flatten(1) @ self.dense_mean.T
        return Prediction(torch.softmax(logits.double(), -1), None, logits.double(), None)

    def _kernel_ensemble(self, i: int, purpose: int, step: int) -> torch.Tensor:
        layer, g = self.spec.conv[i], self.geom[i]
        eps = layer_noise(self.seed, purpose, i, step, g["ensemble"], layer.kernels, g["patch"], self.dtype)
        return self.conv_mean[i].unsqueeze(1) + torch.einsum("kpq,knq->knp", self.conv_factor(i), eps)

    def _first_layer_kept(self, patches, W, i):
        """Pool indices (B, K, Q2) from the ensemble mean map, computed without grad."""
        layer, g = self.spec.conv[i], self.geom[i]
        B, Q, P = patches.shape
        K, N = W.shape[0], W.shape[1]
        if layer.pool is None:
            return torch.arange(Q).expand(B, K, Q)
        act = TORCH_ACTIVATIONS[layer.activation]
        with torch.no_grad():
            Wt = W.detach().reshape(K * N, P).T.contiguous()
            mean_map = torch.empty(B, Q, K, dtype=W.dtype)
            for b in range(B):
                mean_map[b] = act(patches[b].detach() @ Wt).view(Q, K, N).mean(-1)
            mean_map = mean_map.transpose(1, 2)
            return window_argmax(mean_map, g["conv_shape"], *layer.pool)

    def _endp_forward(self, x, purpose, step):
        B = x.shape[0]
        spec = self.spec
        n_layers = len(spec.conv)
        samples = None  # (B, C, Q, N) ensemble of the current feature map
        for i, (layer, g) in enumerate(zip(spec.conv, self.geom)):
            W_ens = None
            if i == 0:
                patches = F.unfold(x, layer.size).transpose(1, 2)            # (B, Q, P)
                W_ens = self._kernel_ensemble(i, purpose, step)               # (K, N, P)
                kept = self._first_layer_kept(patches, W_ens, i)              # (B, K, Q2)
                Xk = patches[torch.arange(B)[:, None, None], kept]           # (B, K, Q2, P)
                if (n_layers == 1 and self.fused and spec.dense_cov == "diag"):
                    return self._fused_head(Xk, W_ens, layer.activation)
                z = torch.matmul(Xk, W_ens.transpose(1, 2).unsqueeze(0))     # (B, K, Q2, N)
                samples = TORCH_ACTIVATIONS[layer.activation](z)
            else:
                z = self._random_input_conv(samples, i, purpose, step)       # (B, K, Q, N)
                g_samples = TORCH_ACTIVATIONS[layer.activation](z)
                if layer.pool is not None:
                    kept = window_argmax(g_samples.detach().mean(-1), g["conv_shape"], *layer.pool)
                    idx = kept.unsqueeze(-1).expand(-1, -1, -1, g_samples.shape[-1])
                    g_samples = g_samples.gather(2, idx)
                samples = g_samples
        return self._dense_head(samples)

    def _random_input_conv(self, samples, i, purpose, step):
        """Exact output moments of a random-weight conv on a random input, then resample."""
        mean_z, cov = self.random_input_moments(samples, i)
        N = self.geom[i]["ensemble"]
        K = self.spec.conv[i].kernels
        Lz = batched_cholesky(cov)
        eps = layer_noise(self.seed, purpose, i, step, N, K, cov.shape[-1], cov.dtype)   # (K, N, Q)
        return mean_z.unsqueeze(-1) + torch.einsum("bkqr,knr->bkqn", Lz, eps)

    def random_input_moments(self, samples, i):
        """Per-kernel conv output moments (B, K, Q) and (B, K, Q, Q) from an input ensemble.

        Channels of the input are treated as independent (block-diagonal), matching
        the concatenation of independently propagated kernels.
        """
        layer, g = self.spec.conv[i], self.geom[i]
        B, C, Q_in, N_in = samples.shape
        c, h, w = g["in_shape"]
        k, K = layer.size, layer.kernels
        kk = k * k
        mean_in = samples.mean(-1)                                          # (B, C, Q_in)
        centred = samples - mean_in.unsqueeze(-1)
        xbar = F.unfold(mean_in.view(B, C, h, w), k).transpose(1, 2)        # (B, Q, C*kk)
        # per-member centred patches, channel blocks kept separate: (B, N, Q, C, kk)
        cp = F.unfold(centred.permute(0, 3, 1, 2).reshape(B * N_in, C, h, w), k)
        cp = cp.view(B, N_in, C, kk, -1).permute(0, 1, 4, 2, 3)
        m = self.conv_mean[i].view(K, C, kk)
        Lw = self.conv_factor(i)                                              # (K, P, P)
        Lc = Lw.view(K, C, kk, -1)                                            # rows grouped by channel
        mean_z = xbar @ self.conv_mean[i].T                                   # (B, Q, K)
        xl = torch.einsum("bqp,kpr->bkqr", xbar, Lw)
        cov = xl @ xl.transpose(-1, -2)                                       # x_i^T S_w x_j
        a = torch.einsum("bnqcj,kcj->bnkcq", cp, m)
        cov = cov + torch.einsum("bnkcq,bnkcr->bkqr", a, a) / (N_in - 1)      # m^T S_x,ij m
        t = torch.einsum("bnqcj,kcjr->bnkcqr", cp, Lc)
        cov = cov + torch.einsum("bnkcqr,bnkcsr->bkqs", t, t) / (N_in - 1)    # tr(S_w S_x,ij)
        cov = 0.5 * (cov + cov.transpose(-1, -2))
        return mean_z.transpose(1, 2), cov

    def _dense_head(self, samples) -> Prediction:
        B, C, Q, N = samples.shape
        H = self.spec.num_classes
        M = self.dense_mean.view(H, C, Q)
        mu_b = samples.mean(-1)
        centred = samples - mu_b.unsqueeze(-1)
        A = torch.einsum("bcqn,hcq->bcnh", centred, M).double()
        cov_f = torch.einsum("bcnh,bcng->bhg", A, A) / (N - 1)
        mu_f = torch.einsum("bcq,hcq->bh", mu_b, M).double()
        if self.spec.dense_cov == "diag":
            var_b = (centred ** 2).sum(-1) / (N - 1)
            s2 = (self.dense_sd() ** 2).view(H, C, Q)
            extra = torch.einsum("bcq,hcq->bh", var_b + mu_b ** 2, s2).double()
        else:
            Lh = self.dense_factor().double().view(H, C, Q, -1)               # (H, C, Q, D)
            proj = torch.einsum("bcqn,hcqd->bhcnd", centred.double(), Lh)
            trace_term = (proj ** 2).sum((2, 3, 4)) / (N - 1)
            quad = torch.einsum("bcq,hcqd->bhd", mu_b.double(), Lh)
            extra = trace_term + (quad ** 2).sum(-1)
        cov_f = cov_f + torch.diag_embed(extra)
        cov_f = 0.5 * (cov_f + cov_f.transpose(-1, -2))
        mu_y, cov_y = softmax_moments(mu_f, cov_f)
        return Prediction(mu_y, cov_y, mu_f, cov_f)

    def _fused_head(self, Xk, W_ens, act) -> Prediction:
        H = self.spec.num_classes
        B, K, Q, _ = Xk.shape
        N = W_ens.shape[1]
        M = self.dense_mean.view(H, K, Q)
        mu_b, sumsq, gM = EnsembleDense.apply(Xk, W_ens, M, act)
        muM = torch.einsum("bkq,hkq->bkh", mu_b, M)
        A = (gM - muM.unsqueeze(2)).double()
        cov_f = torch.einsum("bknh,bkng->bhg", A, A) / (N - 1)
        var_b = ((sumsq - N * mu_b ** 2) / (N - 1)).clamp_min(0)
        s2 = (self.dense_sd() ** 2).view(H, K, Q)
        extra = torch.einsum("bkq,hkq->bh", var_b + mu_b ** 2, s2).double()
        cov_f = cov_f + torch.diag_embed(extra)
        cov_f = 0.5 * (cov_f + cov_f.transpose(-1, -2))
        mu_f = muM.sum(1).double()
        mu_y, cov_y = softmax_moments(mu_f, cov_f)
        return Prediction(mu_y, cov_y, mu_f, cov_f)

    # -- losses --------------------------------------------------------------
    def example_losses(self, x, labels, purpose=rng.TRAIN, step=0, var_floor=1e-3,
                       loss: str | None = None) -> tuple[torch.Tensor, Prediction]:
        """Per-example data term: expected NLL (EnDP) or cross-entropy (baseline)."""
        pred = self(x, purpose, step)
        loss = loss or ("nll" if self.is_endp else "ce")
        if loss == "ce":
            return F.cross_entropy(pred.mu_f, labels.long(), reduction="none"), pred
        var = pred.var_y if pred.var_y is not None else torch.zeros_like(pred.mu_y)
        return expected_nll_batch(pred.mu_y, var, labels, var_floor), pred

    @torch.no_grad()
    def predict(self, x: torch.Tensor, batch: int = 64, purpose: int = rng.EVAL, step: int = 0) -> Prediction:
        parts = [self(x[s:s + batch], purpose, step) for s in range(0, x.shape[0], batch)]
        cat = lambda name: None if getattr(parts[0], name) is None else torch.cat([getattr(p, name) for p in parts])
        return Prediction(cat("mu_y"), cat("cov_y"), cat("mu_f"), cat("cov_f"))

    # -- diagnostics -----------------------------------------------------------
    @torch.no_grad()
    def audit_covariances(self, x0: torch.Tensor, purpose: int = rng.TRAIN, step: int = 0) -> list[np.ndarray]:
        """Covariances materialised for one image: kernel covariances and pooled feature maps."""
        if not self.is_endp:
            return []
        out = []
        for i in range(len(self.spec.conv)):
            L = self.conv_factor(i).double()
            out.append((L @ L.transpose(-1, -2)).numpy())
        layer = self.spec.conv[0]
        x0 = x0.to(self.dtype).reshape(1, *self.spec.input_shape)
        patches = F.unfold(x0, layer.size).transpose(1, 2)
        W = self._kernel_ensemble(0, purpose, step)
        kept = self._first_layer_kept(patches, W, 0)
        Xk = patches[torch.zeros(1, dtype=torch.long)[:, None, None], kept]
        g = TORCH_ACTIVATIONS[layer.activation](torch.matmul(Xk, W.transpose(1, 2).unsqueeze(0)))[0].double()
        gc = g - g.mean(-1, keepdim=True)
        out.append((gc @ gc.transpose(-1, -2) / (g.shape[-1] - 1)).numpy())
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
