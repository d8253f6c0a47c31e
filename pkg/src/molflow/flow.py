"""Invertible generative model over one-hot molecule tensors.

Two stacked affine-coupling flows: a bond flow on the (n, n, m) bond tensor
with alternating channel masks, and an atom flow on the (n, l) atom tensor
with alternating row masks whose scale/translation networks are additionally
conditioned on the discrete bond tensor through two rounds of neighborhood
aggregation. Scales go through a sigmoid, so every factor lies in (0, 1)
and the inverse is exact algebra. Training maximizes the exact
log-likelihood: standard-normal density of the latent plus the accumulated
log-determinants of both tracks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, SeededRng, Tensor, adam_step
from .chem import Molecule, from_tensors, to_tensors, valency_check

Array = np.ndarray


@dataclass(frozen=True)
class FlowConfig:
    n_max: int = 9
    n_atom_types: int = 5   # elements plus the padding type
    n_bond_types: int = 4   # no-bond plus the three bond orders
    atom_layers: int = 6
    bond_layers: int = 6
    atom_hidden: int = 64
    bond_hidden: int = 64
    noise_scale: float = 0.4
    temperature: float = 0.7

    @property
    def d_atom(self) -> int:
        return self.n_max * self.n_atom_types

    @property
    def d_bond(self) -> int:
        return self.n_max * self.n_max * self.n_bond_types

    @property
    def d_total(self) -> int:
        return self.d_atom + self.d_bond


@dataclass(frozen=True)
class LatentVector:
    """Flow latent, atoms first: z = z_atom || z_bond."""

    z_atom: Array
    z_bond: Array

    @property
    def z(self) -> Array:
        return np.concatenate([self.z_atom, self.z_bond])

    @staticmethod
    def split(z: Array, config: FlowConfig) -> "LatentVector":
        if z.shape != (config.d_total,):
            raise ValueError(f"latent length {z.shape} != ({config.d_total},)")
        return LatentVector(z[: config.d_atom].copy(), z[config.d_atom:].copy())


@dataclass
class Mlp:
    """Two-layer perceptron parameters (tanh hidden activation)."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array

    def named(self, prefix: str):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


def mlp_init(rng: SeededRng, d_in: int, d_hidden: int, d_out: int,
             zero_last: bool = True, w1_scale: float = 1.0) -> Mlp:
    w1 = rng.normal((d_in, d_hidden), scale=w1_scale / np.sqrt(d_in))
    b1 = np.zeros(d_hidden)
    if zero_last:
        w2 = np.zeros((d_hidden, d_out))
    else:
        w2 = rng.normal((d_hidden, d_out), scale=1.0 / np.sqrt(d_hidden))
    b2 = np.zeros(d_out)
    return Mlp(w1, b1, w2, b2)


def apply_mlp(p: Mlp, x):
    h = ad.tanh(x @ p.w1 + p.b1)
    return h @ p.w2 + p.b2


@dataclass
class CouplingLayer:
    """One affine coupling step.

    ``kind`` selects the masking scheme: atom layers keep rows of one
    parity and transform the rest; bond layers keep channels of one parity.
    ``index`` parity decides which half is kept, so stacking layers with
    consecutive indices transforms every coordinate.
    """

    kind: str   # "atom" | "bond"
    index: int
    mlp: Mlp

    def named(self, prefix: str):
        return self.mlp.named(prefix)


@dataclass
class FlowParams:
    """Trainable state of both flow tracks (the reverse-generation
    parameters are these same arrays)."""

    config: FlowConfig
    atom: list[CouplingLayer] = field(default_factory=list)
    bond: list[CouplingLayer] = field(default_factory=list)

    def named_params(self) -> list[tuple[str, Array]]:
        out = []
        for i, layer in enumerate(self.atom):
            out += layer.named(f"flow.atom.{i}")
        for i, layer in enumerate(self.bond):
            out += layer.named(f"flow.bond.{i}")
        return out

    def set_param(self, name: str, value: Array) -> None:
        parts = name.split(".")
        layer = getattr(self, parts[1])[int(parts[2])]
        setattr(layer.mlp, parts[3], value)

    def traced(self) -> tuple["FlowParams", list[Tensor]]:
        """Copy with Tensor leaves, plus the leaf list in named order."""
        leaves: list[Tensor] = []

        def trace_mlp(m: Mlp) -> Mlp:
            ts = [Tensor(a) for a in (m.w1, m.b1, m.w2, m.b2)]
            leaves.extend(ts)
            return Mlp(*ts)

        atom = [CouplingLayer(l.kind, l.index, trace_mlp(l.mlp)) for l in self.atom]
        bond = [CouplingLayer(l.kind, l.index, trace_mlp(l.mlp)) for l in self.bond]
        return FlowParams(self.config, atom, bond), leaves


def init_flow(config: FlowConfig, rng: SeededRng, zero_last: bool = True) -> FlowParams:
    """Fresh parameters. With `zero_last` the scale/translation nets output
    exactly zero, so every untrained layer is z = 0.5 * x (sigma(0) = 0.5)."""
    l = config.n_atom_types
    m = config.n_bond_types
    n_channels = m - 1  # bond-order channels used for conditioning
    atom_in = l + 2 * n_channels * l
    atom = [
        CouplingLayer("atom", i, mlp_init(rng.spawn(f"atom{i}"), atom_in,
                                          config.atom_hidden, 2 * l, zero_last))
        for i in range(config.atom_layers)
    ]
    kept = (m + 1) // 2
    bond_in = config.n_max * config.n_max * kept
    bond_out = 2 * config.n_max * config.n_max * (m - kept)
    bond = [
        CouplingLayer("bond", i, mlp_init(rng.spawn(f"bond{i}"), bond_in,
                                          config.bond_hidden, bond_out, zero_last))
        for i in range(config.bond_layers)
    ]
    return FlowParams(config, atom, bond)


# ---------------------------------------------------------------------------
# dequantization and discretization
# ---------------------------------------------------------------------------


def dequantize(onehot: Array, noise_scale: float, rng: SeededRng) -> Array:
    """x = onehot * (1 - noise_scale) + U(0, noise_scale); argmax recovers
    the one-hot input."""
    if not 0.0 < noise_scale < 1.0:
        raise ValueError("noise_scale must lie in (0, 1)")
    return onehot * (1.0 - noise_scale) + rng.uniform(0.0, noise_scale, onehot.shape)


def discretize_bonds(xb: Array) -> Array:
    """Symmetrize-then-argmax a continuous bond tensor into a one-hot one.

    The (i,j) and (j,i) logits are averaged before the argmax, and the
    diagonal is forced to the no-bond channel, so the result is exactly
    symmetric with a no-bond diagonal.
    """
    sym = (xb + xb.transpose(0, 2, 1, 3)) / 2.0
    q = sym.argmax(axis=3)
    n = xb.shape[1]
    idx = np.arange(n)
    q[:, idx, idx] = 0
    out = np.zeros_like(xb)
    b_idx = np.arange(xb.shape[0])[:, None, None]
    out[b_idx, idx[None, :, None], idx[None, None, :], q] = 1.0
    return out


def _bond_channels(bond_disc: Array) -> list[Array]:
    """Per-order adjacency matrices (constants) used as atom-flow
    conditioning."""
    m = bond_disc.shape[3]
    return [np.ascontiguousarray(bond_disc[:, :, :, q]) for q in range(1, m)]


# ---------------------------------------------------------------------------
# coupling layers
# ---------------------------------------------------------------------------


def _atom_masks(n: int, index: int) -> tuple[Array, Array]:
    keep = np.zeros((n, 1))
    keep[index % 2:: 2] = 1.0
    return keep, 1.0 - keep


def _bond_channel_split(m: int, index: int) -> tuple[list[int], list[int]]:
    kept = [q for q in range(m) if q % 2 == index % 2]
    trans = [q for q in range(m) if q % 2 != index % 2]
    return kept, trans


def coupling_forward(x, layer: CouplingLayer, condition=None):
    """Forward coupling: identity on the kept half, x*sigmoid(s)+t on the
    rest. Returns (z, per-sample logdet)."""
    if layer.kind == "atom":
        if condition is None:
            raise ValueError("atom coupling layers require the bond tensor as condition")
        return _atom_coupling(x, layer, condition, inverse=False)
    return _bond_coupling(x, layer, inverse=False)


def coupling_inverse(z, layer: CouplingLayer, condition=None):
    """Exact algebraic inverse of ``coupling_forward``."""
    if layer.kind == "atom":
        if condition is None:
            raise ValueError("atom coupling layers require the bond tensor as condition")
        x, _ = _atom_coupling(z, layer, condition, inverse=True)
        return x
    x, _ = _bond_coupling(z, layer, inverse=True)
    return x


def _atom_st(x_masked, layer: CouplingLayer, channels: list[Array]):
    l = (x_masked.shape if isinstance(x_masked, np.ndarray) else x_masked.data.shape)[2]
    h1 = ad.concat([adj @ x_masked for adj in channels], axis=2)
    adj_sum = sum(channels[1:], channels[0])
    h2 = adj_sum @ h1
    feats = ad.concat([x_masked, h1, h2], axis=2)
    st = apply_mlp(layer.mlp, feats)
    s_raw = ad.gather(st, range(l), axis=2)
    t = ad.gather(st, range(l, 2 * l), axis=2)
    return s_raw, t


def _atom_coupling(x, layer: CouplingLayer, bond_disc: Array, inverse: bool):
    if inverse and not isinstance(x, np.ndarray):
        raise TypeError("the inverse path is numpy-only (no gradients flow backward)")
    n = x.shape[1] if isinstance(x, np.ndarray) else x.data.shape[1]
    keep, trans = _atom_masks(n, layer.index)
    channels = _bond_channels(bond_disc)
    x_masked = x * keep
    s_raw, t = _atom_st(x_masked, layer, channels)
    scale = ad.sigmoid(s_raw)
    if inverse:
        return x * keep + ((x - t) / scale) * trans, None
    z = x * keep + (x * scale + t) * trans
    logdet = ad.tsum(ad.log_sigmoid(s_raw) * trans, axis=(1, 2))
    return z, logdet


def _bond_coupling(x, layer: CouplingLayer, inverse: bool):
    shape = x.shape if isinstance(x, np.ndarray) else x.data.shape
    batch, n, _, m = shape
    kept_ch, trans_ch = _bond_channel_split(m, layer.index)
    kept = ad.gather(x, kept_ch, axis=3)
    flat = ad.reshape(kept, (batch, n * n * len(kept_ch)))
    st = apply_mlp(layer.mlp, flat)
    half = n * n * len(trans_ch)
    s_raw = ad.reshape(ad.gather(st, range(half), axis=1), (batch, n, n, len(trans_ch)))
    t = ad.reshape(ad.gather(st, range(half, 2 * half), axis=1), (batch, n, n, len(trans_ch)))
    scale = ad.sigmoid(s_raw)
    trans = ad.gather(x, trans_ch, axis=3)
    if inverse:
        new_trans = (trans - t) / scale
        logdet = None
    else:
        new_trans = trans * scale + t
        logdet = ad.tsum(ad.log_sigmoid(s_raw), axis=(1, 2, 3))
    pieces = []
    pos = {q: k for k, q in enumerate(trans_ch)}
    for q in range(m):
        if q in pos:
            pieces.append(ad.gather(new_trans, [pos[q]], axis=3))
        else:
            pieces.append(ad.gather(x, [q], axis=3))
    return ad.concat(pieces, axis=3), logdet


# ---------------------------------------------------------------------------
# stacked flows
# ---------------------------------------------------------------------------


def atom_flow_forward(params: FlowParams, x, bond_disc: Array):
    logdet = None
    for layer in params.atom:
        x, ld = _atom_coupling(x, layer, bond_disc, inverse=False)
        logdet = ld if logdet is None else logdet + ld
    return x, logdet


def atom_flow_inverse(params: FlowParams, z: Array, bond_disc: Array) -> Array:
    for layer in reversed(params.atom):
        z, _ = _atom_coupling(z, layer, bond_disc, inverse=True)
    return z


def bond_flow_forward(params: FlowParams, x):
    logdet = None
    for layer in params.bond:
        x, ld = _bond_coupling(x, layer, inverse=False)
        logdet = ld if logdet is None else logdet + ld
    return x, logdet


def bond_flow_inverse(params: FlowParams, z: Array) -> Array:
    for layer in reversed(params.bond):
        z, _ = _bond_coupling(z, layer, inverse=True)
    return z


def gauss_log_density(z, d: int):
    """Standard-normal log density summed over the last flattened dims."""
    axes = tuple(range(1, z.data.ndim if isinstance(z, Tensor) else z.ndim))
    return ad.tsum(z * z, axis=axes) * -0.5 - 0.5 * d * np.log(2.0 * np.pi)


def encode_continuous(params: FlowParams, xa: Array, xb: Array):
    """Push continuous tensors through both tracks.

    The atom track is conditioned on the discretized bond input. Returns
    (za, zb, logdet_atom, logdet_bond), all batched.
    """
    bond_disc = discretize_bonds(xb)
    zb, ld_b = bond_flow_forward(params, xb)
    za, ld_a = atom_flow_forward(params, xa, bond_disc)
    return za, zb, ld_a, ld_b


def decode_continuous(params: FlowParams, za: Array, zb: Array) -> tuple[Array, Array]:
    """Exact inverse of ``encode_continuous``."""
    xb = bond_flow_inverse(params, zb)
    bond_disc = discretize_bonds(xb)
    xa = atom_flow_inverse(params, za, bond_disc)
    return xa, xb


def encode_tensors(params: FlowParams, atom: Array, bond: Array, rng: SeededRng,
                   noise_scale: float | None = None):
    """Dequantize one-hot batches and encode; conditioning uses the discrete
    bond tensor. Returns (za, zb, log_likelihood per sample)."""
    cfg = params.config
    scale = cfg.noise_scale if noise_scale is None else noise_scale
    xa = dequantize(atom, scale, rng)
    xb = dequantize(bond, scale, rng)
    zb, ld_b = bond_flow_forward(params, xb)
    za, ld_a = atom_flow_forward(params, xa, bond)
    loglik = (gauss_log_density(za, cfg.d_atom) + ld_a
              + gauss_log_density(zb, cfg.d_bond) + ld_b)
    data_a = za.data if isinstance(za, Tensor) else za
    data_b = zb.data if isinstance(zb, Tensor) else zb
    if not (np.all(np.isfinite(data_a)) and np.all(np.isfinite(data_b))):
        raise FloatingPointError("non-finite latent during encode")
    return za, zb, loglik


def encode(params: FlowParams, molecule: Molecule, rng: SeededRng,
           noise_scale: float | None = None) -> tuple[LatentVector, float]:
    """Encode one molecule; returns its latent and exact log-likelihood."""
    cfg = params.config
    atom, bond = to_tensors(molecule, cfg.n_max)
    za, zb, loglik = encode_tensors(params, atom[None], bond[None], rng, noise_scale)
    return (
        LatentVector(za.reshape(-1), zb.reshape(-1)),
        float(loglik[0]),
    )


def decode_batch(params: FlowParams, z: Array) -> list[Molecule]:
    """Invert a (batch, d_total) latent block into raw molecules (no
    valency screening)."""
    cfg = params.config
    za = z[:, : cfg.d_atom].reshape(-1, cfg.n_max, cfg.n_atom_types)
    zb = z[:, cfg.d_atom:].reshape(-1, cfg.n_max, cfg.n_max, cfg.n_bond_types)
    xa, xb = decode_continuous(params, za, zb)
    bond_disc = discretize_bonds(xb)
    return [from_tensors(xa[i], bond_disc[i]) for i in range(z.shape[0])]


def decode(params: FlowParams, z: LatentVector | Array,
           check_valency: bool = True) -> Molecule | None:
    """Invert one latent into a molecule.

    With the valency check on, a chemically invalid sample is rejected and
    None is returned so the caller can resample.
    """
    vec = z.z if isinstance(z, LatentVector) else np.asarray(z)
    mol = decode_batch(params, vec[None])[0]
    if check_valency and not valency_check(mol):
        return None
    return mol


def sample_prior(rng: SeededRng, config: FlowConfig,
                 temperature: float | None = None, count: int = 1) -> Array:
    """z ~ N(0, temperature^2 I), shape (count, d_total)."""
    t = config.temperature if temperature is None else temperature
    if t < 0.0:
        raise ValueError("temperature must be non-negative")
    return rng.normal((count, config.d_total), scale=1.0) * t


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def make_optimizer(params: FlowParams, lr: float = 1e-3) -> AdamState:
    return AdamState.for_params([a for _, a in params.named_params()], lr=lr)


def clip_gradients(grads: list[Array], max_norm: float) -> list[Array]:
    """Scale the gradient list so its global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return [g * factor for g in grads]


def train_step(params: FlowParams, atom: Array, bond: Array, opt: AdamState,
               rng: SeededRng, clip_norm: float | None = None) -> float:
    """One gradient step on mean negative log-likelihood over the batch.

    Mutates `params` and `opt`; returns the step's mean NLL. A non-finite
    loss aborts the step (parameters untouched).
    """
    if atom.shape[0] == 0:
        raise ValueError("empty batch")
    view, leaves = params.traced()
    _, _, loglik = encode_tensors(view, atom, bond, rng)
    loss = ad.tsum(loglik) * (-1.0 / atom.shape[0])
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"non-finite training loss {loss.data}")
    loss.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
             for leaf in leaves]
    if clip_norm is not None:
        grads = clip_gradients(grads, clip_norm)
    names = [name for name, _ in params.named_params()]
    updated = adam_step([leaf.data for leaf in leaves], grads, opt)
    for name, arr in zip(names, updated):
        params.set_param(name, arr)
    return float(loss.data)
