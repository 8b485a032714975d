"""Rotation-equivariant point-cloud network.

Architecture: a one-hot element embedding followed by three blocks, each
built as

    self-interaction -> point convolution -> norm -> gated nonlinearity
                     -> self-interaction

with block widths 24, 12, 1 by default (six self-interaction layers in
total).  The pre-convolution features are concatenated alongside the
convolution output before normalization, which is how an atom's own
features propagate: the convolution itself sums strictly over neighbours.
The closing width-1 self-interaction of the last block is the output
head, so predicted magnitudes are an unbounded linear readout of the
gated features.

Convolutions couple input features of order l_in with filters
R(|r|) * Y_{l_f}(r_hat) through the coupling tensors of :mod:`tfkit.so3`,
instantiating every selection-rule-allowed (l_in, l_f, l_out) path with
l_f, l_out <= lmax.  R is a learned linear combination of a fixed Gaussian
radial basis.  All arithmetic is float64; parameters live in a flat named
store so checkpoints are a plain ordered list of arrays.

A forward pass is a pure function of (parameters, system): concurrent
evaluation over different systems against shared read-only parameters is
safe, and the training loop is the only parameter writer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import so3
from .geometry import knn_indices
from .systems import VOCAB_PROTEIN, AtomSystem

DTYPE = torch.float64

_LOG2 = math.log(2.0)
_NORM_EPS = 1e-8  # zero-direction guard in gates, variance floor in norms
_GRAD_EPS = 1e-24  # inside sqrt of vector norms: finite gradients at zero
_CHECKPOINT_MAGIC = b"TFKCKPT1"

# Maps SH order m = (-1, 0, +1) ~ (y, z, x) back to Cartesian (x, y, z).
_SH_TO_CART = torch.tensor(so3._P_CART_TO_SH, dtype=DTYPE)


def _shifted_softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.softplus(x) - _LOG2


def _vector_norm(v: torch.Tensor) -> torch.Tensor:
    """Norm over the trailing component axis with finite gradient at zero."""
    return torch.sqrt(torch.sum(v * v, dim=-1, keepdim=True) + _GRAD_EPS)


class FeatureMap:
    """Per-atom features indexed by rotation order.

    ``data[l]`` has shape (n_atoms, channels_l, 2l+1); channel counts may
    differ between orders but every order covers the same atoms.
    """

    __slots__ = ("data",)

    def __init__(self, data: dict[int, torch.Tensor | np.ndarray]):
        if not data:
            raise ValueError("feature map must contain at least one order")
        converted: dict[int, torch.Tensor] = {}
        n_atoms = None
        for l in sorted(data):
            t = data[l]
            if not isinstance(t, torch.Tensor):
                t = torch.as_tensor(np.asarray(t, dtype=float), dtype=DTYPE)
            if t.ndim != 3 or t.shape[2] != 2 * l + 1:
                raise ValueError(
                    f"order-{l} features must be (N, C, {2 * l + 1}), got {tuple(t.shape)}"
                )
            if n_atoms is None:
                n_atoms = t.shape[0]
            elif t.shape[0] != n_atoms:
                raise ValueError("orders disagree on atom count")
            converted[l] = t
        self.data = converted

    @property
    def n_atoms(self) -> int:
        return next(iter(self.data.values())).shape[0]

    def orders(self) -> list[int]:
        return sorted(self.data)

    def channels(self, l: int) -> int:
        return self.data[l].shape[1]

    def __contains__(self, l: int) -> bool:
        return l in self.data

    def __getitem__(self, l: int) -> torch.Tensor:
        return self.data[l]

    def numpy(self, l: int) -> np.ndarray:
        return self.data[l].detach().numpy()


# ---------------------------------------------------------------------------
# Functional layer operations


def embed_elements(system: AtomSystem, vocabulary: tuple[str, ...]) -> FeatureMap:
    """One-hot element encoding as an order-0 feature map."""
    index = {el: i for i, el in enumerate(vocabulary)}
    onehot = np.zeros((system.n_atoms, len(vocabulary), 1))
    for a, el in enumerate(system.elements):
        if el not in index:
            raise ValueError(f"unknown element {el!r}; vocabulary is {list(vocabulary)}")
        onehot[a, index[el], 0] = 1.0
    return FeatureMap({0: onehot})


def radial_basis(r: np.ndarray, n_basis: int = 12, r_max: float = 12.0) -> np.ndarray:
    """Gaussian bumps exp(-(r - mu_b)^2 / (2 s^2)), centers even on [0, r_max],
    width s equal to the center spacing."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be >= 0")
    centers = np.linspace(0.0, r_max, n_basis)
    s = r_max / (n_basis - 1)
    return np.exp(-((r[..., None] - centers) ** 2) / (2.0 * s * s))


def self_interaction(
    fm: FeatureMap,
    weights: dict[int, torch.Tensor],
    bias: torch.Tensor | None = None,
) -> FeatureMap:
    """Per-order channel mixing, identical across the 2l+1 components.

    The bias applies to order 0 only; a bias on l > 0 would break
    equivariance.
    """
    out = {}
    for l in fm.orders():
        w = weights[l]
        if w.shape[1] != fm.channels(l):
            raise ValueError(
                f"order-{l} weight expects {w.shape[1]} channels, map has {fm.channels(l)}"
            )
        y = torch.einsum("oc,ncm->nom", w, fm[l])
        if l == 0 and bias is not None:
            y = y + bias[None, :, None]
        out[l] = y
    return FeatureMap(out)


def gated_nonlinearity(
    fm: FeatureMap, biases: dict[int, torch.Tensor], eps: float = _NORM_EPS
) -> FeatureMap:
    """Shifted softplus on order 0; norm-gated scaling on higher orders.

    For l > 0 each channel vector v becomes eta(|v| + b) * v / (|v| + eps),
    so directions are preserved and the map stays continuous at v = 0.
    """
    out = {}
    for l in fm.orders():
        b = biases[l][None, :, None]
        if l == 0:
            out[l] = _shifted_softplus(fm[l] + b)
        else:
            n = _vector_norm(fm[l])
            out[l] = _shifted_softplus(n + b) * fm[l] / (n + eps)
    return FeatureMap(out)


def equivariant_norm(
    fm: FeatureMap,
    scales: dict[int, torch.Tensor],
    shifts: dict[int, torch.Tensor] | None = None,
    eps: float = _NORM_EPS,
) -> FeatureMap:
    """Standardize channel norms per atom and order, then rescale.

    Each order's channel norms are divided by their root-mean-square over
    the atom's channels (second-moment standardization, which stays defined
    for single-channel layers) and multiplied by a learned per-channel
    scale.  Directions are untouched; a learned shift applies to order 0
    only.
    """
    out = {}
    for l in fm.orders():
        v = fm[l]
        ms = torch.mean(torch.sum(v * v, dim=-1), dim=1, keepdim=True)
        rms = torch.sqrt(ms + eps)[..., None]
        y = v * (scales[l][None, :, None] / rms)
        if l == 0 and shifts is not None and l in shifts:
            y = y + shifts[l][None, :, None]
        out[l] = y
    return FeatureMap(out)


class ConvContext:
    """Geometry shared by every convolution in one forward pass: neighbour
    indices (-1 padding allowed), radial basis values, and filter harmonics."""

    __slots__ = ("neighbors", "valid", "radial", "sh")

    def __init__(
        self,
        neighbors: torch.Tensor,
        valid: torch.Tensor,
        radial: torch.Tensor,
        sh: dict[int, torch.Tensor],
    ):
        self.neighbors = neighbors
        self.valid = valid
        self.radial = radial
        self.sh = sh


def build_conv_context(
    positions: np.ndarray,
    neighbors: np.ndarray,
    lmax: int,
    n_basis: int = 12,
    r_max: float = 12.0,
) -> ConvContext:
    positions = np.asarray(positions, dtype=float)
    neighbors = np.asarray(neighbors, dtype=np.intp)
    valid = neighbors >= 0
    safe = np.where(valid, neighbors, 0)
    rel = positions[safe] - positions[:, None, :]
    dist = np.linalg.norm(rel, axis=-1)
    if np.any(dist[valid] < 1e-8):
        raise ValueError("coincident atoms in neighbour list")
    unit = rel / np.maximum(dist, 1e-12)[..., None]
    rb = radial_basis(dist, n_basis, r_max) * valid[..., None]
    sh = {
        l: torch.as_tensor(so3._sh_unchecked(l, unit), dtype=DTYPE)
        for l in range(lmax + 1)
    }
    return ConvContext(
        torch.as_tensor(safe, dtype=torch.long),
        torch.as_tensor(valid, dtype=DTYPE),
        torch.as_tensor(rb, dtype=DTYPE),
        sh,
    )


def conv_paths(in_orders: list[int], lmax: int) -> list[tuple[int, int, int]]:
    """All selection-rule-allowed (l_in, l_filter, l_out) triples, capped."""
    paths = []
    for l1 in sorted(in_orders):
        for lf in range(lmax + 1):
            for l3 in range(abs(l1 - lf), min(l1 + lf, lmax) + 1):
                paths.append((l1, lf, l3))
    return paths


_CG_TORCH: dict[tuple[int, int, int], torch.Tensor] = {}


def _cg_tensor(path: tuple[int, int, int]) -> torch.Tensor:
    if path not in _CG_TORCH:
        _CG_TORCH[path] = torch.as_tensor(
            so3.clebsch_gordan(*path).coefficients.copy(), dtype=DTYPE
        )
    return _CG_TORCH[path]


# Upper bound on float64 elements per convolution transient; larger systems
# are processed in atom-row chunks so intermediates stay cache-friendly
# (CPU torch has no caching allocator, and >MB allocations page-thrash).
_CONV_CHUNK_ELEMS = 1 << 19


def _conv_apply(
    fm: FeatureMap,
    ctx: ConvContext,
    radial_weights: dict[tuple[int, int, int], torch.Tensor],
    lmax: int,
) -> FeatureMap:
    # Share the neighbour gather across paths with the same input order;
    # per-path work is a radial projection, a neighbour reduction, and the
    # small coupling contraction.  Two-operand einsums only: multi-operand
    # calls would re-derive a contraction path every time.
    by_l1: dict[int, list[tuple[int, int, int]]] = {}
    for path in radial_weights:
        by_l1.setdefault(path[0], []).append(path)

    n = fm.n_atoms
    k = ctx.neighbors.shape[1]
    widest = max(
        radial_weights[p].shape[0] * (2 * p[0] + 1) for p in radial_weights
    )
    chunk = min(n, max(64, _CONV_CHUNK_ELEMS // max(1, k * widest)))

    moments: dict[tuple[int, int, int], list[torch.Tensor]] = {
        path: [] for path in radial_weights
    }
    for start in range(0, n, chunk):
        rows = slice(start, min(start + chunk, n))
        valid = ctx.valid[rows]
        radial = ctx.radial[rows]
        for l1, plist in by_l1.items():
            g = fm[l1][ctx.neighbors[rows]] * valid[..., None, None]
            for path in plist:
                r = torch.einsum("cb,nkb->nkc", radial_weights[path], radial)
                msg = g * r[..., None]
                moments[path].append(
                    torch.einsum("nkcm,nkf->ncmf", msg, ctx.sh[path[1]][rows])
                )

    collected: dict[int, list[torch.Tensor]] = {}
    for path in radial_weights:  # concat in path declaration order
        parts = moments[path]
        a = parts[0] if len(parts) == 1 else torch.cat(parts, dim=0)
        y = torch.einsum("ncmf,mfo->nco", a, _cg_tensor(path))
        collected.setdefault(path[2], []).append(y)
    return FeatureMap(
        {l: parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
         for l, parts in collected.items()}
    )


def point_convolution(
    fm: FeatureMap,
    positions: np.ndarray,
    neighbors: np.ndarray,
    radial_weights: dict[tuple[int, int, int], torch.Tensor | np.ndarray],
    lmax: int,
    n_basis: int = 12,
    r_max: float = 12.0,
) -> FeatureMap:
    """Equivariant point convolution over explicit neighbour lists.

    ``neighbors`` is (N, k) with -1 marking padded (absent) slots; an
    all-padding row yields zero output features for that atom.  Output
    channels concatenate the per-path results in path order.
    """
    weights = {}
    for path, w in radial_weights.items():
        if not isinstance(w, torch.Tensor):
            w = torch.as_tensor(np.asarray(w, dtype=float), dtype=DTYPE)
        if path[0] not in fm:
            raise ValueError(f"path {path} needs order-{path[0]} input features")
        if w.shape[0] != fm.channels(path[0]):
            raise ValueError(
                f"path {path} weight rows ({w.shape[0]}) must match input channels "
                f"({fm.channels(path[0])})"
            )
        weights[path] = w
    ctx = build_conv_context(positions, neighbors, lmax, n_basis, r_max)
    out = _conv_apply(fm, ctx, weights, lmax)
    if not out.data:
        raise ValueError("no convolution paths produced output")
    return out


# ---------------------------------------------------------------------------
# Layers with named parameters


class _Layer:
    kind = "base"

    def __init__(self, name: str):
        self.name = name
        self.param_shapes: dict[str, tuple[int, ...]] = {}


class ElementEmbedding(_Layer):
    kind = "embedding"

    def __init__(self, name: str, vocabulary: tuple[str, ...]):
        super().__init__(name)
        self.vocabulary = vocabulary

    def forward(self, system: AtomSystem) -> FeatureMap:
        return embed_elements(system, self.vocabulary)


class SelfInteraction(_Layer):
    kind = "self_interaction"

    def __init__(self, name: str, in_channels: dict[int, int], out_channels: int):
        super().__init__(name)
        self.in_channels = dict(sorted(in_channels.items()))
        self.out_channels = out_channels
        for l, c_in in self.in_channels.items():
            self.param_shapes[f"{name}.l{l}.weight"] = (out_channels, c_in)
        if 0 in self.in_channels:
            self.param_shapes[f"{name}.l0.bias"] = (out_channels,)

    def forward(self, fm: FeatureMap, params: dict[str, torch.Tensor]) -> FeatureMap:
        weights = {l: params[f"{self.name}.l{l}.weight"] for l in self.in_channels}
        bias = params.get(f"{self.name}.l0.bias")
        return self_interaction(fm, weights, bias)


class PointConvolution(_Layer):
    kind = "convolution"

    def __init__(
        self, name: str, in_channels: dict[int, int], lmax: int, n_basis: int
    ):
        super().__init__(name)
        self.lmax = lmax
        self.paths = conv_paths(sorted(in_channels), lmax)
        self.out_channels: dict[int, int] = {}
        for l1, lf, l3 in self.paths:
            self.param_shapes[f"{name}.p{l1}{lf}{l3}.radial"] = (in_channels[l1], n_basis)
            self.out_channels[l3] = self.out_channels.get(l3, 0) + in_channels[l1]

    def forward(
        self, fm: FeatureMap, ctx: ConvContext, params: dict[str, torch.Tensor]
    ) -> FeatureMap:
        weights = {
            (l1, lf, l3): params[f"{self.name}.p{l1}{lf}{l3}.radial"]
            for l1, lf, l3 in self.paths
        }
        return _conv_apply(fm, ctx, weights, self.lmax)


class NormLayer(_Layer):
    kind = "norm"

    def __init__(self, name: str, channels: dict[int, int]):
        super().__init__(name)
        self.channels = dict(sorted(channels.items()))
        for l, c in self.channels.items():
            self.param_shapes[f"{name}.l{l}.scale"] = (c,)
        if 0 in self.channels:
            self.param_shapes[f"{name}.l0.shift"] = (self.channels[0],)

    def forward(self, fm: FeatureMap, params: dict[str, torch.Tensor]) -> FeatureMap:
        scales = {l: params[f"{self.name}.l{l}.scale"] for l in self.channels}
        shifts = {}
        if 0 in self.channels:
            shifts[0] = params[f"{self.name}.l0.shift"]
        return equivariant_norm(fm, scales, shifts)


class GatedNonlinearity(_Layer):
    kind = "nonlinearity"

    def __init__(self, name: str, channels: dict[int, int]):
        super().__init__(name)
        self.channels = dict(sorted(channels.items()))
        for l, c in self.channels.items():
            self.param_shapes[f"{name}.l{l}.bias"] = (c,)

    def forward(self, fm: FeatureMap, params: dict[str, torch.Tensor]) -> FeatureMap:
        biases = {l: params[f"{self.name}.l{l}.bias"] for l in self.channels}
        return gated_nonlinearity(fm, biases)


# ---------------------------------------------------------------------------
# Model assembly


@dataclass(frozen=True)
class ModelConfig:
    lmax: int = 1
    filters: tuple[int, ...] = (24, 12, 1)
    vocabulary: tuple[str, ...] = VOCAB_PROTEIN
    n_neighbors: int = 50
    n_radial: int = 12
    r_max: float = 12.0
    seed: int = 0
    output_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        object.__setattr__(self, "vocabulary", tuple(self.vocabulary))
        if self.lmax not in (0, 1, 2):
            raise ValueError(f"lmax must be 0, 1 or 2, got {self.lmax}")
        if not self.vocabulary:
            raise ValueError("vocabulary must not be empty")
        if not self.filters or any(f < 1 for f in self.filters):
            raise ValueError("filter widths must all be >= 1")
        if self.filters[-1] != 1:
            raise ValueError("final filter width must be 1 (single output channel)")
        if self.n_neighbors < 1 or self.n_radial < 2 or self.r_max <= 0:
            raise ValueError("invalid neighbourhood/radial settings")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be > 0")


@dataclass
class Block:
    si_in: SelfInteraction
    conv: PointConvolution
    norm: NormLayer
    gate: GatedNonlinearity
    si_out: SelfInteraction


class Model:
    """Layer graph plus a flat named parameter store."""

    def __init__(
        self,
        config: ModelConfig,
        embedding: ElementEmbedding,
        blocks: list[Block],
        params: dict[str, torch.Tensor],
    ):
        self.config = config
        self.embedding = embedding
        self.blocks = blocks
        self.params = params
        self.param_kinds = {}
        for layer in self.layers:
            for name in layer.param_shapes:
                self.param_kinds[name] = layer.kind

    @property
    def layers(self) -> list[_Layer]:
        out: list[_Layer] = [self.embedding]
        for blk in self.blocks:
            out.extend([blk.si_in, blk.conv, blk.norm, blk.gate, blk.si_out])
        return out

    @property
    def parameter_count(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def clone_params(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def load_params(self, params: dict[str, torch.Tensor | np.ndarray]) -> None:
        if set(params) != set(self.params):
            raise ValueError("parameter names do not match model")
        for k, v in params.items():
            t = v if isinstance(v, torch.Tensor) else torch.as_tensor(v, dtype=DTYPE)
            if tuple(t.shape) != tuple(self.params[k].shape):
                raise ValueError(f"shape mismatch for parameter {k}")
            self.params[k] = t.detach().clone()

    def set_requires_grad(self, flag: bool) -> None:
        for k in self.params:
            self.params[k] = self.params[k].detach().requires_grad_(flag)


def build_model(config: ModelConfig) -> Model:
    """Construct the block stack and seed-deterministic initial parameters."""
    embedding = ElementEmbedding("embed", config.vocabulary)
    blocks = []
    in_channels = {0: len(config.vocabulary)}
    for b, width in enumerate(config.filters, start=1):
        si_in = SelfInteraction(f"block{b}.si_in", in_channels, width)
        mixed_in = {l: width for l in in_channels}
        conv = PointConvolution(f"block{b}.conv", mixed_in, config.lmax, config.n_radial)
        merge_channels = dict(conv.out_channels)
        for l in mixed_in:
            merge_channels[l] = merge_channels.get(l, 0) + width
        norm = NormLayer(f"block{b}.norm", merge_channels)
        gate = GatedNonlinearity(f"block{b}.gate", merge_channels)
        si_out = SelfInteraction(f"block{b}.si_out", merge_channels, width)
        blocks.append(Block(si_in, conv, norm, gate, si_out))
        in_channels = {l: width for l in merge_channels}

    if config.lmax >= 1 and 1 not in in_channels:
        raise ValueError("configuration produces no order-1 output")

    rng = np.random.default_rng(config.seed)
    params: dict[str, torch.Tensor] = {}
    all_layers: list[_Layer] = [embedding]
    for blk in blocks:
        all_layers.extend([blk.si_in, blk.conv, blk.norm, blk.gate, blk.si_out])
    for layer in all_layers:
        for name, shape in layer.param_shapes.items():
            if name.endswith(".weight") or name.endswith(".radial"):
                bound = 1.0 / math.sqrt(shape[-1])
                value = rng.uniform(-bound, bound, size=shape)
            elif name.endswith(".scale"):
                value = np.ones(shape)
            else:  # bias, shift
                value = np.zeros(shape)
            params[name] = torch.as_tensor(value, dtype=DTYPE)
    return Model(config, embedding, blocks, params)


@dataclass
class PreparedSystem:
    """A system with its geometry precomputed for repeated forward passes."""

    system: AtomSystem
    ctx: ConvContext
    onehot: FeatureMap


def prepare_system(config: ModelConfig, system: AtomSystem) -> PreparedSystem:
    if system.n_atoms < 2:
        raise ValueError("forward pass needs at least 2 atoms")
    k = min(config.n_neighbors, system.n_atoms - 1)
    neighbors = knn_indices(system.positions, k)
    ctx = build_conv_context(
        system.positions, neighbors, config.lmax, config.n_radial, config.r_max
    )
    onehot = embed_elements(system, config.vocabulary)
    return PreparedSystem(system, ctx, onehot)


def forward_torch(
    model: Model,
    prep: PreparedSystem,
    params: dict[str, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Forward pass returning per-atom predictions as a torch tensor:
    (N, 3) Cartesian vectors for lmax >= 1, (N,) scalars for lmax = 0."""
    params = model.params if params is None else params
    fm = prep.onehot
    for blk in model.blocks:
        h = blk.si_in.forward(fm, params)
        c = blk.conv.forward(h, prep.ctx, params)
        merged = {}
        for l in sorted(set(c.data) | set(h.data)):
            parts = []
            if l in c:
                parts.append(c[l])
            if l in h:
                parts.append(h[l])
            merged[l] = parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)
        gated = blk.gate.forward(blk.norm.forward(FeatureMap(merged), params), params)
        fm = blk.si_out.forward(gated, params)
    if model.config.lmax >= 1:
        pred = fm[1][:, 0, :] @ _SH_TO_CART
    else:
        pred = fm[0][:, 0, 0]
    return pred * model.config.output_scale


def forward(model: Model, system: AtomSystem) -> np.ndarray:
    """Forward pass on one system; returns (N, 3) vectors or (N,) scalars."""
    prep = prepare_system(model.config, system)
    with torch.no_grad():
        return forward_torch(model, prep).numpy()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: Path | str,
    model: Model,
    extras: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Write a byte-stable checkpoint: config echo, vocabulary, seed, and the
    named parameter arrays in declared order, plus optional extra arrays."""
    extras = extras or {}
    config = model.config
    header = {
        "format": 1,
        "config": {
            "lmax": config.lmax,
            "filters": list(config.filters),
            "vocabulary": list(config.vocabulary),
            "n_neighbors": config.n_neighbors,
            "n_radial": config.n_radial,
            "r_max": config.r_max,
            "seed": config.seed,
            "output_scale": config.output_scale,
        },
        "seed": config.seed,
        "vocabulary": list(config.vocabulary),
        "params": [[k, list(v.shape)] for k, v in model.params.items()],
        "extras": [[k, list(np.asarray(v).shape)] for k, v in sorted(extras.items())],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = [v.detach().numpy().astype("<f8").tobytes() for v in model.params.values()]
    payload += [
        np.ascontiguousarray(np.asarray(v, dtype=float)).astype("<f8").tobytes()
        for _, v in sorted(extras.items())
    ]
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path: Path | str) -> tuple[Model, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(_CHECKPOINT_MAGIC)] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = len(_CHECKPOINT_MAGIC)
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + hlen].decode())
    off += hlen
    cfg = header["config"]
    config = ModelConfig(
        lmax=cfg["lmax"],
        filters=tuple(cfg["filters"]),
        vocabulary=tuple(cfg["vocabulary"]),
        n_neighbors=cfg["n_neighbors"],
        n_radial=cfg["n_radial"],
        r_max=cfg["r_max"],
        seed=cfg["seed"],
        output_scale=cfg["output_scale"],
    )
    model = build_model(config)
    params = {}
    for name, shape in header["params"]:
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(raw[off : off + size], dtype="<f8").reshape(shape)
        params[name] = arr.copy()
        off += size
    model.load_params(params)
    extras = {}
    for name, shape in header["extras"]:
        size = int(np.prod(shape)) * 8 if shape else 8
        arr = np.frombuffer(raw[off : off + size], dtype="<f8").reshape(shape)
        extras[name] = arr.copy()
        off += size
    return model, extras, header["meta"]
