"""Miniature residual network with exact backpropagation.

Activations are kept channels-last (N, H, W, C) internally; the public
entry points take grayscale batches shaped (N, 1, H, W) like the rest of
the package. Everything runs in float64 so gradients can be checked
against central finite differences.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

GROUP_NAMES = ("stem", "layer1", "layer2", "layer3", "layer4", "head")
BACKBONE_GROUPS = GROUP_NAMES[:-1]


class ConfigurationError(ValueError):
    """Input or architecture shape does not match the network config."""


class NumericalInstabilityError(FloatingPointError):
    """Raised when a loss or gradient turns non-finite."""

    def __init__(self, message: str, batch_index: int | None = None, context: dict | None = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.context = dict(context or {})


@dataclass(frozen=True)
class ArchConfig:
    in_size: int = 32
    stem_channels: int = 8
    widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_stride: int = 2

    def __post_init__(self):
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ConfigurationError("need exactly four block groups")
        if any(b < 1 for b in self.blocks):
            raise ConfigurationError("each block group needs at least one block")
        if self.in_size < 4 or self.stem_stride not in (1, 2):
            raise ConfigurationError("unsupported input size / stem stride")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def block_specs(self):
        """Yield (group, index, c_in, c_out, stride) for every residual block."""
        c_in = self.stem_channels
        for g, (width, n_blocks) in enumerate(zip(self.widths, self.blocks)):
            for i in range(n_blocks):
                stride = 2 if (g > 0 and i == 0) else 1
                yield f"layer{g + 1}", i, c_in, width, stride
                c_in = width

    def param_shapes(self) -> dict[str, dict[str, tuple[int, ...]]]:
        """Declared parameter shapes per group; the network is built from this."""
        shapes: dict[str, dict[str, tuple[int, ...]]] = {
            "stem": {"conv.w": (self.stem_channels, 1, 3, 3), "conv.b": (self.stem_channels,)}
        }
        for group, i, c_in, c_out, stride in self.block_specs():
            g = shapes.setdefault(group, {})
            g[f"b{i}.conv1.w"] = (c_out, c_in, 3, 3)
            g[f"b{i}.conv1.b"] = (c_out,)
            g[f"b{i}.conv2.w"] = (c_out, c_out, 3, 3)
            g[f"b{i}.conv2.b"] = (c_out,)
            if c_in != c_out or stride != 1:
                g[f"b{i}.proj.w"] = (c_out, c_in, 1, 1)
                g[f"b{i}.proj.b"] = (c_out,)
        shapes["head"] = {"w": (self.feature_dim,), "b": (1,)}
        return shapes


@dataclass
class ParameterGroup:
    name: str
    params: dict[str, np.ndarray]
    trainable: bool = True

    def size(self) -> int:
        return int(sum(p.size for p in self.params.values()))


@dataclass
class Network:
    arch: ArchConfig
    groups: list[ParameterGroup] = field(default_factory=list)

    def __post_init__(self):
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate group names: {names}")
        self._index = {g.name: g for g in self.groups}

    def group(self, name: str) -> ParameterGroup:
        return self._index[name]

    def param(self, group: str, name: str) -> np.ndarray:
        return self._index[group].params[name]

    def trainable_groups(self) -> list[str]:
        return [g.name for g in self.groups if g.trainable]

    def set_trainable(self, names) -> None:
        names = set(names)
        unknown = names - set(self._index)
        if unknown:
            raise ConfigurationError(f"unknown groups: {sorted(unknown)}")
        for g in self.groups:
            g.trainable = g.name in names

    def copy(self) -> "Network":
        return Network(
            self.arch,
            [ParameterGroup(g.name, {k: v.copy() for k, v in g.params.items()}, g.trainable)
             for g in self.groups],
        )

    def state_dict(self) -> dict[str, dict[str, np.ndarray]]:
        return {g.name: g.params for g in self.groups}

    def load_groups(self, state: dict[str, dict[str, np.ndarray]]) -> None:
        """Overwrite parameters of the groups present in ``state`` (copies)."""
        for name, params in state.items():
            g = self._index[name]
            for k, v in params.items():
                if g.params[k].shape != np.shape(v):
                    raise ConfigurationError(f"shape mismatch for {name}.{k}")
                g.params[k] = np.array(v, dtype=np.float64, copy=True)

    def hash(self, groups=None) -> str:
        """SHA-256 over the raw bytes of the selected groups (all by default)."""
        h = hashlib.sha256()
        for g in self.groups:
            if groups is not None and g.name not in groups:
                continue
            for k in sorted(g.params):
                h.update(f"{g.name}.{k}".encode())
                h.update(np.ascontiguousarray(g.params[k]).tobytes())
        return h.hexdigest()


def init_head(arch: ArchConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(arch.feature_dim)
    return {"w": rng.uniform(-bound, bound, arch.feature_dim), "b": np.zeros(1)}


def init_network(arch: ArchConfig, seed: int | np.random.Generator = 0) -> Network:
    """He-normal convolutions, zero biases, uniform head."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    groups = []
    for gname, shapes in arch.param_shapes().items():
        params = {}
        for pname, shape in shapes.items():
            if gname == "head":
                continue
            if pname.endswith(".b"):
                params[pname] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                std = np.sqrt(2.0 / fan_in)
                # keep the residual branch small so the un-normalized stack stays well scaled
                if ".conv2." in pname:
                    std *= 0.5
                params[pname] = rng.normal(0.0, std, shape)
        if gname == "head":
            params = init_head(arch, rng)
        groups.append(ParameterGroup(gname, params, True))
    return Network(arch, groups)


def zero_network(arch: ArchConfig) -> Network:
    groups = [ParameterGroup(g, {k: np.zeros(s) for k, s in shapes.items()})
              for g, shapes in arch.param_shapes().items()]
    return Network(arch, groups)


# --------------------------------------------------------------------- layers

def _conv_forward(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    c_out, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.reshape(n, ho, wo, c_out), (cols, x.shape, w, stride, pad)


def _conv_backward(dout, cache, need_dx):
    cols, padded_shape, w, stride, pad = cache
    c_out, c, kh, kw = w.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, c_out)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(c_out, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, dw, db


def _to_nhwc(batch: np.ndarray, arch: ArchConfig) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (arch.in_size, arch.in_size):
        raise ConfigurationError(
            f"expected batch shape (B, 1, {arch.in_size}, {arch.in_size}), got {batch.shape}")
    if not np.all(np.isfinite(batch)):
        raise ConfigurationError("non-finite input")
    return batch.transpose(0, 2, 3, 1)


# ---------------------------------------------------------------- forward pass

@dataclass
class ForwardResult:
    logits: np.ndarray
    features: np.ndarray
    cache: list = field(default_factory=list, repr=False)


def _backbone(net: Network, batch: np.ndarray, keep_cache: bool):
    arch = net.arch
    x = _to_nhwc(batch, arch)
    cache = []
    stem = net.group("stem").params
    z, cc = _conv_forward(x, stem["conv.w"], stem["conv.b"], arch.stem_stride, 1)
    a = np.maximum(z, 0.0)
    if keep_cache:
        cache.append(("stem", cc, z))
    for group, i, c_in, c_out, stride in arch.block_specs():
        p = net.group(group).params
        z1, c1 = _conv_forward(a, p[f"b{i}.conv1.w"], p[f"b{i}.conv1.b"], stride, 1)
        a1 = np.maximum(z1, 0.0)
        z2, c2 = _conv_forward(a1, p[f"b{i}.conv2.w"], p[f"b{i}.conv2.b"], 1, 1)
        if f"b{i}.proj.w" in p:
            s, cp = _conv_forward(a, p[f"b{i}.proj.w"], p[f"b{i}.proj.b"], stride, 0)
        else:
            s, cp = a, None
        z_out = z2 + s
        a = np.maximum(z_out, 0.0)
        if keep_cache:
            cache.append((group, i, c1, z1, c2, cp, z_out))
    pooled = a.mean(axis=(1, 2))
    if keep_cache:
        cache.append(("pool", a.shape))
    return pooled, cache


def features(net: Network, batch: np.ndarray) -> np.ndarray:
    """Pooled penultimate features, shape (B, feature_dim)."""
    pooled, _ = _backbone(net, batch, keep_cache=False)
    return pooled


def head_logits(head: dict[str, np.ndarray], feats: np.ndarray) -> np.ndarray:
    return feats @ head["w"] + head["b"][0]


def forward(net: Network, batch: np.ndarray, keep_cache: bool = False) -> ForwardResult:
    pooled, cache = _backbone(net, batch, keep_cache)
    logits = head_logits(net.group("head").params, pooled)
    return ForwardResult(logits, pooled, cache)


# --------------------------------------------------------------- loss/backward

def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample stable BCE: max(z,0) - z*y + log(1 + exp(-|z|))."""
    z = logits
    return np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def backbone_backward(net: Network, cache: list, d_pooled: np.ndarray) -> dict:
    """Backpropagate a gradient w.r.t. pooled features into trainable backbone groups.

    Propagation stops at the earliest trainable group, so frozen prefixes cost
    nothing beyond the forward pass.
    """
    trainable = set(net.trainable_groups())
    order = list(BACKBONE_GROUPS)
    active = [g for g in order if g in trainable]
    grads: dict[str, dict[str, np.ndarray]] = {g: {} for g in active}
    if not active:
        return grads
    earliest = order.index(active[0])

    shape = cache[-1][1]
    n, h, w, c = shape
    da = np.broadcast_to(d_pooled[:, None, None, :] / (h * w), shape).copy()
    for entry in reversed(cache[:-1]):
        if entry[0] == "stem":
            _, cc, z = entry
            dz = da * (z > 0)
            _, dw, db = _conv_backward(dz, cc, need_dx=False)
            grads["stem"] = {"conv.w": dw, "conv.b": db}
            break
        group, i, c1, z1, c2, cp, z_out = entry
        gi = order.index(group)
        is_first_block_of_earliest = gi == earliest and i == 0
        need_dx = not is_first_block_of_earliest
        train_here = group in trainable
        dz = da * (z_out > 0)
        # residual branch
        da1, dw2, db2 = _conv_backward(dz, c2, need_dx=True)
        dz1 = da1 * (z1 > 0)
        dx_branch, dw1, db1 = _conv_backward(dz1, c1, need_dx=need_dx)
        if cp is not None:
            dx_short, dwp, dbp = _conv_backward(dz, cp, need_dx=need_dx)
        else:
            dx_short, dwp, dbp = (dz if need_dx else None), None, None
        if train_here:
            g = grads[group]
            g[f"b{i}.conv1.w"], g[f"b{i}.conv1.b"] = dw1, db1
            g[f"b{i}.conv2.w"], g[f"b{i}.conv2.b"] = dw2, db2
            if dwp is not None:
                g[f"b{i}.proj.w"], g[f"b{i}.proj.b"] = dwp, dbp
        if not need_dx:
            break
        da = dx_branch + dx_short
    return grads


def backward(net: Network, batch: np.ndarray, targets: np.ndarray):
    """Mean BCE-with-logits loss and gradients for every trainable group.

    ``targets`` may be soft (anywhere in [0, 1]).
    """
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < 0) or np.any(targets > 1):
        raise ConfigurationError("targets must lie in [0, 1]")
    trainable = set(net.trainable_groups())
    res = forward(net, batch, keep_cache=bool(trainable))
    per_sample = bce_with_logits(res.logits, targets)
    if not np.all(np.isfinite(per_sample)):
        bad = int(np.flatnonzero(~np.isfinite(per_sample))[0])
        raise NumericalInstabilityError("non-finite loss", batch_index=bad)
    loss = float(per_sample.mean())
    n = len(targets)
    dlogits = (sigmoid(res.logits) - targets) / n
    grads = {}
    if trainable - {"head"}:
        head_w = net.group("head").params["w"]
        grads.update(backbone_backward(net, res.cache, np.outer(dlogits, head_w)))
    if "head" in trainable:
        grads["head"] = {"w": res.features.T @ dlogits, "b": np.array([dlogits.sum()])}
    return loss, grads


def loss_only(net: Network, batch: np.ndarray, targets: np.ndarray) -> float:
    logits = forward(net, batch).logits
    return float(bce_with_logits(logits, np.asarray(targets, dtype=np.float64)).mean())


def finite_diff_grad(net: Network, batch: np.ndarray, targets: np.ndarray, step: float = 1e-5):
    """Central-difference gradient of the mean BCE loss for every trainable parameter."""
    if step <= 0:
        raise ValueError("step must be positive")
    grads = {}
    for g in net.groups:
        if not g.trainable:
            continue
        grads[g.name] = {}
        for pname, p in g.params.items():
            est = np.zeros_like(p)
            flat = p.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = loss_only(net, batch, targets)
                flat[k] = orig - step
                down = loss_only(net, batch, targets)
                flat[k] = orig
                est.reshape(-1)[k] = (up - down) / (2 * step)
            grads[g.name][pname] = est
    return grads


def count_params(net: Network, trainable_only: bool = False) -> int:
    return int(sum(g.size() for g in net.groups if g.trainable or not trainable_only))
