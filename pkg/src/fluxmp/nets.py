"""Per-variable feedforward regressors with layer gates and a softplus head.

One small fully-connected net per variable node maps that variable's observed
features to a positive flux value.  Each hidden layer output is scaled by a
learned gate (logistic of a scalar), so the trainer can penalize gate activity
to switch layers off.  Forward, reverse-mode gradients, and Adam are
implemented directly for this fixed architecture family.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import DirectedFactorGraph, FluxMatrix
from .synth import ObservationSet

ACTIVATIONS = ("leaky_relu", "tanhshrink")
VARIANTS = ("main", "appendix")

_CHECKPOINT_MAGIC = b"FMPCKPT1"

#: parameter names holding weight matrices (L2 decay applies to these only)
_WEIGHT_PREFIXES = ("W", "w_out")


@dataclass(frozen=True)
class ArchConfig:
    hidden_multipliers: tuple[int, ...] = (2, 4, 8)
    activation: str = "leaky_relu"
    dropout_rate: float = 0.5
    leaky_slope: float = 0.01
    variant: str = "main"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.variant == "main" and not self.hidden_multipliers:
            raise ValueError("main variant needs at least one hidden multiplier")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def hidden_sizes(self, n_in: int) -> tuple[int, ...]:
        if self.variant == "appendix":
            return (16,)
        return tuple(m * n_in for m in self.hidden_multipliers)

    def activation_name(self) -> str:
        return "tanhshrink" if self.variant == "appendix" else self.activation


@dataclass
class VariableNet:
    n_in: int
    hidden: tuple[int, ...]
    params: dict[str, np.ndarray]
    cache: dict | None = field(default=None, repr=False)


@dataclass
class Ensemble:
    config: ArchConfig
    nets: list[VariableNet]
    seed: int


@dataclass
class OptimizerState:
    lr: float = 0.05
    l2: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)
    v: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)


GradientSet = list  # one dict of per-parameter arrays per net


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _activation(name, z, slope):
    if name == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    return z - np.tanh(z)


def _activation_grad(name, z, slope):
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, slope)
    return np.tanh(z) ** 2


def init_ensemble(g: DirectedFactorGraph, cfg: ArchConfig, seed: int) -> Ensemble:
    """One net per variable; uniform(-1/sqrt(fan_in), +) weights, zero gates."""
    nets = []
    for var in g.variables:
        n_in = len(var.features)
        if n_in < 1:
            raise ValueError(f"variable {var.name!r} has no features")
        rng = np.random.default_rng([seed, var.id])
        hidden = cfg.hidden_sizes(n_in)
        params: dict[str, np.ndarray] = {}
        fan = n_in
        for layer, size in enumerate(hidden):
            bound = 1.0 / np.sqrt(fan)
            params[f"W{layer}"] = rng.uniform(-bound, bound, size=(fan, size))
            params[f"b{layer}"] = rng.uniform(-bound, bound, size=size)
            fan = size
        params["gates"] = np.zeros(len(hidden))
        bound = 1.0 / np.sqrt(fan)
        params["w_out"] = rng.uniform(-bound, bound, size=fan)
        params["b_out"] = np.array(rng.uniform(-bound, bound))
        nets.append(VariableNet(n_in=n_in, hidden=hidden, params=params))
    return Ensemble(config=cfg, nets=nets, seed=seed)


def _net_forward(net: VariableNet, cfg: ArchConfig, x: np.ndarray, train: bool, mask_rng) -> np.ndarray:
    act = cfg.activation_name()
    gates = net.params["gates"]
    keep = 1.0 - cfg.dropout_rate
    cache = {"x": x, "z": [], "a": [], "h_in": [], "mask": []} if train else None
    h = x
    for layer in range(len(net.hidden)):
        z = h @ net.params[f"W{layer}"] + net.params[f"b{layer}"]
        a = _activation(act, z, cfg.leaky_slope)
        out = _sigmoid(gates[layer]) * a
        if train and cfg.dropout_rate > 0.0:
            mask = (mask_rng.random(out.shape) < keep) / keep
            out = out * mask
        else:
            mask = None
        if train:
            cache["h_in"].append(h)
            cache["z"].append(z)
            cache["a"].append(a)
            cache["mask"].append(mask)
        h = out
    t = h @ net.params["w_out"] + net.params["b_out"]
    if train:
        cache["h_last"] = h
        cache["t"] = t
        net.cache = cache
    return _softplus(t)


def forward(ens: Ensemble, obs: ObservationSet, mode: str = "eval", seed: int = 0) -> FluxMatrix:
    """Stack per-net predictions into an m x K matrix (always positive).

    Train mode applies inverted dropout with masks drawn from substreams keyed
    by (ensemble seed, net id, call seed), and caches activations for the
    paired backward call.  Eval mode is deterministic and cache-free.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(obs.matrices) != len(ens.nets):
        raise ValueError(f"observation set has {len(obs.matrices)} variables, ensemble has {len(ens.nets)}")
    cols = []
    for k, (net, mat) in enumerate(zip(ens.nets, obs.matrices)):
        if mat.shape[1] != net.n_in:
            raise ValueError(f"variable {k}: expected {net.n_in} features, got {mat.shape[1]}")
        mask_rng = np.random.default_rng([ens.seed, k, seed, 0xD0]) if mode == "train" else None
        y = _net_forward(net, ens.config, np.asarray(mat, dtype=float), mode == "train", mask_rng)
        if not np.isfinite(y).all():
            raise FloatingPointError(f"non-finite activations in net {k}")
        cols.append(y)
    return np.column_stack(cols)


def backward(ens: Ensemble, obs: ObservationSet, d_loss_d_flux: FluxMatrix) -> GradientSet:
    """Exact parameter gradients for the last train-mode forward.

    ``d_loss_d_flux`` is the loss gradient at the stacked outputs (m x K).
    """
    d = np.asarray(d_loss_d_flux, dtype=float)
    if d.shape != (obs.n_samples, len(ens.nets)):
        raise ValueError(f"gradient must be {(obs.n_samples, len(ens.nets))}, got {d.shape}")
    cfg = ens.config
    act = cfg.activation_name()
    grads: GradientSet = []
    for k, net in enumerate(ens.nets):
        cache = net.cache
        if cache is None or cache["x"].shape[0] != obs.n_samples:
            raise RuntimeError(f"net {k} has no cached forward state for this batch")
        g: dict[str, np.ndarray] = {}
        dt = d[:, k] * _sigmoid(cache["t"])
        g["w_out"] = cache["h_last"].T @ dt
        g["b_out"] = np.array(dt.sum())
        dh = np.outer(dt, net.params["w_out"])
        g["gates"] = np.zeros(len(net.hidden))
        gates = net.params["gates"]
        for layer in reversed(range(len(net.hidden))):
            mask = cache["mask"][layer]
            if mask is not None:
                dh = dh * mask
            a, z = cache["a"][layer], cache["z"][layer]
            gate_fac = _sigmoid(gates[layer])
            g["gates"][layer] = float((dh * a).sum() * gate_fac * (1.0 - gate_fac))
            da = dh * gate_fac
            dz = da * _activation_grad(act, z, cfg.leaky_slope)
            g[f"W{layer}"] = cache["h_in"][layer].T @ dz
            g[f"b{layer}"] = dz.sum(axis=0)
            dh = dz @ net.params[f"W{layer}"].T
        grads.append(g)
    return grads


def init_optimizer(ens: Ensemble, lr: float = 0.05, l2: float = 1e-4) -> OptimizerState:
    opt = OptimizerState(lr=lr, l2=l2)
    for net in ens.nets:
        opt.m.append({k: np.zeros_like(v) for k, v in net.params.items()})
        opt.v.append({k: np.zeros_like(v) for k, v in net.params.items()})
    return opt


def _is_weight(name: str) -> bool:
    return name == "w_out" or (name.startswith("W") and name[1:].isdigit())


def adam_step(ens: Ensemble, grads: GradientSet, opt: OptimizerState) -> tuple[Ensemble, OptimizerState]:
    """In-place Adam update with coupled L2 on weight matrices only."""
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for net, g, m, v in zip(ens.nets, grads, opt.m, opt.v):
        for name, theta in net.params.items():
            grad = g[name] + (opt.l2 * theta if _is_weight(name) else 0.0)
            m[name] = opt.beta1 * m[name] + (1.0 - opt.beta1) * grad
            v[name] = opt.beta2 * v[name] + (1.0 - opt.beta2) * grad**2
            theta -= opt.lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + opt.eps)
    return ens, opt


def gate_activity(ens: Ensemble) -> np.ndarray:
    """Logistic gate factors, one per hidden layer per net, flattened."""
    return np.concatenate([_sigmoid(net.params["gates"]) for net in ens.nets])


def clone_params(ens: Ensemble) -> list[dict[str, np.ndarray]]:
    return [{k: v.copy() for k, v in net.params.items()} for net in ens.nets]


def restore_params(ens: Ensemble, snapshot: list[dict[str, np.ndarray]]) -> None:
    for net, params in zip(ens.nets, snapshot):
        for k in net.params:
            net.params[k] = params[k].copy()


# -- checkpoint container -----------------------------------------------------
#
# Layout: magic, u64 header length, JSON header, then the raw little-endian
# float64 buffers in header order.  Fully deterministic bytes.


def save_checkpoint(path, ens: Ensemble, opt: OptimizerState) -> None:
    arrays: list[np.ndarray] = []
    index = []
    for k, net in enumerate(ens.nets):
        for name in sorted(net.params):
            arr = np.asarray(net.params[name], dtype="<f8")
            index.append({"net": k, "kind": "param", "name": name, "shape": list(arr.shape)})
            arrays.append(arr)
        for kind, store in (("adam_m", opt.m[k]), ("adam_v", opt.v[k])):
            for name in sorted(store):
                arr = np.asarray(store[name], dtype="<f8")
                index.append({"net": k, "kind": kind, "name": name, "shape": list(arr.shape)})
                arrays.append(arr)
    header = {
        "version": 1,
        "seed": ens.seed,
        "arch": {
            "hidden_multipliers": list(ens.config.hidden_multipliers),
            "activation": ens.config.activation,
            "dropout_rate": ens.config.dropout_rate,
            "leaky_slope": ens.config.leaky_slope,
            "variant": ens.config.variant,
        },
        "n_in": [net.n_in for net in ens.nets],
        "hidden": [list(net.hidden) for net in ens.nets],
        "opt": {
            "lr": opt.lr,
            "l2": opt.l2,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step": opt.step,
        },
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[Ensemble, OptimizerState]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        cfg = ArchConfig(
            hidden_multipliers=tuple(header["arch"]["hidden_multipliers"]),
            activation=header["arch"]["activation"],
            dropout_rate=header["arch"]["dropout_rate"],
            leaky_slope=header["arch"]["leaky_slope"],
            variant=header["arch"]["variant"],
        )
        nets = [
            VariableNet(n_in=n_in, hidden=tuple(hidden), params={})
            for n_in, hidden in zip(header["n_in"], header["hidden"])
        ]
        o = header["opt"]
        opt = OptimizerState(lr=o["lr"], l2=o["l2"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        opt.m = [{} for _ in nets]
        opt.v = [{} for _ in nets]
        for entry in header["arrays"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(fh.read(size * 8), dtype="<f8").reshape(entry["shape"]).copy()
            if entry["kind"] == "param":
                nets[entry["net"]].params[entry["name"]] = arr
            elif entry["kind"] == "adam_m":
                opt.m[entry["net"]][entry["name"]] = arr
            else:
                opt.v[entry["net"]][entry["name"]] = arr
    return Ensemble(config=cfg, nets=nets, seed=header["seed"]), opt
