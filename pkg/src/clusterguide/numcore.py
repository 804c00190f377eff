"""Dense numerical kernel: small MLP with manual backprop, AdamW, checkpoints.

Everything is float64. Parameters are plain dicts keyed "W0", "b0", "W1", ...
with weight matrices shaped (fan_in, fan_out) so a batch row vector x (B, n)
propagates as x @ W + b.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def tanh_grad(x):
    t = np.tanh(x)
    return 1.0 - t * t


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "tanh": (np.tanh, tanh_grad),
}


@dataclass(frozen=True)
class MlpSpec:
    """Fully-connected net shape: widths[0] inputs through widths[-1] outputs.

    The activation follows every layer except the last. feature_layer_index
    names the hidden layer (0-based, post-activation) exported as the feature
    vector h; it must be None when the net has no hidden layer.
    """

    layer_widths: tuple[int, ...]
    activation: str = "silu"
    feature_layer_index: int | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError(f"need at least input and output widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feature_layer_index is not None:
            if not 0 <= self.feature_layer_index < self.n_hidden:
                raise ValueError(
                    f"feature_layer_index {self.feature_layer_index} invalid for "
                    f"{self.n_hidden} hidden layer(s)"
                )

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def to_json(self) -> dict:
        return {
            "layer_widths": list(self.layer_widths),
            "activation": self.activation,
            "feature_layer_index": self.feature_layer_index,
        }

    @staticmethod
    def from_json(obj: dict) -> "MlpSpec":
        return MlpSpec(
            layer_widths=tuple(obj["layer_widths"]),
            activation=obj["activation"],
            feature_layer_index=obj["feature_layer_index"],
        )


def init_params(spec: MlpSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per-layer uniform(-a, a) weights with a = sqrt(6/(fan_in+fan_out)), zero biases."""
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
    return params


def _check_input(spec: MlpSpec, x: np.ndarray, name: str, width: int):
    if x.shape[-1] != width:
        raise ValueError(
            f"{name} has width {x.shape[-1]}, layer expects {width} "
            f"(widths {spec.layer_widths})"
        )


def _forward_cache(spec, params, x):
    """Returns (output, pre_acts per layer, post_acts per hidden layer)."""
    act, _ = ACTIVATIONS[spec.activation]
    pre, post = [], []
    h = x
    for i in range(spec.n_layers):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        pre.append(z)
        if i < spec.n_layers - 1:
            h = act(z)
            post.append(h)
        else:
            h = z
    return h, pre, post


def mlp_forward(spec: MlpSpec, params: dict, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Evaluate the net. x (..., in) -> (output (..., out), hidden post-activations)."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x, "input", spec.layer_widths[0])
    y, _, post = _forward_cache(spec, params, x)
    return y, post


def mlp_backward(spec: MlpSpec, params: dict, x, upstream):
    """Exact gradients of (upstream . output) w.r.t. every parameter and the input.

    x (..., in), upstream (..., out); batch dims are summed into the parameter
    gradients. Returns (param_grads, input_grad).
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_input(spec, x, "input", spec.layer_widths[0])
    _check_input(spec, upstream, "upstream gradient", spec.layer_widths[-1])
    single = x.ndim == 1
    xb = x[None, :] if single else x.reshape(-1, x.shape[-1])
    ub = upstream[None, :] if single else upstream.reshape(-1, upstream.shape[-1])
    if xb.shape[0] != ub.shape[0]:
        raise ValueError(f"batch mismatch: input {xb.shape[0]} vs upstream {ub.shape[0]}")

    _, pre, post = _forward_cache(spec, params, xb)
    _, act_grad = ACTIVATIONS[spec.activation]
    grads = {}
    g = ub
    for i in range(spec.n_layers - 1, -1, -1):
        h_in = xb if i == 0 else post[i - 1]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"W{i}"].T
        if i > 0:
            g = g * act_grad(pre[i - 1])
    input_grad = g[0] if single else g.reshape(x.shape)
    return grads, input_grad


@dataclass
class AdamWState:
    """First/second moment estimates congruent to the parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step_count: int = 0


def adamw_init(params: dict) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adamw_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999,
               eps=1e-8, weight_decay=0.01):
    """One AdamW update with decoupled weight decay. Returns (new_params, new_state)."""
    if set(grads) != set(params):
        raise ValueError(f"gradient keys {sorted(grads)} != parameter keys {sorted(params)}")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[k].shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}")
    t = state.step_count + 1
    new_params, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p_new = p * (1.0 - lr * weight_decay) - update
        if not np.all(np.isfinite(p_new)):
            raise NumericError(f"non-finite parameter {k!r} after step {t}")
        new_params[k], new_m[k], new_v[k] = p_new, m, v
    return new_params, AdamWState(m=new_m, v=new_v, step_count=t)


# --- checkpoint serialization -----------------------------------------------
# Schema: {"version": 1, "spec": {...}, "params": [{"name","shape","data"}...],
#          "optimizer_state": optional, **extra}. Floats round-trip exactly via
# json's shortest-repr formatting.

def params_to_json(params: dict) -> list[dict]:
    return [
        {"name": k, "shape": list(p.shape), "data": np.asarray(p, dtype=np.float64).ravel().tolist()}
        for k, p in params.items()
    ]


def params_from_json(entries: list[dict]) -> dict[str, np.ndarray]:
    params = {}
    for e in entries:
        data = np.asarray(e["data"], dtype=np.float64)
        shape = tuple(e["shape"])
        if data.size != int(np.prod(shape)):
            raise ValueError(f"parameter {e['name']!r}: {data.size} values for shape {shape}")
        params[e["name"]] = data.reshape(shape)
    return params


def optimizer_state_to_json(state: AdamWState | None):
    if state is None:
        return None
    return {
        "m": params_to_json(state.m),
        "v": params_to_json(state.v),
        "step_count": state.step_count,
    }


def optimizer_state_from_json(obj) -> AdamWState | None:
    if obj is None:
        return None
    return AdamWState(
        m=params_from_json(obj["m"]),
        v=params_from_json(obj["v"]),
        step_count=int(obj["step_count"]),
    )


def save_checkpoint(path, spec: MlpSpec, params: dict,
                    optimizer_state: AdamWState | None = None,
                    extra: dict | None = None):
    doc = {
        "version": 1,
        "spec": spec.to_json(),
        "params": params_to_json(params),
        "optimizer_state": optimizer_state_to_json(optimizer_state),
    }
    if extra:
        for k, v in extra.items():
            if k in doc:
                raise ValueError(f"extra block {k!r} collides with a reserved key")
            doc[k] = v
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_checkpoint(path):
    """Returns (spec, params, optimizer_state, extra dict of any other blocks)."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r} in {path}")
    spec = MlpSpec.from_json(doc["spec"])
    params = params_from_json(doc["params"])
    opt = optimizer_state_from_json(doc.get("optimizer_state"))
    extra = {k: v for k, v in doc.items()
             if k not in ("version", "spec", "params", "optimizer_state")}
    return spec, params, opt, extra
