"""Trainable pieces: control policies, reparameterization matrices, Adam.

Three policy variants share one protocol: `params` (dict of numpy arrays,
possibly empty), `eval_batch(x, t)` for plain numpy evaluation, and
`forward(tape, pvars, x, t)` for tape-recorded evaluation. `param_vars(tape)`
registers the parameters as leaves.

The reparameterization matrices map a (start, end) time pair to a d x d matrix
that equals the identity on the diagonal of the time square. The gated variant
blends a small MLP against the identity with an exponential gate in (end -
start), and produces the analytic end-time derivative through a forward
tangent stream recorded on the same tape, so parameter gradients flow through
both the matrix and its derivative.
"""

from __future__ import annotations

import io
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var, tiled_matmul_values
from .errors import CheckpointError, ContractError, CorruptModelError

__all__ = [
    "Mlp", "NeuralPolicy", "ClosedFormPolicy", "CompositePolicy",
    "IdentityMatrices", "GatedMatrices", "Adam",
    "save_checkpoint", "load_checkpoint", "eval_time_grouped",
]


class Mlp:
    """Fully connected stack; optional residual links between equal-width hiddens."""

    def __init__(self, in_dim: int, out_dim: int, width: int, hidden: int,
                 activation: str, residual: bool, rng: np.random.Generator,
                 zero_final: bool = True, final_bias: np.ndarray | None = None):
        if activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.width = width
        self.hidden = hidden
        self.activation = activation
        self.residual = residual
        self.params: dict[str, np.ndarray] = {}
        fan_ins = [in_dim] + [width] * hidden
        for layer in range(hidden):
            # He fan-in scaling keeps activations O(1) at init
            self.params[f"w{layer}"] = rng.standard_normal(
                (fan_ins[layer], width)) * np.sqrt(2.0 / fan_ins[layer])
            self.params[f"b{layer}"] = np.zeros(width)
        if zero_final:
            wf = np.zeros((width, out_dim))
        else:
            wf = rng.standard_normal((width, out_dim)) * np.sqrt(2.0 / width)
        self.params[f"w{hidden}"] = wf
        self.params[f"b{hidden}"] = np.zeros(out_dim) if final_bias is None else np.asarray(
            final_bias, dtype=float).copy()

    def _act_values(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else np.tanh(z)

    def forward_values(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        h = self._act_values(tiled_matmul_values(x, p["w0"]) + p["b0"])
        for layer in range(1, self.hidden):
            z = self._act_values(tiled_matmul_values(h, p[f"w{layer}"]) + p[f"b{layer}"])
            h = h + z if self.residual else z
        return tiled_matmul_values(h, p[f"w{self.hidden}"]) + p[f"b{self.hidden}"]

    def forward(self, tape: Tape, pvars: dict[str, Var], x) -> Var:
        act = ad.relu if self.activation == "relu" else ad.tanh
        h = act(ad.matmul(x, pvars["w0"]) + pvars["b0"])
        for layer in range(1, self.hidden):
            z = act(ad.matmul(h, pvars[f"w{layer}"]) + pvars[f"b{layer}"])
            h = h + z if self.residual else z
        return ad.matmul(h, pvars[f"w{self.hidden}"]) + pvars[f"b{self.hidden}"]

    def forward_with_tangent(self, tape: Tape, pvars: dict[str, Var], x: np.ndarray,
                             x_tangent: np.ndarray):
        """Forward pass plus the directional derivative along x_tangent.

        Both streams are recorded on the tape, so parameter gradients flow
        through the tangent as well. Only tanh supports this (the derivative
        must be continuous in the input).
        """
        if self.activation != "tanh":
            raise ContractError("tangent propagation requires a smooth activation")
        h = ad.tanh(ad.matmul(x, pvars["w0"]) + pvars["b0"])
        dh = ad.mul(1.0 - ad.square(h), ad.matmul(x_tangent, pvars["w0"]))
        for layer in range(1, self.hidden):
            z = ad.tanh(ad.matmul(h, pvars[f"w{layer}"]) + pvars[f"b{layer}"])
            dz = ad.mul(1.0 - ad.square(z), ad.matmul(dh, pvars[f"w{layer}"]))
            if self.residual:
                h, dh = h + z, dh + dz
            else:
                h, dh = z, dz
        wf = pvars[f"w{self.hidden}"]
        out = ad.matmul(h, wf) + pvars[f"b{self.hidden}"]
        d_out = ad.matmul(dh, wf)
        return out, d_out


def _check_finite_params(params: dict[str, np.ndarray]):
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise CorruptModelError(f"parameter {name} contains non-finite entries")


def _time_column(t, n: int) -> np.ndarray:
    t_arr = np.asarray(t, dtype=float)
    if t_arr.ndim == 0:
        return np.full((n, 1), float(t_arr))
    return t_arr.reshape(n, 1)


def eval_time_grouped(fn, x: np.ndarray, t) -> np.ndarray:
    """Evaluate a scalar-time control callable on rows with per-row times.

    Closed-form controls take one scalar time per call; when t is an array the
    rows are grouped by unique time value and evaluated group by group. Row
    results do not depend on the grouping because fn is vectorized over rows.
    """
    t_arr = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    if t_arr.ndim == 0:
        return np.asarray(fn(x, float(t_arr)), dtype=float)
    out = None
    for val in np.unique(t_arr):
        mask = t_arr == val
        res = np.asarray(fn(x[mask], float(val)), dtype=float)
        if out is None:
            out = np.empty((x.shape[0], res.shape[1]), dtype=float)
        out[mask] = res
    return out


class NeuralPolicy:
    """MLP control u(x,t); input is (x, t) concatenated, final layer zero-init."""

    def __init__(self, dim: int, width: int = 128, hidden: int = 3,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.net = Mlp(dim + 1, dim, width, hidden, "relu", residual=True,
                       rng=rng, zero_final=True)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.net.params

    def param_vars(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def eval_batch(self, x: np.ndarray, t) -> np.ndarray:
        _check_finite_params(self.params)
        x = np.asarray(x, dtype=float)
        inp = np.concatenate([x, _time_column(t, x.shape[0])], axis=1)
        return self.net.forward_values(inp)

    __call__ = eval_batch

    def forward(self, tape: Tape, pvars: dict[str, Var], x, t) -> Var:
        _check_finite_params(self.params)
        n = x.shape[0]
        tcol = _time_column(t, n)
        if isinstance(x, Var):
            inp = ad.concat([x, tcol], axis=1)
        else:
            inp = np.concatenate([np.asarray(x, dtype=float), tcol], axis=1)
        return self.net.forward(tape, pvars, inp)


class ClosedFormPolicy:
    """Wraps a ground-truth control callable; carries no parameters."""

    def __init__(self, fn):
        self.fn = fn
        self.params: dict[str, np.ndarray] = {}

    def param_vars(self, tape: Tape) -> dict[str, Var]:
        return {}

    def eval_batch(self, x: np.ndarray, t) -> np.ndarray:
        return eval_time_grouped(self.fn, x, t)

    __call__ = eval_batch

    def forward(self, tape: Tape, pvars: dict[str, Var], x, t) -> Var:
        xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=float)
        # no parameters: the evaluation enters the tape as a constant leaf
        return tape.leaf(self.eval_batch(xv, t))


class CompositePolicy:
    """Frozen warm-start control plus a trainable residual network."""

    def __init__(self, base_fn, residual: NeuralPolicy):
        self.base_fn = base_fn
        self.residual = residual

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.residual.params

    def param_vars(self, tape: Tape) -> dict[str, Var]:
        return self.residual.param_vars(tape)

    def eval_batch(self, x: np.ndarray, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return eval_time_grouped(self.base_fn, x, t) + self.residual.eval_batch(x, t)

    __call__ = eval_batch

    def forward(self, tape: Tape, pvars: dict[str, Var], x, t) -> Var:
        xv = x.value if isinstance(x, Var) else np.asarray(x, dtype=float)
        base = eval_time_grouped(self.base_fn, xv, t)
        return ad.add(self.residual.forward(tape, pvars, x, t), base)


class IdentityMatrices:
    """The fixed choice M(t,s) = Id, dM/ds = 0."""

    is_identity = True

    def __init__(self, dim: int):
        self.dim = dim
        self.params: dict[str, np.ndarray] = {}

    def param_vars(self, tape: Tape) -> dict[str, Var]:
        return {}

    def eval_pairs_values(self, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        _check_pair_order(ts)
        p = ts.shape[0]
        eye = np.broadcast_to(np.eye(self.dim), (p, self.dim, self.dim)).copy()
        return eye, np.zeros_like(eye)

    def forward_pairs(self, tape: Tape, pvars: dict[str, Var], ts: np.ndarray):
        m, dm = self.eval_pairs_values(ts)
        return tape.leaf(m), tape.leaf(dm)


def _check_pair_order(ts: np.ndarray):
    if ts.ndim != 2 or ts.shape[1] != 2:
        raise ContractError("time pairs must have shape (n, 2)")
    if np.any(ts[:, 1] < ts[:, 0] - 1e-12):
        raise ContractError("matrix evaluation requires end time >= start time")


class GatedMatrices:
    """M(t,s) = e^{-g(s-t)} Id + (1 - e^{-g(s-t)}) Mtilde(t,s), g = softplus(raw).

    Mtilde is a tanh MLP from (t,s) to d*d entries reshaped row-major; its last
    layer starts at weights 0, bias vec(Id), so training starts exactly at the
    identity matrices. The raw gate parameter starts at softplus^{-1}(1).
    """

    is_identity = False

    def __init__(self, dim: int, width: int = 64, hidden: int = 2,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.dim = dim
        self.net = Mlp(2, dim * dim, width, hidden, "tanh", residual=False,
                       rng=rng, zero_final=True,
                       final_bias=np.eye(dim).reshape(-1))
        # softplus of this raw value is bitwise 1.0
        self.params: dict[str, np.ndarray] = {"gamma_raw": np.array([0.5413248546129181])}
        for k, v in self.net.params.items():
            self.params[f"net.{k}"] = v
        self.net.params = {}  # single source of truth is self.params

    def param_vars(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def _net_params(self) -> dict[str, np.ndarray]:
        return {k[len("net."):]: v for k, v in self.params.items() if k.startswith("net.")}

    def gamma(self) -> float:
        return float(np.logaddexp(0.0, self.params["gamma_raw"][0]))

    def eval_pairs_values(self, ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        _check_pair_order(ts)
        p = ts.shape[0]
        d = self.dim
        # plain numpy mirror of forward_pairs
        gam = self.gamma()
        delta = ts[:, 1] - ts[:, 0]
        gate = np.exp(-gam * delta)[:, None, None]
        mt, dmt = self._net_values_with_tangent(ts)
        mt = mt.reshape(p, d, d)
        dmt = dmt.reshape(p, d, d)
        eye = np.eye(d)
        m = gate * eye + (1.0 - gate) * mt
        dm = gam * gate * (mt - eye) + (1.0 - gate) * dmt
        return m, dm

    def _net_values_with_tangent(self, ts: np.ndarray):
        p = self._net_params()
        tangent = np.broadcast_to(np.array([0.0, 1.0]), ts.shape)
        h = np.tanh(tiled_matmul_values(ts, p["w0"]) + p["b0"])
        dh = (1.0 - h * h) * tiled_matmul_values(tangent, p["w0"])
        for layer in range(1, self.net.hidden):
            z = np.tanh(tiled_matmul_values(h, p[f"w{layer}"]) + p[f"b{layer}"])
            dh = (1.0 - z * z) * tiled_matmul_values(dh, p[f"w{layer}"])
            h = z
        wf = p[f"w{self.net.hidden}"]
        return (tiled_matmul_values(h, wf) + p[f"b{self.net.hidden}"],
                tiled_matmul_values(dh, wf))

    def forward_pairs(self, tape: Tape, pvars: dict[str, Var], ts: np.ndarray):
        ts = np.asarray(ts, dtype=float)
        _check_pair_order(ts)
        p, d = ts.shape[0], self.dim
        net_vars = {k[len("net."):]: v for k, v in pvars.items() if k.startswith("net.")}
        tangent = np.broadcast_to(np.array([0.0, 1.0]), ts.shape).copy()
        flat, dflat = self.net.forward_with_tangent(tape, net_vars, ts, tangent)
        mt = ad.reshape(flat, (p, d, d))
        dmt = ad.reshape(dflat, (p, d, d))
        gam = ad.softplus(pvars["gamma_raw"])  # shape (1,)
        delta = (ts[:, 1] - ts[:, 0]).reshape(p, 1, 1)
        gate = ad.exp(ad.mul(ad.reshape(gam, (1, 1, 1)), -delta))  # (p,1,1)
        eye = np.eye(d)
        m = ad.add(ad.mul(gate, eye), ad.mul(1.0 - gate, mt))
        dm = ad.add(
            ad.mul(ad.mul(ad.reshape(gam, (1, 1, 1)), gate), ad.sub(mt, eye)),
            ad.mul(1.0 - gate, dmt),
        )
        return m, dm


class Adam:
    """Bias-corrected Adam. Non-finite gradients skip the update but advance
    the step counter (skip-and-flag, surfaced through `skipped`)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0
        self.skipped = 0

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        """Apply one update; returns False if skipped due to non-finite grads."""
        if set(grads) != set(self.params):
            raise ContractError("gradient keys do not match parameter keys")
        for k, g in grads.items():
            if np.asarray(g).shape != self.params[k].shape:
                raise ContractError(f"gradient shape mismatch for {k}")
        self.t += 1
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            g = np.asarray(g, dtype=float)
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return True


_CHECKPOINT_VERSION = 1


def save_checkpoint(path, architecture: dict, groups: dict[str, dict[str, np.ndarray]]):
    """Versioned binary blob of parameter groups plus a text shape manifest."""
    payload = {"__meta__": np.frombuffer(
        json.dumps({"version": _CHECKPOINT_VERSION, "architecture": architecture},
                   sort_keys=True).encode(), dtype=np.uint8)}
    manifest = io.StringIO()
    manifest.write(f"checkpoint version {_CHECKPOINT_VERSION}\n")
    for group, params in sorted(groups.items()):
        for name, arr in sorted(params.items()):
            payload[f"{group}/{name}"] = arr
            manifest.write(f"{group}/{name} shape={tuple(arr.shape)} dtype={arr.dtype}\n")
    np.savez(path, **payload)
    manifest_path = str(path)
    if manifest_path.endswith(".npz"):
        manifest_path = manifest_path[:-4]
    with open(manifest_path + ".manifest.txt", "w") as fh:
        fh.write(manifest.getvalue())


def load_checkpoint(path):
    """Returns (architecture dict, {group: {name: array}})."""
    try:
        with np.load(path) as blob:
            meta = json.loads(bytes(blob["__meta__"]).decode())
            if meta.get("version") != _CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint version {meta.get('version')!r}")
            groups: dict[str, dict[str, np.ndarray]] = {}
            for key in blob.files:
                if key == "__meta__":
                    continue
                group, name = key.split("/", 1)
                groups.setdefault(group, {})[name] = blob[key]
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return meta["architecture"], groups
