"""The scope-adaptive GNN: masked residual layers, heads, and prediction.

Layer l computes ReLU(A_hat H W_l) masked columnwise by the relaxed hop vector
z_l, plus a residual. The input projection (F -> O) sits outside the masked
stack because the residual needs matching dimensions; it does not count toward
the neighborhood scope. The output head is a plain linear map, softmax applied
by consumers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distributions import MaskSample, VariationalPosterior, draw_mask_sample
from .graph import Graph

BACKBONES = ("bna", "gcn", "resgcn")


@dataclass
class ModelParams:
    """Input projection, per-hop square weights, and the classification head."""

    w_in: ad.Tensor  # (F, O)
    w_hidden: list  # T tensors of shape (O, O)
    w_out: ad.Tensor  # (O, C)

    @property
    def width(self):
        return self.w_in.value.shape[1]

    @property
    def depth(self):
        return len(self.w_hidden)

    def parameters(self):
        return [self.w_in, *self.w_hidden, self.w_out]

    def snapshot(self):
        return [p.value.copy() for p in self.parameters()]

    def restore(self, values):
        for p, v in zip(self.parameters(), values):
            p.value = v.copy()


def init_params(n_features, width, n_classes, depth, rng) -> ModelParams:
    """Glorot-uniform initialization for all weight matrices."""

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return ad.Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

    return ModelParams(
        w_in=glorot(n_features, width),
        w_hidden=[glorot(width, width) for _ in range(depth)],
        w_out=glorot(width, n_classes),
    )


@dataclass
class ForwardTrace:
    hidden: list  # H_0 .. H_{layers used}, each (N, O)
    logits: ad.Tensor  # (N, C)
    mask_sample: MaskSample = field(default=None)


def _dropout_const(shape, rate, train_mode, rng):
    """Inverted-dropout multiplier matrix, identity at eval time."""
    if not train_mode or rate <= 0.0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def forward_layer(h_prev, a_hat, w_l, z_l, dropout_rate=0.0, train_mode=False, rng=None):
    """H_l = ReLU(A_hat dropout(H_{l-1}) W_l) * z_l + H_{l-1}.

    ``z_l`` may be None (no masking, the plain residual layer).
    """
    h = h_prev
    drop = _dropout_const(h.value.shape, dropout_rate, train_mode, rng)
    if drop is not None:
        h = ad.mul_const(h, drop)
    agg = ad.relu(ad.matmul(ad.matmul(a_hat, h), w_l))
    if z_l is not None:
        agg = ad.mask_multiply(agg, z_l)
    return ad.add(agg, h_prev)


def forward_model(
    graph: Graph,
    params: ModelParams,
    mask_sample: MaskSample = None,
    mode: str = "bna",
    train_mode: bool = False,
    dropout_rate: float = 0.0,
    rng=None,
    a_hat=None,
) -> ForwardTrace:
    """Full forward pass in one of three modes.

    bna    -- input projection, then ``mask_sample.scope`` masked residual
              layers using the relaxed z columns
    resgcn -- all-ones masks, fixed depth = len(params.w_hidden)
    gcn    -- no residual, no mask, fixed depth

    ``a_hat`` overrides the graph's cached adjacency (dropedge views).
    """
    if mode not in BACKBONES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "bna" and mask_sample is None:
        raise ValueError("mode 'bna' requires a mask sample")

    a = a_hat if a_hat is not None else ad.constant(graph.a_hat, name="a_hat")
    x = ad.constant(graph.features, name="x")

    x_in = x
    drop = _dropout_const(x.value.shape, dropout_rate, train_mode, rng)
    if drop is not None:
        x_in = ad.mul_const(x, drop)
    h = ad.relu(ad.matmul(ad.matmul(a, x_in), params.w_in))
    hidden = [h]

    if mode == "bna":
        for l in range(mask_sample.scope):
            z_l = ad.column(mask_sample.z, l)
            h = forward_layer(h, a, params.w_hidden[l], z_l, dropout_rate, train_mode, rng)
            hidden.append(h)
    elif mode == "resgcn":
        for w_l in params.w_hidden:
            h = forward_layer(h, a, w_l, None, dropout_rate, train_mode, rng)
            hidden.append(h)
    else:  # gcn: plain stacked convolutions, no residual
        for w_l in params.w_hidden:
            hd = h
            drop = _dropout_const(h.value.shape, dropout_rate, train_mode, rng)
            if drop is not None:
                hd = ad.mul_const(h, drop)
            h = ad.relu(ad.matmul(ad.matmul(a, hd), w_l))
            hidden.append(h)

    logits = ad.matmul(h, params.w_out)
    return ForwardTrace(hidden=hidden, logits=logits, mask_sample=mask_sample)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def hard_mask_sample(sample: MaskSample, threshold=0.5) -> MaskSample:
    """Threshold the relaxed masks to exact {0, 1} values (eval-mask policy)."""
    z_hard = ad.constant((sample.z.value > threshold).astype(np.float64))
    out = MaskSample(nu=sample.nu, pi=sample.pi, z=z_hard, u_nu=sample.u_nu, eps_z=sample.eps_z)
    out.scope = sample.scope
    return out


def expected_mask_sample(post: VariationalPosterior, width: int) -> MaskSample:
    """Deterministic masks equal to the posterior-mean sticks.

    Uses the Kumaraswamy mean b * B(1 + 1/a, b) per hop and broadcasts the
    resulting pi over the feature dimension.
    """
    from scipy import special

    a, b = post.a, post.b
    mean_nu = b * np.exp(special.betaln(1.0 + 1.0 / a, b))
    pi = np.cumprod(mean_nu)
    z = ad.constant(np.tile(pi, (width, 1)))
    sample = MaskSample(
        nu=ad.constant(mean_nu), pi=ad.constant(pi), z=z,
        u_nu=np.zeros(post.truncation), eps_z=np.zeros((width, post.truncation)),
    )
    from .distributions import neighborhood_scope

    sample.scope = neighborhood_scope(z.value)
    return sample


def predict(
    graph: Graph,
    params: ModelParams,
    posterior: VariationalPosterior,
    n_samples: int,
    rng,
    mode: str = "bna",
    eval_mask_policy: str = "sample",
) -> np.ndarray:
    """Average softmax output over Monte-Carlo structure samples, dropout off.

    ``eval_mask_policy``: "sample" (fresh relaxed draws, the default), "hard"
    (thresholded draws), or "expected" (posterior-mean sticks, S ignored).
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if mode != "bna":
        trace = forward_model(graph, params, mode=mode)
        return softmax_rows(trace.logits.value)
    if eval_mask_policy == "expected":
        sample = expected_mask_sample(posterior, params.width)
        trace = forward_model(graph, params, mask_sample=sample)
        return softmax_rows(trace.logits.value)

    total = np.zeros((graph.n_nodes, params.w_out.value.shape[1]))
    for _ in range(n_samples):
        sample = draw_mask_sample(posterior, params.width, rng)
        if eval_mask_policy == "hard":
            sample = hard_mask_sample(sample)
        elif eval_mask_policy != "sample":
            raise ValueError(f"unknown eval mask policy {eval_mask_policy!r}")
        trace = forward_model(graph, params, mask_sample=sample)
        total += softmax_rows(trace.logits.value)
    return total / n_samples


# ---------------------------------------------------------------------------
# checkpoint container: byte-stable across platforms for a fixed version

_MAGIC = b"SGNN"
_VERSION = 1


def save_checkpoint(path, params: ModelParams, posterior: VariationalPosterior, config: dict):
    """Versioned binary container: named float64 arrays plus a config snapshot."""
    arrays = [("w_in", params.w_in.value)]
    for i, w in enumerate(params.w_hidden):
        arrays.append((f"w_hidden_{i}", w.value))
    arrays.append(("w_out", params.w_out.value))
    arrays.append(("log_a", posterior.log_a.value))
    arrays.append(("log_b", posterior.log_b.value))

    cfg_items = sorted({**config, "truncation": posterior.truncation, "tau": posterior.tau}.items())
    cfg_blob = "\n".join(f"{k} {v!r}" for k, v in cfg_items).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        for name, arr in arrays:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelParams, VariationalPosterior, config dict)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_arrays = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = {}
        for line in fh.read(cfg_len).decode("utf-8").splitlines():
            k, _, v = line.partition(" ")
            try:
                config[k] = eval(v, {"__builtins__": {}})  # repr'd scalars and strings only
            except Exception:
                config[k] = v
        arrays = {}
        for _ in range(n_arrays):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()

    hidden_names = sorted(
        (n for n in arrays if n.startswith("w_hidden_")), key=lambda n: int(n.rsplit("_", 1)[1])
    )
    params = ModelParams(
        w_in=ad.Tensor(arrays["w_in"], requires_grad=True),
        w_hidden=[ad.Tensor(arrays[n], requires_grad=True) for n in hidden_names],
        w_out=ad.Tensor(arrays["w_out"], requires_grad=True),
    )
    posterior = VariationalPosterior(
        truncation=int(arrays["log_a"].shape[0]),
        tau=float(config.get("tau", 0.67)),
        log_a=ad.Tensor(arrays["log_a"], requires_grad=True),
        log_b=ad.Tensor(arrays["log_b"], requires_grad=True),
    )
    return params, posterior, config
