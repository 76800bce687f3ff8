"""Multi-task phoneme/token network.

A trainable linear input transform (identity-initialized, applied per
context block), a stack of shared nonlinear layers, and one softmax output
head per task.  Implemented directly in numpy so parameter groups can be
frozen exactly (frozen groups receive exact-zero gradients and are skipped
by the optimizer) and gradients can be verified against finite differences
in 64-bit arithmetic.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericsError, ShapeError, TargetError

MODEL_MAGIC = b"PTDN"
MODEL_VERSION = 1

PHONEME_HEAD = "phoneme"


def _nonlin(name, a):
    if name == "sigmoid":
        return expit(a)
    if name == "tanh":
        return np.tanh(a)
    raise ConfigError(f"unknown nonlinearity {name!r}")


def _nonlin_grad(name, activated):
    if name == "sigmoid":
        return activated * (1.0 - activated)
    if name == "tanh":
        return 1.0 - activated**2
    raise ConfigError(f"unknown nonlinearity {name!r}")


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class FdlrTransform:
    """Linear input transform applied to each context block.

    In "shared_block" mode one (d, d) matrix plus bias is replicated across
    the context blocks of the spliced input; "full" mode uses one matrix
    over the whole spliced vector.  Identity-initialized transforms map any
    input to itself exactly.
    """

    def __init__(self, weight, bias, n_blocks=9, mode="shared_block"):
        if mode not in ("shared_block", "full"):
            raise ConfigError(f"unknown fdlr mode {mode!r}")
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.n_blocks = n_blocks
        self.mode = mode

    @classmethod
    def identity(cls, block_dim=39, n_blocks=9, mode="shared_block"):
        d = block_dim if mode == "shared_block" else block_dim * n_blocks
        return cls(np.eye(d), np.zeros(d), n_blocks=n_blocks, mode=mode)

    @property
    def input_dim(self):
        if self.mode == "shared_block":
            return self.weight.shape[0] * self.n_blocks
        return self.weight.shape[0]

    def apply(self, x):
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"fdlr expects dim {self.input_dim}, got {x.shape[1]}")
        if self.mode == "full":
            return x @ self.weight.T + self.bias
        n, d = x.shape[0], self.weight.shape[0]
        blocks = x.reshape(n, self.n_blocks, d)
        return (blocks @ self.weight.T + self.bias).reshape(n, -1)

    def input_gradient(self, d_out):
        """Gradient with respect to the transform's input."""
        if self.mode == "full":
            return d_out @ self.weight
        n, d = d_out.shape[0], self.weight.shape[0]
        return (d_out.reshape(n, self.n_blocks, d) @ self.weight).reshape(n, -1)

    def backward(self, x, d_out):
        """Gradients of the transform parameters given upstream d_out."""
        if self.mode == "full":
            return {"weight": d_out.T @ x, "bias": d_out.sum(axis=0)}
        n, d = x.shape[0], self.weight.shape[0]
        xb = x.reshape(n, self.n_blocks, d)
        db = d_out.reshape(n, self.n_blocks, d)
        grad_w = np.einsum("nbi,nbj->ij", db, xb)
        return {"weight": grad_w, "bias": db.sum(axis=(0, 1))}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class AffineStack:
    """Affine layers with a nonlinearity after each (or none on the last).

    Serves both the shared hidden stack (all nonlinear) and the output heads
    (final layer linear, softmax applied by the model).
    """

    def __init__(self, layers, nonlinearity="sigmoid", linear_output=False):
        self.layers = [(np.asarray(w, np.float64), np.asarray(b, np.float64))
                       for w, b in layers]
        self.nonlinearity = nonlinearity
        self.linear_output = linear_output

    @classmethod
    def random(cls, dims, rng, scale=None, nonlinearity="sigmoid",
               linear_output=False):
        layers = []
        for d_in, d_out in zip(dims, dims[1:]):
            s = scale if scale is not None else 1.0 / np.sqrt(d_in)
            layers.append((rng.normal(0.0, s, size=(d_in, d_out)), np.zeros(d_out)))
        return cls(layers, nonlinearity, linear_output)

    def forward(self, x):
        """Returns (output, cache of per-layer inputs)."""
        inputs = [x]
        h = x
        for i, (w, b) in enumerate(self.layers):
            a = h @ w + b
            last = i == len(self.layers) - 1
            h = a if (last and self.linear_output) else _nonlin(self.nonlinearity, a)
            inputs.append(h)
        return h, inputs

    def backward(self, cache, d_out):
        """Returns (d_input, [(dW, db) per layer])."""
        grads = [None] * len(self.layers)
        d = d_out
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            out_i = cache[i + 1]
            last = i == len(self.layers) - 1
            if not (last and self.linear_output):
                d = d * _nonlin_grad(self.nonlinearity, out_i)
            grads[i] = (cache[i].T @ d, d.sum(axis=0))
            d = d @ w.T
        return d, grads

    def params(self):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out


@dataclass
class LossWeights:
    """Multi-task loss weights: combined loss is
    w_phoneme * phoneme CE + w_token * sum of token-head CEs."""

    w_phoneme: float = 4.0
    w_token: float = 1.0

    def __post_init__(self):
        if self.w_phoneme < 0 or self.w_token < 0:
            raise ConfigError("loss weights must be nonnegative")

    def weight_for(self, head_name):
        return self.w_phoneme if head_name == PHONEME_HEAD else self.w_token


class PtdnnModel:
    """fDLR transform + shared stack + named output heads.

    Parameter groups are "fdlr", "shared", and "head:<name>"; each can be
    frozen independently.  Frozen groups get exact-zero gradients and are
    never touched by the optimizer.
    """

    def __init__(self, fdlr, shared, heads, nonlinearity="sigmoid"):
        if not heads:
            raise ConfigError("model needs at least one output head")
        self.fdlr = fdlr
        self.shared = shared
        self.heads = dict(heads)
        self.nonlinearity = nonlinearity
        self.frozen = {name: False for name in self.group_names()}
        self.metadata = {}

    # -- structure ---------------------------------------------------------

    @classmethod
    def build(cls, input_dim, hidden_dims, head_inventories, seed=0,
              nonlinearity="sigmoid", block_dim=39, fdlr_mode="shared_block",
              head_hidden=0):
        rng = np.random.default_rng(seed)
        n_blocks = input_dim // block_dim
        if fdlr_mode == "shared_block" and block_dim * n_blocks != input_dim:
            raise ConfigError("input dim is not a whole number of blocks")
        fdlr = FdlrTransform.identity(block_dim, n_blocks, fdlr_mode)
        shared = AffineStack.random(
            [input_dim] + list(hidden_dims), rng, nonlinearity=nonlinearity
        )
        heads = {}
        top = hidden_dims[-1]
        for name, k in head_inventories.items():
            if k < 2:
                raise ConfigError(f"head {name!r} needs an inventory of >= 2")
            dims = [top] + [top] * head_hidden + [k]
            heads[name] = AffineStack(
                AffineStack.random(dims, rng, nonlinearity=nonlinearity).layers,
                nonlinearity,
                linear_output=True,
            )
        return cls(fdlr, shared, heads, nonlinearity)

    def group_names(self):
        return ["fdlr", "shared"] + [f"head:{n}" for n in self.heads]

    def head_names(self):
        return list(self.heads)

    def token_head_names(self):
        return [n for n in self.heads if n != PHONEME_HEAD]

    def group_params(self, group):
        if group == "fdlr":
            return self.fdlr.params()
        if group == "shared":
            return self.shared.params()
        if group.startswith("head:"):
            return self.heads[group[5:]].params()
        raise KeyError(group)

    def set_frozen(self, groups, value=True):
        for g in groups:
            if g not in self.frozen:
                raise KeyError(g)
            self.frozen[g] = value

    def freeze_all_except(self, groups):
        for g in self.frozen:
            self.frozen[g] = g not in groups

    def head_inventory(self, name):
        return self.heads[name].layers[-1][0].shape[1]

    def add_head(self, name, inventory, seed=0, head_hidden=0):
        if name in self.heads:
            raise ConfigError(f"head {name!r} already exists")
        rng = np.random.default_rng(seed)
        top = self.shared.layers[-1][0].shape[1]
        dims = [top] + [top] * head_hidden + [inventory]
        self.heads[name] = AffineStack(
            AffineStack.random(dims, rng, nonlinearity=self.nonlinearity).layers,
            self.nonlinearity,
            linear_output=True,
        )
        self.frozen[f"head:{name}"] = False

    def drop_head(self, name):
        del self.heads[name]
        del self.frozen[f"head:{name}"]

    def clone(self):
        fdlr = FdlrTransform(
            self.fdlr.weight.copy(), self.fdlr.bias.copy(),
            self.fdlr.n_blocks, self.fdlr.mode,
        )
        shared = AffineStack(
            [(w.copy(), b.copy()) for w, b in self.shared.layers],
            self.nonlinearity,
        )
        heads = {
            n: AffineStack([(w.copy(), b.copy()) for w, b in h.layers],
                           self.nonlinearity, linear_output=True)
            for n, h in self.heads.items()
        }
        out = PtdnnModel(fdlr, shared, heads, self.nonlinearity)
        out.frozen = dict(self.frozen)
        out.metadata = dict(self.metadata)
        return out

    def group_bytes(self, group):
        """Full-precision bytes of a parameter group (freeze ledger)."""
        params = self.group_params(group)
        return b"".join(
            np.ascontiguousarray(params[k], dtype="<f8").tobytes()
            for k in sorted(params)
        )

    # -- computation -------------------------------------------------------

    def _forward_cached(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        y = self.fdlr.apply(x)
        h, shared_cache = self.shared.forward(y)
        head_out = {}
        head_caches = {}
        for name, head in self.heads.items():
            z, cache = head.forward(h)
            head_out[name] = softmax(z)
            head_caches[name] = cache
        return head_out, {"x": x, "y": y, "shared": shared_cache,
                          "heads": head_caches}

    def forward(self, batch, heads=None):
        """Per-frame posteriors for every head (rows sum to one)."""
        out, _ = self._forward_cached(batch)
        if heads is not None:
            out = {n: out[n] for n in heads}
        return out

    def backward(self, batch, targets, weights, mode, return_loss=False,
                 return_input_grad=False):
        """Gradients per parameter group for the combined multi-task loss.

        Frozen groups come back as exact zeros.  ``mode`` decides the loss:
        "labeled" couples the phoneme head with all token heads, "unlabeled"
        trains the token heads only.  ``return_input_grad`` appends the
        gradient with respect to the raw input batch (used by input-side
        adapters such as speaker codes).
        """
        active = _active_heads(self, targets, mode)
        posteriors, cache = self._forward_cached(batch)
        n = cache["x"].shape[0]
        grads = {g: _zero_like(self.group_params(g)) for g in self.group_names()}
        components = {}
        d_h = np.zeros_like(cache["shared"][-1])
        for name in active:
            p = posteriors[name]
            t = np.asarray(targets[name])
            if t.shape[0] != n:
                raise TargetError(f"head {name!r}: {t.shape[0]} targets, {n} frames")
            if t.min() < 0 or t.max() >= p.shape[1]:
                raise TargetError(f"head {name!r}: target outside inventory")
            components[name] = float(
                -np.mean(np.log(np.maximum(p[np.arange(n), t], 1e-300)))
            )
            w = weights.weight_for(name)
            if w == 0.0:
                continue
            dz = p.copy()
            dz[np.arange(n), t] -= 1.0
            dz *= w / n
            d_in, layer_grads = self.heads[name].backward(cache["heads"][name], dz)
            d_h += d_in
            g = f"head:{name}"
            if not self.frozen[g]:
                grads[g] = _stack_grads(layer_grads)
        d_y, shared_grads = self.shared.backward(cache["shared"], d_h)
        if not self.frozen["shared"]:
            grads["shared"] = _stack_grads(shared_grads)
        if not self.frozen["fdlr"]:
            grads["fdlr"] = self.fdlr.backward(cache["x"], d_y)
        if all(self.frozen.values()) and not return_input_grad:
            import warnings

            warnings.warn("backward: every parameter group is frozen; no-op")
        out = [grads]
        if return_loss:
            total = sum(
                weights.weight_for(name) * components[name] for name in components
            )
            out += [total, components]
        if return_input_grad:
            out.append(self.fdlr.input_gradient(d_y))
        return out[0] if len(out) == 1 else tuple(out)


def _active_heads(model, targets, mode):
    if mode not in ("labeled", "unlabeled"):
        raise ConfigError(f"unknown mode {mode!r}")
    names = list(model.heads)
    if mode == "labeled":
        if PHONEME_HEAD in names and PHONEME_HEAD not in targets:
            raise TargetError("labeled mode needs phoneme targets")
    else:
        names = [n for n in names if n != PHONEME_HEAD]
    missing = [n for n in names if n not in targets]
    if missing:
        raise TargetError(f"missing targets for head(s) {missing}")
    return names


def _zero_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def _stack_grads(layer_grads):
    out = {}
    for i, (dw, db) in enumerate(layer_grads):
        out[f"w{i}"] = dw
        out[f"b{i}"] = db
    return out


def multitask_loss(posteriors, targets, weights, mode):
    """Combined weighted cross-entropy and its per-head components.

    Labeled mode: w_phoneme * phoneme CE + w_token * each token-head CE.
    Unlabeled mode: the token terms only.
    """
    if mode == "labeled" and weights.w_phoneme == 0.0 and weights.w_token == 0.0:
        raise ConfigError("all loss weights zero for a labeled batch")
    components = {}
    total = 0.0
    for name, p in posteriors.items():
        if mode == "unlabeled" and name == PHONEME_HEAD:
            continue
        if name not in targets:
            if mode == "labeled" and name == PHONEME_HEAD:
                raise TargetError("labeled mode needs phoneme targets")
            raise TargetError(f"missing targets for head {name!r}")
        t = np.asarray(targets[name])
        n = p.shape[0]
        ce = float(-np.mean(np.log(np.maximum(p[np.arange(n), t], 1e-300))))
        components[name] = ce
        total += weights.weight_for(name) * ce
    return total, components


def sgd_step(model, grads, learning_rate, momentum=0.0, velocity=None):
    """In-place SGD step on every unfrozen group; frozen groups untouched.

    Returns (model, velocity); pass the velocity back in to get momentum.
    Non-finite gradients reject the step.
    """
    if learning_rate < 0:
        raise ConfigError("learning rate must be >= 0")
    if velocity is None:
        velocity = {}
    for group in model.group_names():
        if model.frozen[group]:
            continue
        params = model.group_params(group)
        g = grads[group]
        for name, p in params.items():
            if not np.all(np.isfinite(g[name])):
                raise NumericsError(
                    f"non-finite gradient in {group}/{name}; step rejected"
                )
            if momentum > 0.0:
                key = (group, name)
                v = velocity.get(key)
                if v is None:
                    v = np.zeros_like(p)
                v = momentum * v - learning_rate * g[name]
                velocity[key] = v
                p += v
            else:
                p -= learning_rate * g[name]
    return model, velocity


def fuse_posteriors(a, b, alpha):
    """Convex combination alpha * a + (1 - alpha) * b of two posterior sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"posterior shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must be in [0, 1]")
    return alpha * a + (1.0 - alpha) * b


# -- serialization ----------------------------------------------------------


def save_model(model, path):
    """Versioned binary model file: magic PTDN, config JSON, f32 groups
    with per-group checksums."""
    config = {
        "nonlinearity": model.nonlinearity,
        "fdlr": {
            "mode": model.fdlr.mode,
            "n_blocks": model.fdlr.n_blocks,
            "dim": model.fdlr.weight.shape[0],
        },
        "shared_dims": [model.shared.layers[0][0].shape[0]]
        + [w.shape[1] for w, _ in model.shared.layers],
        "heads": {
            n: [h.layers[0][0].shape[0]] + [w.shape[1] for w, _ in h.layers]
            for n, h in model.heads.items()
        },
        "frozen": model.frozen,
        "metadata": model.metadata,
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<II", MODEL_VERSION, len(blob)))
        f.write(blob)
        for group in sorted(model.group_names()):
            params = model.group_params(group)
            name_b = group.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", len(params)))
            for pname in sorted(params):
                arr = np.ascontiguousarray(params[pname], dtype="<f4")
                nb = pname.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                data = arr.tobytes()
                f.write(struct.pack("<II", len(data), zlib.crc32(data)))
                f.write(data)


def load_model(path):
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise ConfigError(f"{path}: not a network model file")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != MODEL_VERSION:
            raise ConfigError(f"unsupported model version {version}")
        config = json.loads(f.read(blob_len).decode("utf-8"))
        groups = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            gname = f.read(nlen).decode("utf-8")
            (n_params,) = struct.unpack("<I", f.read(4))
            params = {}
            for _ in range(n_params):
                (pn_len,) = struct.unpack("<I", f.read(4))
                pname = f.read(pn_len).decode("utf-8")
                (ndim,) = struct.unpack("<I", f.read(4))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                size, crc = struct.unpack("<II", f.read(8))
                data = f.read(size)
                if zlib.crc32(data) != crc:
                    raise ConfigError(f"{path}: checksum mismatch in {gname}/{pname}")
                params[pname] = (
                    np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
                )
            groups[gname] = params

    nonlin = config["nonlinearity"]
    fc = config["fdlr"]
    fdlr = FdlrTransform(
        groups["fdlr"]["weight"], groups["fdlr"]["bias"], fc["n_blocks"], fc["mode"]
    )
    n_shared = len(config["shared_dims"]) - 1
    shared = AffineStack(
        [(groups["shared"][f"w{i}"], groups["shared"][f"b{i}"])
         for i in range(n_shared)],
        nonlin,
    )
    heads = {}
    for name, dims in config["heads"].items():
        g = groups[f"head:{name}"]
        heads[name] = AffineStack(
            [(g[f"w{i}"], g[f"b{i}"]) for i in range(len(dims) - 1)],
            nonlin,
            linear_output=True,
        )
    model = PtdnnModel(fdlr, shared, heads, nonlin)
    model.frozen = {k: bool(v) for k, v in config["frozen"].items()}
    model.metadata = config.get("metadata", {})
    return model
