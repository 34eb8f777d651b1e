"""Minimal dense-network stack with exact reverse-mode gradients.

Everything downstream (training, poison generation, sharpness probes,
landscape grids) runs on this substrate. A model is an ordered stack of
dense blocks and ReLU markers. Parameters are float64 numpy arrays made
read-only after construction, so updates always build a new model and
probes can never corrupt a checkpoint in place. Gradients are written out
by hand so they stay auditable against finite differences.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class NumericError(RuntimeError):
    """A forward or backward pass produced NaN or Inf."""


def _owned_readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dense:
    """One dense block; weights and bias perturb and freeze as a single unit."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weight", _owned_readonly(self.weight))
        object.__setattr__(self, "bias", _owned_readonly(self.bias))
        if self.weight.ndim != 2:
            raise ValueError(f"dense weight must be 2-d, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError(
                f"bias shape {self.bias.shape} incompatible with weight {self.weight.shape}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias])

    def with_flat_params(self, vec: np.ndarray) -> "Dense":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected flat vector of length {self.n_params}, got {vec.shape}")
        w = vec[: self.weight.size].reshape(self.weight.shape)
        b = vec[self.weight.size :]
        return Dense(w, b, frozen=self.frozen)


@dataclass(frozen=True)
class Relu:
    """Activation marker; carries no parameters and no learnability of its own."""


Layer = Dense | Relu


@dataclass(frozen=True)
class Model:
    """Ordered stack of layers; immutable after construction."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        dense = self.dense_layers()
        if not dense:
            raise ValueError("model needs at least one dense layer")
        for a, b in zip(dense, dense[1:]):
            if a.fan_out != b.fan_in:
                raise ValueError(
                    f"layer dims incompatible: {a.fan_out} feeds into {b.fan_in}"
                )

    def dense_layers(self) -> list[Dense]:
        return [l for l in self.layers if isinstance(l, Dense)]

    @property
    def n_dense(self) -> int:
        return len(self.dense_layers())

    @property
    def input_dim(self) -> int:
        return self.dense_layers()[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.dense_layers()[-1].fan_out

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.dense_layers())

    def dense(self, l: int) -> Dense:
        layers = self.dense_layers()
        if not 0 <= l < len(layers):
            raise IndexError(f"dense layer index {l} out of range [0, {len(layers)})")
        return layers[l]

    def replace_dense(self, l: int, new: Dense) -> "Model":
        layers = list(self.layers)
        seen = -1
        for i, layer in enumerate(layers):
            if isinstance(layer, Dense):
                seen += 1
                if seen == l:
                    layers[i] = new
                    return Model(tuple(layers))
        raise IndexError(f"dense layer index {l} out of range [0, {seen + 1})")

    def freeze(self, indices: list[int] | None = None) -> "Model":
        """Freeze the given dense layers (all of them when indices is None)."""
        targets = set(range(self.n_dense)) if indices is None else set(indices)
        m = self
        for l in sorted(targets):
            d = m.dense(l)
            m = m.replace_dense(l, replace(d, frozen=True))
        return m

    def unfreeze(self) -> "Model":
        m = self
        for l in range(self.n_dense):
            d = m.dense(l)
            if d.frozen:
                m = m.replace_dense(l, replace(d, frozen=False))
        return m


def init_model(dims: list[int], seed: int) -> Model:
    """Build a dense stack from layer widths, e.g. [12, 10] or [12, 32, 10].

    Hidden dense blocks are followed by ReLU; the output block is linear
    into the softmax cross-entropy. He-scaled Gaussian weights, zero biases.
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        std = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(fan_in, fan_out))
        layers.append(Dense(w, np.zeros(fan_out)))
        if not last:
            layers.append(Relu())
    return Model(tuple(layers))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def _forward_trace(model: Model, inputs: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Run the stack, recording each layer's input for the backward pass."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"inputs must be (batch, features), got shape {x.shape}")
    if x.shape[1] != model.input_dim:
        raise ValueError(
            f"input dim {x.shape[1]} does not match model input dim {model.input_dim}"
        )
    trace = []
    # overflow manifests as inf and is reported via NumericError, not a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for layer in model.layers:
            trace.append(x)
            if isinstance(layer, Dense):
                x = x @ layer.weight + layer.bias
            else:
                x = np.maximum(x, 0.0)
            _check_finite(x, "activations")
    return trace, x


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _as_target_probs(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return np.asarray(labels, dtype=np.float64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a vector or a probability matrix, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    onehot = np.zeros((labels.shape[0], n_classes))
    onehot[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return onehot


def forward(model: Model, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch, plus the raw logits.

    `labels` may be an integer vector or an (n, C) probability matrix
    (soft targets, as produced by mixup).
    """
    _, logits = _forward_trace(model, inputs)
    target = _as_target_probs(labels, model.output_dim)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    loss = float(-(target * _log_softmax(logits)).sum(axis=1).mean())
    _check_finite(np.asarray(loss), "loss")
    return loss, logits


def per_sample_losses(model: Model, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _, logits = _forward_trace(model, inputs)
    target = _as_target_probs(labels, model.output_dim)
    return -(target * _log_softmax(logits)).sum(axis=1)


def predict(model: Model, inputs: np.ndarray) -> np.ndarray:
    _, logits = _forward_trace(model, inputs)
    return logits.argmax(axis=1)


def accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    return float((predict(model, inputs) == np.asarray(labels)).mean())


Gradients = list[tuple[np.ndarray, np.ndarray]]
"""Per-dense-layer (dweight, dbias) pairs, in layer order; zeros when frozen."""


def _backprop(
    model: Model, trace: list[np.ndarray], dout: np.ndarray, honor_frozen: bool = True
) -> tuple[Gradients, np.ndarray]:
    """Push dout back through the stack recorded in trace.

    Returns per-dense-layer parameter gradients and the gradient with
    respect to the inputs.
    """
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    for layer, layer_in in zip(reversed(model.layers), reversed(trace)):
        if isinstance(layer, Dense):
            if honor_frozen and layer.frozen:
                grads.append((np.zeros_like(layer.weight), np.zeros_like(layer.bias)))
            else:
                grads.append((layer_in.T @ dout, dout.sum(axis=0)))
            dout = dout @ layer.weight.T
        else:
            dout = dout * (layer_in > 0)
    grads.reverse()
    return grads, dout


def backward(model: Model, inputs: np.ndarray, labels: np.ndarray) -> Gradients:
    """Exact gradients of the mean cross-entropy w.r.t. unfrozen parameters."""
    trace, logits = _forward_trace(model, inputs)
    target = _as_target_probs(labels, model.output_dim)
    n = logits.shape[0]
    dlogits = (np.exp(_log_softmax(logits)) - target) / n
    grads, _ = _backprop(model, trace, dlogits)
    for dw, db in grads:
        _check_finite(dw, "gradients")
        _check_finite(db, "gradients")
    return grads


def input_gradients(model: Model, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of each sample's own loss w.r.t. that sample's features.

    Row i is d loss_i / d x_i (no 1/n batch scaling), which is what the
    per-sample perturbation loops need.
    """
    trace, logits = _forward_trace(model, inputs)
    target = _as_target_probs(labels, model.output_dim)
    dlogits = np.exp(_log_softmax(logits)) - target
    _, dx = _backprop(model, trace, dlogits, honor_frozen=False)
    return dx


@dataclass
class SgdState:
    """Momentum buffers, one (vw, vb) pair per dense layer."""

    buffers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, model: Model) -> "SgdState":
        return cls(
            [(np.zeros_like(d.weight), np.zeros_like(d.bias)) for d in model.dense_layers()]
        )


def sgd_step(
    model: Model, grads: Gradients, lr: float, momentum: float, state: SgdState
) -> Model:
    """Momentum SGD: v <- momentum * v + g, theta <- theta - lr * v.

    Frozen layers keep their parameters and buffers untouched. Returns a
    new model; `state` is updated in place.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    dense = model.dense_layers()
    if len(grads) != len(dense):
        raise ValueError(f"expected {len(dense)} gradient pairs, got {len(grads)}")
    new = model
    for l, (layer, (dw, db)) in enumerate(zip(dense, grads)):
        if layer.frozen:
            continue
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise ValueError(f"gradient shape mismatch at dense layer {l}")
        vw, vb = state.buffers[l]
        vw = momentum * vw + dw
        vb = momentum * vb + db
        state.buffers[l] = (vw, vb)
        new = new.replace_dense(
            l, Dense(layer.weight - lr * vw, layer.bias - lr * vb, frozen=False)
        )
    return new


def flatten_params(model: Model) -> np.ndarray:
    """Deterministic layer-order concatenation of all dense parameters."""
    return np.concatenate([d.flat_params() for d in model.dense_layers()])


def unflatten_params(model: Model, vec: np.ndarray) -> Model:
    """Inverse of flatten_params, using `model` as the shape template."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (model.n_params,):
        raise ValueError(f"expected vector of length {model.n_params}, got {vec.shape}")
    out = model
    offset = 0
    for l, d in enumerate(model.dense_layers()):
        out = out.replace_dense(l, d.with_flat_params(vec[offset : offset + d.n_params]))
        offset += d.n_params
    return out


def perturb_layer(model: Model, l: int, v: np.ndarray) -> Model:
    """Return the model with layer l's flat parameter vector shifted by v."""
    d = model.dense(l)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (d.n_params,):
        raise ValueError(
            f"perturbation length {v.shape} does not match layer {l} params ({d.n_params},)"
        )
    return model.replace_dense(l, d.with_flat_params(d.flat_params() + v))


def save_model(model: Model, path: str | Path, epoch: int = 0, config_hash: str = "") -> None:
    """Self-describing JSON checkpoint; float64 values round-trip exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "epoch": epoch,
        "config_hash": config_hash,
        "layers": [
            {
                "kind": "dense",
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
                "frozen": layer.frozen,
            }
            if isinstance(layer, Dense)
            else {"kind": "relu"}
            for layer in model.layers
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path: str | Path) -> tuple[Model, int]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version: {version!r}")
    layers: list[Layer] = []
    for spec in doc["layers"]:
        if spec["kind"] == "dense":
            layers.append(Dense(spec["weight"], spec["bias"], frozen=spec["frozen"]))
        elif spec["kind"] == "relu":
            layers.append(Relu())
        else:
            raise ValueError(f"unknown layer kind {spec['kind']!r}")
    return Model(tuple(layers)), int(doc["epoch"])


# ---------------------------------------------------------------------------
# Two-head toy model: shared dense trunk, classification + regression heads.
# Used by the multi-task learnability-similarity probe.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwoHeadModel:
    trunk: Model
    cls_head: Dense
    reg_head: Dense

    def __post_init__(self):
        feat = self.trunk.output_dim
        if self.cls_head.fan_in != feat or self.reg_head.fan_in != feat:
            raise ValueError("head input dims must match trunk output dim")


def init_two_head(
    dims: list[int], n_classes: int, reg_dim: int, seed: int
) -> TwoHeadModel:
    """Trunk from `dims` (last entry = shared feature width), plus two heads."""
    rng = np.random.default_rng(seed)
    trunk_dims = list(dims)
    layers: list[Layer] = []
    for fan_in, fan_out in zip(trunk_dims[:-1], trunk_dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append(Dense(w, np.zeros(fan_out)))
        layers.append(Relu())
    trunk = Model(tuple(layers))
    feat = trunk.output_dim
    cls = Dense(rng.normal(0.0, np.sqrt(1.0 / feat), size=(feat, n_classes)), np.zeros(n_classes))
    reg = Dense(rng.normal(0.0, np.sqrt(1.0 / feat), size=(feat, reg_dim)), np.zeros(reg_dim))
    return TwoHeadModel(trunk, cls, reg)


def _two_head_out(model: TwoHeadModel, inputs: np.ndarray, task: str):
    trace, feat = _forward_trace(model.trunk, inputs)
    head = model.cls_head if task == "cls" else model.reg_head
    out = feat @ head.weight + head.bias
    _check_finite(out, "head output")
    return trace, feat, head, out


def two_head_loss(model: TwoHeadModel, inputs: np.ndarray, targets: np.ndarray, task: str) -> float:
    """Task loss: mean cross-entropy for 'cls', mean squared error for 'reg'."""
    _, _, _, out = _two_head_out(model, inputs, task)
    if task == "cls":
        target = _as_target_probs(targets, out.shape[1])
        return float(-(target * _log_softmax(out)).sum(axis=1).mean())
    if task == "reg":
        t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
        return float(((out - t) ** 2).mean())
    raise ValueError(f"unknown task {task!r}")


def _two_head_dout(out: np.ndarray, targets: np.ndarray, task: str) -> np.ndarray:
    n = out.shape[0]
    if task == "cls":
        target = _as_target_probs(targets, out.shape[1])
        return (np.exp(_log_softmax(out)) - target) / n
    t = np.asarray(targets, dtype=np.float64).reshape(out.shape)
    return 2.0 * (out - t) / out.size


def two_head_backward(
    model: TwoHeadModel, inputs: np.ndarray, targets: np.ndarray, task: str
) -> tuple[Gradients, tuple[np.ndarray, np.ndarray]]:
    """Gradients of the task loss w.r.t. trunk layers and the task's head."""
    trace, feat, head, out = _two_head_out(model, inputs, task)
    dout = _two_head_dout(out, targets, task)
    head_grads = (feat.T @ dout, dout.sum(axis=0))
    dfeat = dout @ head.weight.T
    trunk_grads, _ = _backprop(model.trunk, trace, dfeat)
    return trunk_grads, head_grads


def two_head_joint_step(
    model: TwoHeadModel,
    inputs: np.ndarray,
    cls_targets: np.ndarray,
    reg_targets: np.ndarray,
    lr: float,
) -> TwoHeadModel:
    """One plain-SGD step on the summed task losses."""
    cls_trunk, (cdw, cdb) = two_head_backward(model, inputs, cls_targets, "cls")
    reg_trunk, (rdw, rdb) = two_head_backward(model, inputs, reg_targets, "reg")
    trunk = model.trunk
    for l, ((aw, ab), (bw, bb)) in enumerate(zip(cls_trunk, reg_trunk)):
        d = trunk.dense(l)
        trunk = trunk.replace_dense(
            l, Dense(d.weight - lr * (aw + bw), d.bias - lr * (ab + bb))
        )
    cls_head = Dense(model.cls_head.weight - lr * cdw, model.cls_head.bias - lr * cdb)
    reg_head = Dense(model.reg_head.weight - lr * rdw, model.reg_head.bias - lr * rdb)
    return TwoHeadModel(trunk, cls_head, reg_head)
