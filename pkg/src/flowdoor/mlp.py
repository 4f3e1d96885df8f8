"""Feed-forward detector trained by backprop, plus the defenses that fail.

The network is a stack of dense ReLU layers with inverted dropout and a
single sigmoid output trained with binary cross entropy. Neuron pruning
zeroes a neuron's incoming weight row and bias (the layer preceding its
activation), so a pruned neuron outputs exactly 0 for any input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, TrainingError

SCOPES = ("all_layers", "first_layer", "last_layer")
MODES = ("mean", "binary")


class Layer:
    __slots__ = ("W", "b", "mask")

    def __init__(self, W, b, mask=None):
        self.W = W                      # (out, in)
        self.b = b                      # (out,)
        self.mask = mask if mask is not None else np.ones(len(b), dtype=bool)


class Mlp:
    """Dense network; layers[:-1] are hidden (ReLU), layers[-1] is the output unit."""

    def __init__(self, layers, dropout_rate):
        self.layers = layers
        self.dropout_rate = dropout_rate
        self.train_loss = []

    @property
    def dims(self):
        return [self.layers[0].W.shape[1]] + [l.W.shape[0] for l in self.layers]

    @property
    def n_hidden(self):
        return len(self.layers) - 1

    def copy(self):
        out = Mlp([Layer(l.W.copy(), l.b.copy(), l.mask.copy()) for l in self.layers],
                  self.dropout_rate)
        out.train_loss = list(self.train_loss)
        return out


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce(logits, y):
    # mean(softplus(z) - y*z), numerically stable
    return float(np.mean(np.maximum(logits, 0) - logits * y + np.log1p(np.exp(-np.abs(logits)))))


def _forward(mlp, X, rng=None):
    """Returns (hidden activations list, logits, caches for backprop)."""
    p = mlp.dropout_rate if rng is not None else 0.0
    acts = []
    drops = []
    pre = []
    a = X
    for layer in mlp.layers[:-1]:
        z = a @ layer.W.T + layer.b
        h = np.maximum(z, 0.0)
        if p > 0:
            keep = rng.random(h.shape) >= p
            h = h * keep / (1.0 - p)
            drops.append(keep)
        else:
            drops.append(None)
        pre.append(z)
        acts.append(h)
        a = h
    out = mlp.layers[-1]
    logits = (a @ out.W.T + out.b).ravel()
    return acts, logits, (pre, drops)


def _backward(mlp, X, y, acts, logits, caches):
    pre, drops = caches
    p = mlp.dropout_rate if any(d is not None for d in drops) else 0.0
    B = len(X)
    grads = []
    dz = (_sigmoid(logits) - y) / B
    out = mlp.layers[-1]
    a_last = acts[-1] if acts else X
    gW = dz[None, :] @ a_last
    gb = np.array([dz.sum()])
    grads.append((gW, gb))
    da = dz[:, None] @ out.W
    for i in range(mlp.n_hidden - 1, -1, -1):
        if drops[i] is not None:
            da = da * drops[i] / (1.0 - p)
        dzh = da * (pre[i] > 0)
        a_in = acts[i - 1] if i > 0 else X
        grads.append((dzh.T @ a_in, dzh.sum(axis=0)))
        if i > 0:
            da = dzh @ mlp.layers[i].W
    grads.reverse()
    return grads


def _apply_masks(mlp):
    for layer in mlp.layers:
        dead = ~layer.mask
        if dead.any():
            layer.W[dead, :] = 0.0
            layer.b[dead] = 0.0


class _Sgd:
    """Mini-batch gradient descent with momentum."""

    def __init__(self, layers, lr, momentum):
        self.lr = lr
        self.momentum = momentum
        self.vel = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in layers]

    def step(self, layers, grads):
        for layer, (vW, vb), (gW, gb) in zip(layers, self.vel, grads):
            vW *= self.momentum
            vW -= self.lr * gW
            vb *= self.momentum
            vb -= self.lr * gb
            layer.W += vW
            layer.b += vb


class _Adam:
    """Adam with bias correction."""

    def __init__(self, layers, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in layers]
        self.v = [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in layers]

    def step(self, layers, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for layer, (mW, mb), (vW, vb), (gW, gb) in zip(layers, self.m, self.v, grads):
            gW = gW.reshape(layer.W.shape)
            mW *= self.b1
            mW += (1 - self.b1) * gW
            vW *= self.b2
            vW += (1 - self.b2) * gW * gW
            layer.W -= self.lr * (mW / c1) / (np.sqrt(vW / c2) + self.eps)
            mb *= self.b1
            mb += (1 - self.b1) * gb
            vb *= self.b2
            vb += (1 - self.b2) * gb * gb
            layer.b -= self.lr * (mb / c1) / (np.sqrt(vb / c2) + self.eps)


def _make_optimizer(name, layers, lr, momentum):
    if name == "adam":
        return _Adam(layers, lr)
    if name == "sgd":
        return _Sgd(layers, lr, momentum)
    raise ConfigError(f"unknown optimizer {name!r}")


def _train_epochs(mlp, X, y, epochs, batch, rng, loss_log, opt):
    n = len(X)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, batch)):
            rows = perm[start:start + batch]
            xb, yb = X[rows], y[rows]
            acts, logits, caches = _forward(mlp, xb, rng=rng)
            loss = _bce(logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            losses.append(loss)
            grads = _backward(mlp, xb, yb, acts, logits, caches)
            opt.step(mlp.layers, grads)
            _apply_masks(mlp)
        loss_log.append(float(np.mean(losses)))


def train_mlp(train, epochs=20, batch=256, lr=0.001, momentum=0.9,
              hidden=(512, 512, 512, 512, 512), dropout=0.2, seed=0,
              optimizer="adam") -> Mlp:
    """Train on normalized features; deterministic given the seed."""
    X = np.asarray(train.X, dtype=float)
    y = np.asarray(train.y, dtype=float)
    if not 0.0 <= dropout < 1.0:
        raise ConfigError(f"dropout {dropout} outside [0,1)")
    if epochs < 0 or batch < 1 or lr < 0:
        raise ConfigError("bad training parameters")
    rng = np.random.default_rng(seed)
    dims = [X.shape[1]] + list(hidden) + [1]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        scale = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else np.sqrt(1.0 / fan_in)
        layers.append(Layer(rng.normal(0.0, scale, (fan_out, fan_in)),
                            np.zeros(fan_out)))
    mlp = Mlp(layers, dropout)
    opt = _make_optimizer(optimizer, mlp.layers, lr, momentum)
    _train_epochs(mlp, X, y, epochs, batch, rng, mlp.train_loss, opt)
    return mlp


def predict_mlp(mlp: Mlp, X):
    """Scores in (0,1) and labels at 0.5; dropout disabled."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != mlp.dims[0]:
        raise DimensionError(f"expected {mlp.dims[0]} columns, got {X.shape}")
    _, logits, _ = _forward(mlp, X)
    scores = _sigmoid(logits)
    return scores, (scores >= 0.5).astype(int)


def hidden_activations(mlp: Mlp, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != mlp.dims[0]:
        raise DimensionError(f"expected {mlp.dims[0]} columns, got {X.shape}")
    acts, _, _ = _forward(mlp, X)
    return acts


@dataclass
class ActivationStats:
    mean: list        # per hidden layer: (width,) mean post-ReLU activation
    binary: list      # per hidden layer: (width,) fraction of samples with act > 0
    active: list      # per hidden layer: copy of the prune mask at stat time


def activation_stats(mlp: Mlp, validation) -> ActivationStats:
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    acts = hidden_activations(mlp, validation.X)
    return ActivationStats(mean=[a.mean(axis=0) for a in acts],
                           binary=[(a > 0).mean(axis=0) for a in acts],
                           active=[l.mask.copy() for l in mlp.layers[:-1]])


@dataclass
class PruneNeuronStep:
    step: int
    layer: int
    neuron: int
    value: float


def _scope_layers(mlp, scope):
    if scope == "all_layers":
        return list(range(mlp.n_hidden))
    if scope == "first_layer":
        return [0]
    if scope == "last_layer":
        return [mlp.n_hidden - 1]
    raise ConfigError(f"unknown scope {scope!r}")


def prune_neurons(mlp: Mlp, stats: ActivationStats, scope="all_layers",
                  mode="mean", fraction=0.0):
    """Mask the lowest-statistic neurons until fraction of the scope is pruned.

    The target count is a fraction of all neurons in scope (pruned ones
    included), so re-running with the same stats and fraction is a no-op.
    Returns (mlp, ordered step log of newly pruned neurons).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction {fraction} outside [0,1]")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    layer_idx = _scope_layers(mlp, scope)
    values = stats.mean if mode == "mean" else stats.binary
    scope_total = sum(mlp.layers[i].W.shape[0] for i in layer_idx)
    already = sum(int((~mlp.layers[i].mask).sum()) for i in layer_idx)
    target = int(np.floor(fraction * scope_total))
    candidates = sorted(
        (float(values[i][j]), i, int(j))
        for i in layer_idx
        for j in np.flatnonzero(mlp.layers[i].mask)
    )
    log = []
    for k, (val, i, j) in enumerate(candidates[:max(0, target - already)]):
        layer = mlp.layers[i]
        layer.mask[j] = False
        layer.W[j, :] = 0.0
        layer.b[j] = 0.0
        log.append(PruneNeuronStep(step=already + k + 1, layer=i, neuron=j, value=val))
    return mlp, log


def _accuracy_pair(mlp, eval_clean, eval_backdoor, target_label):
    _, labels = predict_mlp(mlp, eval_clean.X)
    acc = float(np.mean(labels == eval_clean.y))
    _, labels = predict_mlp(mlp, eval_backdoor.X)
    bd = float(np.mean(labels == target_label))
    return acc, bd


def finetune(mlp: Mlp, validation, epochs, lr, eval_clean, eval_backdoor,
             target_label=0, batch=256, momentum=0.9, seed=0, optimizer="adam"):
    """Continue training on the clean validation set only.

    Returns (mlp, curve) with one (epoch, clean_accuracy, backdoor_accuracy)
    row per epoch, epoch 0 being the pre-finetuning baseline.
    """
    X = np.asarray(validation.X, dtype=float)
    y = np.asarray(validation.y, dtype=float)
    rng = np.random.default_rng(seed)
    opt = _make_optimizer(optimizer, mlp.layers, lr, momentum)
    curve = [(0, *_accuracy_pair(mlp, eval_clean, eval_backdoor, target_label))]
    for epoch in range(1, epochs + 1):
        _train_epochs(mlp, X, y, 1, batch, rng, mlp.train_loss, opt)
        curve.append((epoch, *_accuracy_pair(mlp, eval_clean, eval_backdoor, target_label)))
    return mlp, curve


def fine_prune(mlp: Mlp, validation, scope, mode, prune_fraction,
               epochs, lr, eval_clean, eval_backdoor, target_label=0,
               batch=256, momentum=0.9, seed=0, optimizer="adam"):
    """Prune, then fine-tune; the combined report flags a >= 0.2 backdoor drop."""
    _, bd_before = _accuracy_pair(mlp, eval_clean, eval_backdoor, target_label)
    stats = activation_stats(mlp, validation)
    mlp, plog = prune_neurons(mlp, stats, scope=scope, mode=mode, fraction=prune_fraction)
    mlp, curve = finetune(mlp, validation, epochs, lr, eval_clean, eval_backdoor,
                          target_label=target_label, batch=batch,
                          momentum=momentum, seed=seed, optimizer=optimizer)
    bd_after = curve[-1][2]
    report = {
        "prune_log": plog,
        "curve": curve,
        "backdoor_before": bd_before,
        "backdoor_after": bd_after,
        "backdoor_dropped": (bd_before - bd_after) >= 0.2,
    }
    return mlp, report


@dataclass
class CorrelationRecord:
    step: int
    layer: int
    neuron: int
    neuron_id: int
    correlation: float
    undefined: bool


def neuron_backdoor_correlation(mlp: Mlp, eval_set, prune_log):
    """Pearson correlation of each pruned neuron's activation with the
    backdoor indicator, recorded at its prune step.

    Pass the pre-pruning model: in the pruned network the neurons of
    interest output a constant 0. Zero-variance cases are reported as 0
    with the undefined flag set.
    """
    acts = hidden_activations(mlp, eval_set.X)
    bd = np.asarray(eval_set.bd, dtype=float)
    sb = bd.std()
    mb = bd.mean()
    offsets = np.cumsum([0] + [a.shape[1] for a in acts])
    records = []
    for entry in prune_log:
        a = acts[entry.layer][:, entry.neuron]
        sa = a.std()
        if sa == 0.0 or sb == 0.0:
            r, undef = 0.0, True
        else:
            r = float(np.mean((a - a.mean()) * (bd - mb)) / (sa * sb))
            undef = False
        records.append(CorrelationRecord(
            step=entry.step, layer=entry.layer, neuron=entry.neuron,
            neuron_id=int(offsets[entry.layer] + entry.neuron),
            correlation=r, undefined=undef))
    return records


def write_correlation_csv(records, path):
    with open(path, "w") as fh:
        fh.write("prune_step,neuron_id,correlation,undefined_flag\n")
        for r in records:
            fh.write(f"{r.step},{r.neuron_id},{r.correlation!r},{int(r.undefined)}\n")


def write_accuracy_curve_csv(curve, path, step_name="epoch"):
    with open(path, "w") as fh:
        fh.write(f"{step_name},clean_accuracy,backdoor_accuracy\n")
        for step, acc, bd in curve:
            fh.write(f"{step},{acc!r},{bd!r}\n")


def gradient_check(mlp: Mlp, X, y, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    Dropout is disabled for the check; use float64 parameters.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    acts, logits, caches = _forward(mlp, X)
    grads = _backward(mlp, X, y, acts, logits, caches)

    def loss_at():
        _, lg, _ = _forward(mlp, X)
        return _bce(lg, y)

    worst = 0.0
    for layer, (gW, gb) in zip(mlp.layers, grads):
        for arr, g in ((layer.W, gW.reshape(layer.W.shape)), (layer.b, gb)):
            flat = arr.ravel()
            gflat = np.asarray(g, dtype=float).ravel()
            for i in range(len(flat)):
                orig = flat[i]
                flat[i] = orig + eps
                lp = loss_at()
                flat[i] = orig - eps
                lm = loss_at()
                flat[i] = orig
                num = (lp - lm) / (2 * eps)
                denom = max(abs(num) + abs(gflat[i]), 1e-8)
                worst = max(worst, abs(num - gflat[i]) / denom)
    return worst


# --- Persistence -------------------------------------------------------------

def save_mlp(mlp: Mlp, path):
    obj = {
        "dims": mlp.dims,
        "dropout_rate": mlp.dropout_rate,
        "layers": [{"w": l.W.tolist(), "b": l.b.tolist(), "mask": l.mask.tolist()}
                   for l in mlp.layers],
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    try:
        dims = obj["dims"]
        layers = []
        for i, raw in enumerate(obj["layers"]):
            W = np.array(raw["w"], dtype=float)
            b = np.array(raw["b"], dtype=float)
            mask = np.array(raw["mask"], dtype=bool)
            if W.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],) \
                    or mask.shape != (dims[i + 1],):
                raise ParseError(f"{path}: layers[{i}] shapes inconsistent with dims")
            layers.append(Layer(W, b, mask))
        return Mlp(layers, float(obj["dropout_rate"]))
    except (KeyError, IndexError) as exc:
        raise ParseError(f"{path}: missing or inconsistent field {exc}") from exc
