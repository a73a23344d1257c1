"""Binary slip classifiers over binned event tensors.

A pooled feature front end reduces each window tensor to a manageable
vector; an MLP reads the per-bin polarity totals, a leaky integrate-and-fire
spiking network reads a coarser spatial grid per time bin.  Training is
plain numpy: hand-rolled backprop, RMSProp and Adam, spike-count loss with a
fast-sigmoid surrogate gradient, plus a finite-difference harness to keep
the gradients honest.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedError, EvalError, ParamError
from .labelprep import CROP_HEIGHT, CROP_WIDTH, LABEL_SLIP, BinnedTensor

POOL = 10
GRID_H = CROP_HEIGHT // POOL  # 25
GRID_W = CROP_WIDTH // POOL  # 20
SNN_BLOCK = 5  # 25x20 -> 5x4 per polarity for the spiking front end
SNN_GRID = (GRID_H // SNN_BLOCK) * (GRID_W // SNN_BLOCK)  # 20
SNN_INPUT = 2 * SNN_GRID  # 40

SPIKE_TARGET_TRUE = 0.8
SPIKE_TARGET_FALSE = 0.2


def pool_features(tensor: BinnedTensor) -> np.ndarray:
    """Feature vector: 10x10-averaged spatial grids then per-bin totals.

    Layout is [2 * bins * 25 * 20 spatial means, 2 * bins polarity sums],
    everything divided by (window event count + 1).
    """
    counts = tensor.counts
    bins = tensor.bins
    n = counts.sum()
    blocks = counts.reshape(2, bins, GRID_H, POOL, GRID_W, POOL).sum(axis=(3, 5))
    spatial = blocks / float(POOL * POOL)
    sums = counts.sum(axis=(2, 3))
    vec = np.concatenate([spatial.reshape(-1), sums.reshape(-1).astype(np.float64)])
    return vec / (n + 1.0)


def pool_features_sparse(events, start_time, duration, bins) -> np.ndarray:
    """Same vector as `pool_features` computed straight from events.

    Avoids materializing the dense (2, bins, 250, 200) tensor; integer
    count sums below 2^53 make the two routes bitwise identical."""
    n = len(events)
    tau = events.t - start_time
    b = np.floor(tau * bins / duration).astype(np.int64)
    b = np.minimum(b, bins - 1)
    ch = (events.p < 0).astype(np.int64)
    cy = events.y.astype(np.int64) // POOL
    cx = events.x.astype(np.int64) // POOL
    flat = ((ch * bins + b) * GRID_H + cy) * GRID_W + cx
    cell_counts = np.bincount(flat, minlength=2 * bins * GRID_H * GRID_W)
    spatial = cell_counts.astype(np.float64) / float(POOL * POOL)
    sums = np.bincount(ch * bins + b, minlength=2 * bins).astype(np.float64)
    return np.concatenate([spatial, sums]) / (n + 1.0)


@dataclass
class FeatureSet:
    """Pooled feature rows plus integer labels (1 = slip)."""

    features: np.ndarray
    labels: np.ndarray
    bins: int

    def __len__(self):
        return self.labels.size


def features_from_subsamples(subs, bins: int) -> FeatureSet:
    rows = np.stack(
        [pool_features_sparse(s.events, s.start_time, s.duration, bins) for s in subs]
    )
    labels = np.array([1 if s.label == LABEL_SLIP else 0 for s in subs], dtype=np.int64)
    return FeatureSet(rows, labels, bins)


def mlp_input(fs: FeatureSet) -> np.ndarray:
    """Per-bin polarity totals slice: (N, 2 * bins)."""
    return fs.features[:, -2 * fs.bins :]


def snn_input(fs: FeatureSet) -> np.ndarray:
    """Per-bin coarse spatial grids: (N, bins, 40).

    The 25x20 pooled grids are block-averaged down to 5x4 per polarity so
    the recurrent pass stays cheap."""
    n = len(fs)
    bins = fs.bins
    spatial = fs.features[:, : 2 * bins * GRID_H * GRID_W]
    grid = spatial.reshape(n, 2, bins, 5, SNN_BLOCK, 4, SNN_BLOCK)
    coarse = grid.mean(axis=(4, 6))  # (n, 2, bins, 5, 4)
    return coarse.transpose(0, 2, 1, 3, 4).reshape(n, bins, SNN_INPUT)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def validate(self):
        if self.optimizer not in ("adam", "rmsprop"):
            raise ParamError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ParamError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParamError("batch_size and epochs must be >= 1")

    def to_dict(self):
        return {
            "optimizer": self.optimizer,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
        }


class MlpModel:
    kind = "mlp"

    def __init__(self, input_dim, hidden=(128, 64), seed=0, dtype=np.float32):
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7]))
        dims = [self.input_dim, *self.hidden, 2]
        self.params = []
        for a, b in zip(dims, dims[1:]):
            w = (rng.standard_normal((a, b)) * math.sqrt(2.0 / a)).astype(dtype)
            self.params.append(w)
            self.params.append(np.zeros(b, dtype=dtype))
        self.mu = np.zeros(self.input_dim, dtype=dtype)
        self.sd = np.ones(self.input_dim, dtype=dtype)

    def set_norm(self, mu, sd):
        """Per-dimension affine front end fitted on the training set."""
        self.mu = mu.astype(self.dtype)
        self.sd = np.where(sd < 1e-12, 1.0, sd).astype(self.dtype)

    def scores(self, x):
        h = (x.astype(self.dtype) - self.mu) / self.sd
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grads(self, x, y, scale=1.0):
        x = (x.astype(self.dtype) - self.mu) / self.sd
        n_layers = len(self.params) // 2
        acts = [x]
        h = x
        for i in range(n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_z
        n = x.shape[0]
        loss = -scale * float(log_probs[np.arange(n), y].mean())
        delta = np.exp(log_probs)
        delta[np.arange(n), y] -= 1.0
        delta = (delta * (scale / n)).astype(self.dtype)
        grads = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            grads[2 * i] = acts[i].T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.params[2 * i].T) * (acts[i] > 0)
        return loss, grads, logits


def _fast_sigmoid(z, slope):
    return 0.5 * (slope * z / (1.0 + slope * np.abs(z))) + 0.5


def _surrogate_grad(z, slope):
    return 0.5 * slope / (1.0 + slope * np.abs(z)) ** 2


class SnnModel:
    """Two LIF layers; output class = larger spike count.

    `mode="spike"` uses hard thresholds forward and the fast-sigmoid
    surrogate backward; `mode="smooth"` replaces the threshold with the
    fast sigmoid itself so the same backward pass is the exact gradient
    (which is what the finite-difference check exercises)."""

    kind = "snn"

    def __init__(
        self,
        input_dim=SNN_INPUT,
        hidden=64,
        seed=0,
        alpha=0.9,
        v_th=1.0,
        slope=10.0,
        mode="spike",
        dtype=np.float32,
    ):
        if not 0.0 < alpha < 1.0:
            raise ParamError("alpha must be in (0, 1)")
        if v_th <= 0:
            raise ParamError("v_th must be positive")
        if mode not in ("spike", "smooth"):
            raise ParamError(f"unknown mode {mode!r}")
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.alpha = float(alpha)
        self.v_th = float(v_th)
        self.slope = float(slope)
        self.mode = mode
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7]))
        w1 = rng.standard_normal((self.input_dim, self.hidden)) * math.sqrt(2.0 / self.input_dim)
        w2 = rng.standard_normal((self.hidden, 2)) * math.sqrt(2.0 / self.hidden)
        self.params = [w1.astype(dtype), w2.astype(dtype)]
        self.mu = np.zeros(self.input_dim, dtype=dtype)
        self.sd = np.ones(self.input_dim, dtype=dtype)

    def set_norm(self, mu, sd):
        self.mu = mu.astype(self.dtype)
        self.sd = np.where(sd < 1e-12, 1.0, sd).astype(self.dtype)

    def _activation(self, z):
        if self.mode == "spike":
            return (z >= 0.0).astype(self.dtype)
        return _fast_sigmoid(z, self.slope).astype(self.dtype)

    def _run(self, x):
        """Forward pass; returns per-layer pre-threshold traces for BPTT."""
        w1, w2 = self.params
        xt = (x.astype(self.dtype) - self.mu) / self.sd
        n, t_steps, _ = x.shape
        v1 = np.zeros((n, self.hidden), dtype=self.dtype)
        v2 = np.zeros((n, 2), dtype=self.dtype)
        z1s = np.empty((t_steps, n, self.hidden), dtype=self.dtype)
        z2s = np.empty((t_steps, n, 2), dtype=self.dtype)
        s1s = np.empty((t_steps, n, self.hidden), dtype=self.dtype)
        counts = np.zeros((n, 2), dtype=self.dtype)
        for t in range(t_steps):
            v1 = self.alpha * v1 + xt[:, t, :] @ w1
            z1 = v1 - self.v_th
            s1 = self._activation(z1)
            v1 = v1 - s1 * self.v_th
            v2 = self.alpha * v2 + s1 @ w2
            z2 = v2 - self.v_th
            s2 = self._activation(z2)
            v2 = v2 - s2 * self.v_th
            z1s[t] = z1
            z2s[t] = z2
            s1s[t] = s1
            counts += s2
        return counts, z1s, z2s, s1s

    def scores(self, x):
        counts, _, _, _ = self._run(x)
        return counts

    def loss_and_grads(self, x, y, scale=1.0):
        w1, w2 = self.params
        n, t_steps, _ = x.shape
        counts, z1s, z2s, s1s = self._run(x)
        targets = np.full((n, 2), SPIKE_TARGET_FALSE * t_steps, dtype=np.float64)
        targets[np.arange(n), y] = SPIKE_TARGET_TRUE * t_steps
        resid = (counts.astype(np.float64) - targets) / t_steps
        loss = scale * float((resid**2).sum(axis=1).mean())
        # d loss / d count
        dcount = (2.0 * scale / (n * t_steps)) * resid
        dcount = dcount.astype(self.dtype)

        g1 = np.zeros_like(w1)
        g2 = np.zeros_like(w2)
        # adjoints of the post-reset membranes, i.e. what flows back from t+1
        dpost1 = np.zeros((n, self.hidden), dtype=self.dtype)
        dpost2 = np.zeros((n, 2), dtype=self.dtype)
        xt = (x.astype(self.dtype) - self.mu) / self.sd
        for t in range(t_steps - 1, -1, -1):
            sg2 = _surrogate_grad(z2s[t], self.slope).astype(self.dtype)
            # a spike feeds the count and subtracts v_th from the membrane
            ds2 = dcount - dpost2 * self.v_th
            dpre2 = ds2 * sg2 + dpost2
            g2 += s1s[t].T @ dpre2
            sg1 = _surrogate_grad(z1s[t], self.slope).astype(self.dtype)
            ds1 = dpre2 @ w2.T - dpost1 * self.v_th
            dpre1 = ds1 * sg1 + dpost1
            g1 += xt[:, t, :].T @ dpre1
            dpost2 = self.alpha * dpre2
            dpost1 = self.alpha * dpre1
        return loss, [g1, g2], counts


def _make_model(kind, input_dim, seed, bins=None, dtype=np.float32, mode="spike"):
    if kind == "mlp":
        return MlpModel(input_dim, seed=seed, dtype=dtype)
    if kind == "snn":
        return SnnModel(input_dim, seed=seed, dtype=dtype, mode=mode)
    raise ParamError(f"unknown model kind {kind!r}")


def _model_input(kind, fs: FeatureSet):
    return mlp_input(fs) if kind == "mlp" else snn_input(fs)


class _Optimizer:
    def __init__(self, params, cfg: TrainConfig):
        self.kind = cfg.optimizer
        self.lr = cfg.lr
        self.eps = 1e-8
        self.rho = 0.9
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.step_count = 0
        self.v = [np.zeros_like(p) for p in params]
        if self.kind == "adam":
            self.m = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.step_count += 1
        if self.kind == "rmsprop":
            for p, g, v in zip(params, grads, self.v):
                v *= self.rho
                v += (1.0 - self.rho) * g * g
                p -= self.lr * g / (np.sqrt(v) + self.eps)
        else:
            b1t = 1.0 - self.beta1**self.step_count
            b2t = 1.0 - self.beta2**self.step_count
            for p, g, m, v in zip(params, grads, self.m, self.v):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


@dataclass
class RunRecord:
    kind: str
    config: dict
    epochs: list = field(default_factory=list)
    best_val_accuracy: float = 0.0
    test_accuracy: float | None = None

    def to_dict(self):
        return {
            "kind": self.kind,
            "config": self.config,
            "epochs": self.epochs,
            "best_val_accuracy": self.best_val_accuracy,
            "test_accuracy": self.test_accuracy,
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            d = json.load(f)
        return cls(
            kind=d["kind"],
            config=d["config"],
            epochs=d["epochs"],
            best_val_accuracy=d["best_val_accuracy"],
            test_accuracy=d.get("test_accuracy"),
        )


def _accuracy_and_loss(model, x, y):
    loss, _, logits = model.loss_and_grads(x, y)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == y)), loss


def evaluate(model, fs: FeatureSet):
    """(accuracy, loss) of a model on a feature set."""
    if len(fs) == 0:
        raise EvalError("cannot evaluate on an empty set")
    x = _model_input(model.kind, fs)
    return _accuracy_and_loss(model, x, fs.labels)


def train(kind, train_fs: FeatureSet, val_fs: FeatureSet, cfg: TrainConfig):
    """Train one model; returns (model, RunRecord).

    The model comes back holding the weights of its best validation epoch."""
    cfg.validate()
    if len(train_fs) == 0 or len(val_fs) == 0:
        raise EvalError("train and validation sets must be non-empty")
    x_train = _model_input(kind, train_fs)
    y_train = train_fs.labels
    x_val = _model_input(kind, val_fs)
    input_dim = x_train.shape[-1]
    model = _make_model(kind, input_dim, seed=cfg.seed)
    flat = x_train.reshape(-1, input_dim)
    model.set_norm(flat.mean(axis=0), flat.std(axis=0))
    opt = _Optimizer(model.params, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    record = RunRecord(kind=kind, config=cfg.to_dict())
    n = len(train_fs)
    best_params = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            sel = order[lo : lo + cfg.batch_size]
            loss, grads, _ = model.loss_and_grads(x_train[sel], y_train[sel])
            if not math.isfinite(loss):
                raise DivergedError(f"loss became {loss} at epoch {epoch}", epoch=epoch)
            opt.step(model.params, grads)
            losses.append(loss)
        train_acc, _ = _accuracy_and_loss(model, x_train, y_train)
        val_acc, val_loss = _accuracy_and_loss(model, x_val, val_fs.labels)
        if not math.isfinite(val_loss):
            raise DivergedError(f"validation loss became {val_loss} at epoch {epoch}", epoch=epoch)
        record.epochs.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "train_accuracy": train_acc,
                "val_loss": val_loss,
                "val_accuracy": val_acc,
            }
        )
        if val_acc > record.best_val_accuracy:
            record.best_val_accuracy = val_acc
            best_params = [p.copy() for p in model.params]
    # hand back the weights of the best validation epoch, not the last one,
    # so any later test-set evaluation measures the model the record reports
    if best_params is not None:
        for p, bp in zip(model.params, best_params):
            p[...] = bp
    return model, record


def sweep(kind, train_fs, val_fs, space, n_runs, seed, out_dir=None, epochs=20):
    """Random hyperparameter search; returns (records, best_record, best_model).

    `space` maps config field -> list of candidate values; each run draws
    every field independently (with replacement).  Records are written to
    out_dir as they finish when a directory is given."""
    if not space or any(len(v) == 0 for v in space.values()):
        raise ParamError("sweep space must have non-empty value lists")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    records = []
    best = None
    best_model = None
    for run in range(n_runs):
        cfg = TrainConfig(epochs=epochs, seed=int(rng.integers(0, 2**31)))
        for key in sorted(space):
            value = space[key][int(rng.integers(0, len(space[key])))]
            setattr(cfg, key, value)
        try:
            model, record = train(kind, train_fs, val_fs, cfg)
        except DivergedError as e:
            model = None
            record = RunRecord(kind=kind, config=cfg.to_dict())
            record.epochs.append({"epoch": e.epoch, "diverged": True})
        records.append(record)
        if out_dir is not None:
            record.save(f"{out_dir}/{kind}_run_{run:03d}.json")
        if best is None or record.best_val_accuracy > best.best_val_accuracy:
            best = record
            best_model = model
    return records, best, best_model


def finite_difference_check(kind, fs: FeatureSet, n_params=50, h=1e-4, seed=0, scale=1.0):
    """Max relative error of backprop vs central differences (float64).

    The SNN is checked in smooth mode, where the surrogate backward pass is
    the true gradient of the forward loss."""
    x = _model_input(kind, fs).astype(np.float64)
    y = fs.labels
    model = _make_model(kind, x.shape[-1], seed=seed, dtype=np.float64, mode="smooth")
    total = sum(p.size for p in model.params)
    _, grads, _ = model.loss_and_grads(x, y, scale=scale)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    flat_idx = rng.choice(total, size=min(n_params, total), replace=False)
    worst = 0.0
    for fi in flat_idx:
        pi, off = 0, int(fi)
        while off >= model.params[pi].size:
            off -= model.params[pi].size
            pi += 1
        p = model.params[pi].reshape(-1)
        keep = p[off]
        p[off] = keep + h
        up, _, _ = model.loss_and_grads(x, y, scale=scale)
        p[off] = keep - h
        dn, _, _ = model.loss_and_grads(x, y, scale=scale)
        p[off] = keep
        fd = (up - dn) / (2.0 * h)
        g = grads[pi].reshape(-1)[off]
        err = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


_CKPT_MAGIC = "slipforge-model"


def save_model(model, path):
    header = {
        "magic": _CKPT_MAGIC,
        "kind": model.kind,
        "seed": model.seed,
        "dtype": np.dtype(model.dtype).name,
        "input_dim": model.input_dim,
    }
    if model.kind == "mlp":
        header["hidden"] = list(model.hidden)
    else:
        header.update(
            hidden=model.hidden,
            alpha=model.alpha,
            v_th=model.v_th,
            slope=model.slope,
            mode=model.mode,
        )
    arrays = list(model.params) + [model.mu, model.sd]
    blob = np.concatenate([a.astype(np.float64).reshape(-1) for a in arrays])
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(blob.tobytes())


def load_model(path):
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = np.frombuffer(f.read(), dtype=np.float64)
    if header.get("magic") != _CKPT_MAGIC:
        raise ParamError(f"{path} is not a model checkpoint")
    dtype = np.dtype(header["dtype"])
    if header["kind"] == "mlp":
        model = MlpModel(header["input_dim"], tuple(header["hidden"]), header["seed"], dtype)
    else:
        model = SnnModel(
            header["input_dim"],
            header["hidden"],
            header["seed"],
            header["alpha"],
            header["v_th"],
            header["slope"],
            header["mode"],
            dtype,
        )
    off = 0
    for i, p in enumerate(model.params):
        model.params[i] = blob[off : off + p.size].reshape(p.shape).astype(dtype)
        off += p.size
    for name in ("mu", "sd"):
        setattr(model, name, blob[off : off + model.input_dim].astype(dtype))
        off += model.input_dim
    if off != blob.size:
        raise ParamError("checkpoint parameter payload has wrong length")
    return model
