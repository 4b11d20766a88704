"""One-hidden-layer perceptron regression with a plain-text model format."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

FORMAT_NAME = "sadamp-mlp"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class ModelFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Dataset:
    """Input/target rows with names and a per-row split label."""

    X: np.ndarray
    Y: np.ndarray
    input_names: tuple[str, ...]
    target_names: tuple[str, ...]
    split: np.ndarray = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("inputs and targets differ in row count")
        if self.X.shape[1] != len(self.input_names) or self.Y.shape[1] != len(self.target_names):
            raise ValueError("feature names do not match column counts")
        if self.split is None:
            self.split = np.full(self.X.shape[0], "train", dtype=object)
        self.split = np.asarray(self.split, dtype=object)
        if self.split.shape != (self.X.shape[0],) or not set(self.split) <= set(SPLITS):
            raise ValueError("split labels must be train, val or test, one per row")

    def __len__(self):
        return self.X.shape[0]

    def assign_splits(self, seed: int = 0, fractions=(0.70, 0.15, 0.15)) -> "Dataset":
        """Random 70/15/15 assignment, reproducible from ``seed``."""
        n = len(self)
        order = np.random.default_rng(seed).permutation(n)
        n_tr = int(round(fractions[0] * n))
        n_va = int(round(fractions[1] * n))
        lab = np.empty(n, dtype=object)
        lab[order[:n_tr]] = "train"
        lab[order[n_tr:n_tr + n_va]] = "val"
        lab[order[n_tr + n_va:]] = "test"
        return Dataset(self.X, self.Y, self.input_names, self.target_names, lab)

    def part(self, name: str):
        m = self.split == name
        return self.X[m], self.Y[m]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(self.input_names) + list(self.target_names) + ["split"])
        for x, y, s in zip(self.X, self.Y, self.split):
            w.writerow([format(v, ".17g") for v in x] + [format(v, ".17g") for v in y] + [s])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_inputs: int) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        head = rows[0]
        if head[-1] != "split":
            raise ValueError("dataset CSV must end with a split column")
        body = rows[1:]
        vals = np.array([[float(v) for v in r[:-1]] for r in body]).reshape(len(body), len(head) - 1)
        return cls(vals[:, :n_inputs], vals[:, n_inputs:], tuple(head[:n_inputs]),
                   tuple(head[n_inputs:-1]), np.array([r[-1] for r in body], dtype=object))


@dataclass(frozen=True)
class Hyper:
    hidden: int = 10
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 200
    max_epochs: int = 20000
    plateau: int = 50
    min_lr: float = 1e-6


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: np.ndarray
    y_scale: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    seed: int = 0
    input_names: tuple = ()
    output_names: tuple = ()
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        n_h, n_in = self.W1.shape
        n_out = self.W2.shape[0]
        if self.b1.shape != (n_h,) or self.W2.shape != (n_out, n_h) or self.b2.shape != (n_out,):
            raise ValueError("inconsistent layer shapes")
        if self.x_mean.shape != (n_in,) or self.y_mean.shape != (n_out,):
            raise ValueError("normalization vectors do not match layer sizes")
        if np.any(self.x_scale <= 0) or np.any(self.y_scale <= 0):
            raise ValueError("normalization scales must be positive")
        for a in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite weights")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def normalize(self, X):
        return (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale

    def denormalize(self, Z):
        return np.asarray(Z, dtype=float) * self.x_scale + self.x_mean

    def forward_norm(self, Xn):
        H = sigmoid(Xn @ self.W1.T + self.b1)
        return H @ self.W2.T + self.b2

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]


@dataclass(frozen=True)
class Prediction:
    value: np.ndarray
    extrapolated: bool


def predict(m: MlpModel, x) -> Prediction:
    """Denormalized output for one input vector or a batch of rows.

    The flag is set when any input lies outside the training range widened
    1.5x about its centre.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != m.sizes[0]:
        raise ValueError(f"expected {m.sizes[0]} inputs, got {x.shape[-1]}")
    y = m.forward_norm(m.normalize(x)) * m.y_scale + m.y_mean
    c = 0.5 * (m.x_max + m.x_min)
    half = 0.75 * (m.x_max - m.x_min)
    extra = bool(np.any(np.abs(x - c) > half + 1e-12 * np.maximum(1.0, np.abs(c))))
    return Prediction(y, extra)


def r_squared(pred, target) -> np.ndarray:
    """Coefficient of determination per output column."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    if t.shape[0] < 2:
        raise ValueError("R^2 needs at least two rows")
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise ValueError("R^2 undefined: a target column has zero variance")
    return 1.0 - np.sum((t - p) ** 2, axis=0) / ss_tot


def _loss_grad(params, Xn, Yn):
    W1, b1, W2, b2 = params
    Z = Xn @ W1.T + b1
    H = sigmoid(Z)
    out = H @ W2.T + b2
    E = out - Yn
    n = Xn.shape[0]
    loss = float(np.mean(E * E))
    dO = 2.0 * E / (n * Yn.shape[1])
    gW2 = dO.T @ H
    gb2 = dO.sum(axis=0)
    dZ = (dO @ W2) * H * (1 - H)
    gW1 = dZ.T @ Xn
    gb1 = dZ.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2]


def _mse(params, Xn, Yn):
    if Xn.shape[0] == 0:
        return math.nan
    W1, b1, W2, b2 = params
    E = sigmoid(Xn @ W1.T + b1) @ W2.T + b2 - Yn
    return float(np.mean(E * E))


def _scales(A):
    mean = A.mean(axis=0)
    std = A.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def train(ds: Dataset, hyper: Hyper = Hyper(), seed: int = 0):
    """Fit by full-batch gradient descent with momentum on z-scored data.

    Early stopping restores the weights of the best validation epoch (train
    loss is used when the dataset has no validation rows). Returns the model
    and a metrics dict with per-split MSE and per-output test R^2.
    """
    Xtr, Ytr = ds.part("train")
    if len(Xtr) == 0:
        raise ValueError("dataset has no training rows")
    if not (np.all(np.isfinite(ds.X)) and np.all(np.isfinite(ds.Y))):
        raise ValueError("dataset contains non-finite values")
    xm, xs = _scales(Xtr)
    ym, ys = _scales(Ytr)
    Xva, Yva = ds.part("val")
    norm = lambda X, Y: ((X - xm) / xs, (Y - ym) / ys)  # noqa: E731
    Xn, Yn = norm(Xtr, Ytr)
    Xvn, Yvn = norm(Xva, Yva)
    n_in, n_out, n_h = ds.X.shape[1], ds.Y.shape[1], hyper.hidden

    lr0 = hyper.lr
    for restart in range(4):
        rng = np.random.default_rng(seed)
        a1 = math.sqrt(6.0 / (n_in + n_h))
        a2 = math.sqrt(6.0 / (n_h + n_out))
        params = [rng.uniform(-a1, a1, (n_h, n_in)), np.zeros(n_h),
                  rng.uniform(-a2, a2, (n_out, n_h)), np.zeros(n_out)]
        vel = [np.zeros_like(p) for p in params]
        lr = lr0
        best = (math.inf, [p.copy() for p in params], 0)
        since_best = 0
        best_train = math.inf
        since_train = 0
        history = []
        ok = True
        for epoch in range(hyper.max_epochs):
            loss, grads = _loss_grad(params, Xn, Yn)
            if not math.isfinite(loss):
                ok = False
                break
            val = _mse(params, Xvn, Yvn) if len(Xvn) else loss
            history.append(val)
            if val < best[0]:
                best = (val, [p.copy() for p in params], epoch)
                since_best = 0
            else:
                since_best += 1
                if since_best >= hyper.patience:
                    break
            if loss < best_train * (1 - 1e-6):
                best_train = loss
                since_train = 0
            else:
                since_train += 1
                if since_train >= hyper.plateau:
                    lr *= 0.5
                    since_train = 0
                    if lr < hyper.min_lr:
                        break
            for p, v, g in zip(params, vel, grads):
                v *= hyper.momentum
                v -= lr * g
                p += v
        if ok:
            break
        lr0 *= 0.5
    else:
        raise TrainingError("loss diverged after three step-size halvings")

    W1, b1, W2, b2 = best[1]
    info = asdict(hyper)
    info.update(lr_used=lr0, best_epoch=best[2], epochs=len(history))
    model = MlpModel(W1, b1, W2, b2, xm, xs, ym, ys, Xtr.min(axis=0), Xtr.max(axis=0), seed,
                     tuple(ds.input_names), tuple(ds.target_names), info)
    metrics = {"best_epoch": best[2], "epochs": len(history),
               "val_at_best": best[0], "val_final": history[-1] if history else math.nan}
    for s in SPLITS:
        X, Y = ds.part(s)
        metrics[f"mse_{s}"] = _mse(model.params(), *norm(X, Y)) if len(X) else math.nan
    Xt, Yt = ds.part("test")
    if len(Xt) >= 2:
        metrics["r2_test"] = r_squared(predict(model, Xt).value, Yt)
    return model, metrics


def _flat(params):
    return np.concatenate([p.ravel() for p in params])


def _unflat(v, like):
    out, k = [], 0
    for p in like:
        out.append(v[k:k + p.size].reshape(p.shape))
        k += p.size
    return out


def gradient_check(m: MlpModel, x, y, step: float = 1e-5) -> float:
    """Largest relative gap between backpropagated and central-difference
    gradients of the normalized squared error at one sample.

    Each component's gap is divided by the larger of the two estimates,
    floored at 1e-4 of the gradient's largest component. A central
    difference of the loss carries about eps * loss / step of rounding
    error, so smaller components cannot be resolved to 1e-6 anyway.
    """
    Xn = m.normalize(np.atleast_2d(x))
    Yn = (np.atleast_2d(np.asarray(y, dtype=float)) - m.y_mean) / m.y_scale
    params = m.params()
    _, g = _loss_grad(params, Xn, Yn)
    ga = _flat(g)
    v0 = _flat(params)
    gn = np.empty_like(v0)
    for i in range(v0.size):
        vp = v0.copy()
        vp[i] += step
        vm = v0.copy()
        vm[i] -= step
        gn[i] = (_mse(_unflat(vp, params), Xn, Yn) - _mse(_unflat(vm, params), Xn, Yn)) / (2 * step)
    den = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-4 * max(np.abs(ga).max(), 1e-300))
    return float(np.max(np.abs(ga - gn) / den))


# persistence ----------------------------------------------------------------

def _vec(v) -> str:
    return " ".join(format(float(x), ".17g") for x in np.ravel(v))


def model_to_text(m: MlpModel) -> str:
    n_in, n_h, n_out = m.sizes
    lines = [f"{FORMAT_NAME} {FORMAT_VERSION}",
             f"sizes {n_in} {n_h} {n_out}",
             f"seed {m.seed}",
             "hyper " + " ".join(f"{k}={v}" for k, v in sorted(m.hyper.items())),
             "inputs " + " ".join(m.input_names),
             "outputs " + " ".join(m.output_names)]
    for name in ("x_mean", "x_scale", "x_min", "x_max", "y_mean", "y_scale"):
        lines.append(f"{name} {_vec(getattr(m, name))}")
    for name in ("W1", "b1", "W2", "b2"):
        a = np.atleast_2d(getattr(m, name))
        lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
        lines += [_vec(r) for r in a]
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> MlpModel:
    lines = text.splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT_NAME:
        raise ModelFormatError("not a model file")
    if int(head[1]) != FORMAT_VERSION:
        raise ModelFormatError(f"model format version {head[1]} is not supported (expected {FORMAT_VERSION})")
    it = iter(lines[1:])

    def tagged(tag):
        parts = next(it).split()
        if not parts or parts[0] != tag:
            raise ModelFormatError(f"expected '{tag}' line")
        return parts[1:]

    n_in, n_h, n_out = (int(v) for v in tagged("sizes"))
    seed = int(tagged("seed")[0])
    hyper = {}
    for kv in tagged("hyper"):
        k, v = kv.split("=", 1)
        hyper[k] = float(v) if any(c in v for c in ".e") else int(v)
    ins = tuple(tagged("inputs"))
    outs = tuple(tagged("outputs"))
    vecs = {name: np.array([float(v) for v in tagged(name)])
            for name in ("x_mean", "x_scale", "x_min", "x_max", "y_mean", "y_scale")}
    mats = {}
    for name in ("W1", "b1", "W2", "b2"):
        r, c = (int(v) for v in tagged(name))
        mats[name] = np.array([[float(v) for v in next(it).split()] for _ in range(r)])
    W1 = mats["W1"].reshape(n_h, n_in)
    W2 = mats["W2"].reshape(n_out, n_h)
    return MlpModel(W1, mats["b1"].ravel(), W2, mats["b2"].ravel(), seed=seed,
                    input_names=ins, output_names=outs, hyper=hyper, **vecs)
