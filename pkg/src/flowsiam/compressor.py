"""Siamese LSTM autoencoder.

One weight set (two encoder LSTMs, two decoder LSTMs, one linear readout)
is applied to every member of a fleet.  Training minimises the mean
reconstruction loss plus lambda times the mean pairwise latent distance,
using normal fleets only.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DEFAULT_FEATURES, Dataset, Label, Normalization, dataset_windows, fit_normalizer
from .neuralnet import (
    AdamState,
    LinearParams,
    LstmParams,
    adam_step,
    clip_global_norm,
    linear_backward,
    linear_forward,
    lstm_backward,
    lstm_forward,
)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
LAYERS = ("enc1", "enc2", "dec1", "dec2")


class ModelFileError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class SiameseAutoencoder:
    enc1: LstmParams  # d -> h1
    enc2: LstmParams  # h1 -> L
    dec1: LstmParams  # L -> h1
    dec2: LstmParams  # h1 -> h1
    out: LinearParams  # h1 -> d
    T: int
    feature_spec: Tuple[str, ...] = DEFAULT_FEATURES
    normalization: Optional[Normalization] = None
    epochs_trained: int = 0

    def __post_init__(self):
        d, h1, L = self.d, self.h1, self.L
        expected = {
            "enc1": (d, h1), "enc2": (h1, L), "dec1": (L, h1), "dec2": (h1, h1),
        }
        for name, (i, o) in expected.items():
            p = getattr(self, name)
            if (p.input_size, p.hidden_size) != (i, o):
                raise ValueError(f"{name}: expected {i}->{o}, got {p.input_size}->{p.hidden_size}")
        if self.out.weight.shape != (d, h1):
            raise ValueError(f"out: expected ({d}, {h1}) weight, got {self.out.weight.shape}")
        if L >= self.T * d:
            raise ValueError(f"latent size {L} is not a bottleneck for {self.T}x{d} inputs")
        self.feature_spec = tuple(self.feature_spec)

    @property
    def d(self) -> int:
        return self.enc1.input_size

    @property
    def h1(self) -> int:
        return self.enc1.hidden_size

    @property
    def L(self) -> int:
        return self.enc2.hidden_size

    @property
    def dims(self) -> Dict[str, int]:
        return {"d": self.d, "h1": self.h1, "L": self.L, "T": self.T}

    @classmethod
    def init(cls, d=3, h1=32, L=13, T=60, seed=0, feature_spec=DEFAULT_FEATURES, normalization=None):
        rng = np.random.default_rng(seed)
        return cls(
            LstmParams.init(d, h1, rng),
            LstmParams.init(h1, L, rng),
            LstmParams.init(L, h1, rng),
            LstmParams.init(h1, h1, rng),
            LinearParams.init(h1, d, rng),
            T, feature_spec, normalization,
        )

    @classmethod
    def zeros(cls, d=3, h1=4, L=2, T=5, feature_spec=None):
        if feature_spec is None:
            feature_spec = DEFAULT_FEATURES[:d] if d <= 3 else tuple(f"f{i}" for i in range(d))
        return cls(
            LstmParams.zeros(d, h1), LstmParams.zeros(h1, L), LstmParams.zeros(L, h1),
            LstmParams.zeros(h1, h1), LinearParams(np.zeros((d, h1)), np.zeros(d)), T, feature_spec,
        )

    def tensors(self) -> Dict[str, np.ndarray]:
        """Live references to every parameter array, keyed ``layer.field``."""
        out = {}
        for name in LAYERS:
            p = getattr(self, name)
            out[f"{name}.W"], out[f"{name}.U"], out[f"{name}.b"] = p.W, p.U, p.b
        out["out.weight"], out["out.bias"] = self.out.weight, self.out.bias
        return out

    def set_tensors(self, t: Dict[str, np.ndarray]) -> None:
        for name in LAYERS:
            setattr(self, name, LstmParams(t[f"{name}.W"], t[f"{name}.U"], t[f"{name}.b"]))
        self.out = LinearParams(t["out.weight"], t["out.bias"])


def _grads_to_dict(g) -> Dict[str, np.ndarray]:
    out = {}
    for name in LAYERS:
        p = g[name]
        out[f"{name}.W"], out[f"{name}.U"], out[f"{name}.b"] = p.W, p.U, p.b
    out["out.weight"], out["out.bias"] = g["out"].weight, g["out"].bias
    return out


# --- forward / backward ------------------------------------------------------------


def _check_windows(model: SiameseAutoencoder, X: np.ndarray):
    if X.shape[-2:] != (model.T, model.d):
        raise ValueError(f"window shape {X.shape[-2:]} does not match model (T={model.T}, d={model.d})")


def forward(model: SiameseAutoencoder, X: np.ndarray):
    """Batched pass over (N, T, d) windows; returns (latents, recon, caches)."""
    _check_windows(model, X)
    h1, c1 = lstm_forward(model.enc1, X)
    h2, c2 = lstm_forward(model.enc2, h1)
    latent = h2[:, -1]
    dec_in = np.repeat(latent[:, None, :], model.T, axis=1)
    d1, c3 = lstm_forward(model.dec1, dec_in)
    d2, c4 = lstm_forward(model.dec2, d1)
    recon = linear_forward(model.out, d2)
    return latent, recon, (c1, c2, c3, c4, d2)


def backward(model: SiameseAutoencoder, caches, grad_recon: np.ndarray, grad_latent: np.ndarray):
    c1, c2, c3, c4, d2 = caches
    g_out, g_d2 = linear_backward(model.out, d2, grad_recon)
    g_dec2, g_d1, _, _ = lstm_backward(c4, g_d2)
    g_dec1, g_in, _, _ = lstm_backward(c3, g_d1)
    g_lat = grad_latent + g_in.sum(axis=1)
    T2, N2, L2 = c2.h.shape
    gh2 = np.zeros((N2, T2, L2))
    gh2[:, -1] = g_lat
    g_enc2, g_h1, _, _ = lstm_backward(c2, gh2)
    g_enc1, _, _, _ = lstm_backward(c1, g_h1)
    return _grads_to_dict({"enc1": g_enc1, "enc2": g_enc2, "dec1": g_dec1, "dec2": g_dec2, "out": g_out})


def encode(model: SiameseAutoencoder, w: np.ndarray) -> np.ndarray:
    """Latent vector of one (T, d) window, or (N, L) for an (N, T, d) batch."""
    w = np.asarray(w, dtype=np.float64)
    _check_windows(model, w)
    single = w.ndim == 2
    X = w[None] if single else w.reshape(-1, model.T, model.d)
    h1, _ = lstm_forward(model.enc1, X)
    h2, _ = lstm_forward(model.enc2, h1)
    lat = h2[:, -1]
    return lat[0] if single else lat.reshape(w.shape[:-2] + (model.L,))


def decode(model: SiameseAutoencoder, latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape[-1] != model.L:
        raise ValueError(f"latent length {latent.shape[-1]} does not match model L={model.L}")
    single = latent.ndim == 1
    lat = latent[None] if single else latent.reshape(-1, model.L)
    d1, _ = lstm_forward(model.dec1, np.repeat(lat[:, None, :], model.T, axis=1))
    d2, _ = lstm_forward(model.dec2, d1)
    out = linear_forward(model.out, d2)
    return out[0] if single else out.reshape(latent.shape[:-1] + (model.T, model.d))


# --- losses -----------------------------------------------------------------------


def rloss(Y, Y_hat) -> float:
    """tanh of the mean squared reconstruction error."""
    Y, Y_hat = np.asarray(Y, dtype=np.float64), np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Y_hat.shape}")
    return float(np.tanh(np.mean((Y - Y_hat) ** 2)))


def sim(a, b) -> float:
    """tanh of the mean squared latent difference: 0 for identical vectors."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"latent length mismatch {a.shape} vs {b.shape}")
    return float(np.tanh(np.mean((a - b) ** 2)))


def pairwise_sim(latents: np.ndarray) -> np.ndarray:
    """(..., m, m) matrix of ``sim`` between members along axis -2."""
    diff = latents[..., :, None, :] - latents[..., None, :, :]
    return np.tanh(np.mean(diff * diff, axis=-1))


def combine_loss(rlosses: Sequence[float], pair_sims: Sequence[float], lam: float) -> float:
    """Mean reconstruction loss plus ``lam`` times the mean over unordered pairs."""
    m = len(rlosses)
    if m < 2:
        raise ValueError("aggregated loss needs at least two fleet members")
    return math.fsum(rlosses) / m + 2.0 * lam / (m * (m - 1)) * math.fsum(pair_sims)


def aggregated_loss(model: SiameseAutoencoder, windows: np.ndarray, lam: float = 1.0):
    """Loss of one fleet given its (m, T, d) member windows.

    Returns (total, mean rloss, mean sim).
    """
    windows = np.asarray(windows, dtype=np.float64)
    m = windows.shape[0]
    if windows.ndim != 3 or m < 2:
        raise ValueError("aggregated loss needs (m >= 2, T, d) windows")
    lat, recon, _ = forward(model, windows)
    rl = [rloss(windows[i], recon[i]) for i in range(m)]
    pairs = [sim(lat[i], lat[j]) for i in range(m) for j in range(i + 1, m)]
    return combine_loss(rl, pairs, lam), math.fsum(rl) / m, math.fsum(pairs) / len(pairs)


def batch_loss_and_grads(model: SiameseAutoencoder, batch: np.ndarray, lam: float):
    """Mean aggregated loss over a (B, m, T, d) batch of fleets and its gradient.

    Returns (total, mean rloss, mean sim, grads).
    """
    B, m, T, d = batch.shape
    if m < 2:
        raise ValueError("aggregated loss needs at least two fleet members")
    X = batch.reshape(B * m, T, d)
    lat, recon, caches = forward(model, X)
    L = lat.shape[-1]
    n = T * d

    err = recon - X
    rl = np.tanh(np.mean(err * err, axis=(1, 2)))  # (B*m,)
    g_recon = ((1.0 - rl * rl) * (2.0 / n) / (B * m))[:, None, None] * err

    lat_b = lat.reshape(B, m, L)
    S = pairwise_sim(lat_b)
    iu = np.triu_indices(m, 1)
    P = len(iu[0])
    pair_sims = S[:, iu[0], iu[1]]  # (B, P)
    w = np.zeros((B, m, m))
    w[:, iu[0], iu[1]] = lam / (B * P) * (1.0 - pair_sims ** 2)
    w = w + w.transpose(0, 2, 1)
    g_lat = (2.0 / L) * (lat_b * w.sum(axis=2)[..., None] - w @ lat_b)

    total = float(rl.mean() + lam * pair_sims.mean())
    grads = backward(model, caches, g_recon, g_lat.reshape(B * m, L))
    return total, float(rl.mean()), float(pair_sims.mean()), grads


# --- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs_max: int = 300
    batch_flows: int = 16
    lr: float = 1e-3
    seed: int = 0
    patience: int = 20
    min_delta: float = 1e-4
    clip_norm: float = 5.0

    def validate(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs_max < 1 or self.batch_flows < 1:
            raise ValueError("epochs_max and batch_flows must be >= 1")


@dataclass
class TrainLogRecord:
    epoch: int
    rloss: float
    sim: float
    total: float
    seconds: float


def train(model: SiameseAutoencoder, data: Dataset, cfg: TrainConfig = TrainConfig(), on_epoch=None):
    """Fit ``model`` in place on normal fleets; returns (model, log records).

    If the model carries no normalization, one is fitted on ``data``.
    Epoch numbering continues from ``model.epochs_trained``.
    """
    cfg.validate()
    if not data.flows:
        raise ValueError("empty training set")
    bad = [f.flow_id for f in data.flows if f.label is not Label.NORMAL]
    if bad:
        raise ValueError(f"training data must contain only Normal flows; found abnormal {bad[:5]}")
    if tuple(data.feature_spec) != model.feature_spec:
        raise ValueError(f"dataset features {data.feature_spec} do not match model {model.feature_spec}")
    if model.normalization is None:
        model.normalization = fit_normalizer(data)
    W = dataset_windows(data, model.normalization)
    _check_windows(model, W)

    rng = np.random.default_rng([cfg.seed, 7])
    state = AdamState(lr=cfg.lr)
    params = model.tensors()
    records: List[TrainLogRecord] = []
    best, stale = np.inf, 0
    n = len(W)
    for e in range(cfg.epochs_max):
        epoch = model.epochs_trained + 1
        t0 = time.perf_counter()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for bi, start in enumerate(range(0, n, cfg.batch_flows)):
            idx = order[start : start + cfg.batch_flows]
            total, rl, sm, grads = batch_loss_and_grads(model, W[idx], cfg.lam)
            if not np.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state)
            model.set_tensors(params)
            sums += np.array([total, rl, sm]) * len(idx)
        total, rl, sm = sums / n
        model.epochs_trained = epoch
        rec = TrainLogRecord(epoch, float(rl), float(sm), float(total), time.perf_counter() - t0)
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
        if best - total > cfg.min_delta:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (no improvement for %d epochs)", epoch, stale)
                break
    return model, records


def write_train_log(records: Sequence[TrainLogRecord], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["epoch", "rloss", "sim", "total", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(float(r.rloss)), repr(float(r.sim)), repr(float(r.total)), f"{r.seconds:.4f}"])


def read_train_log(path) -> List[TrainLogRecord]:
    with open(path, newline="") as fh:
        return [
            TrainLogRecord(int(r["epoch"]), float(r["rloss"]), float(r["sim"]), float(r["total"]), float(r["seconds"]))
            for r in csv.DictReader(fh)
        ]


# --- persistence ------------------------------------------------------------------


def model_to_json(model: SiameseAutoencoder) -> str:
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "dims": model.dims,
        "feature_spec": list(model.feature_spec),
        "normalization": model.normalization.to_dict() if model.normalization else None,
        "epochs_trained": model.epochs_trained,
        "tensors": {k: v.tolist() for k, v in model.tensors().items()},
    }
    return json.dumps(doc, separators=(",", ":"), allow_nan=False)


def save_model(model: SiameseAutoencoder, path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path) -> SiameseAutoencoder:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ModelFileError(f"{path}: corrupt model file ({e})") from e
    if not isinstance(doc, dict) or doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported model format_version {doc.get('format_version') if isinstance(doc, dict) else None!r}")
    try:
        dims = doc["dims"]
        t = {k: np.asarray(v, dtype=np.float64) for k, v in doc["tensors"].items()}
        model = SiameseAutoencoder(
            LstmParams(t["enc1.W"], t["enc1.U"], t["enc1.b"]),
            LstmParams(t["enc2.W"], t["enc2.U"], t["enc2.b"]),
            LstmParams(t["dec1.W"], t["dec1.U"], t["dec1.b"]),
            LstmParams(t["dec2.W"], t["dec2.U"], t["dec2.b"]),
            LinearParams(t["out.weight"], t["out.bias"]),
            int(dims["T"]),
            tuple(doc["feature_spec"]),
            Normalization.from_dict(doc["normalization"]) if doc.get("normalization") else None,
            int(doc.get("epochs_trained", 0)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"{path}: invalid model contents ({e})") from e
    if model.dims != {k: int(dims[k]) for k in ("d", "h1", "L", "T")}:
        raise ModelFileError(f"{path}: tensor shapes {model.dims} disagree with recorded dims {dims}")
    return model
