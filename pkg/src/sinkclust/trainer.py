"""Episodic training of a small MLP embedding with hand-written gradients.

The loss replaces cluster centroids by class prototypes, classifies the
query set with softmax or Sinkhorn conditionals and adds a center loss on
the support set. In Sinkhorn mode a fixed number of log-domain Sinkhorn
iterations is unrolled and differentiated exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .episodes import Episode, LabeledDataset, sample_episode
from .errors import NumericError, ParseError, ShapeError

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SKC1"
GRAD_CHECK_MAX_PARAMS = 10_000


class EmbeddingModel:
    """Stack of affine layers with ReLU between them.

    ``sizes = [d_in, h1, ..., d_emb]``; a single-entry list is the
    zero-depth model, i.e. the identity map.
    """

    def __init__(self, sizes, weights=None, biases=None, seed: int | None = None):
        self.sizes = [int(s) for s in sizes]
        if not self.sizes or any(s < 1 for s in self.sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        self.seed = seed
        if weights is None:
            weights, biases = [], []
            rng = np.random.default_rng(seed)
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                bound = 1.0 / np.sqrt(fan_in)
                weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
                biases.append(rng.uniform(-bound, bound, fan_out))
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeError(f"layer {i} parameters do not match sizes {self.sizes}")

    @classmethod
    def init(cls, sizes, seed: int = 0) -> "EmbeddingModel":
        return cls(sizes, seed=seed)

    @classmethod
    def identity(cls, d: int) -> "EmbeddingModel":
        return cls([d])

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def fingerprint(self) -> str:
        return architecture_fingerprint(self.sizes)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        ps = self.params()
        return np.concatenate([p.ravel() for p in ps]) if ps else np.zeros(0)

    def set_flat(self, v) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ShapeError(f"expected {self.n_params} parameters, got {v.shape}")
        off = 0
        for p in self.params():
            p[...] = v[off:off + p.size].reshape(p.shape)
            off += p.size

    def copy(self) -> "EmbeddingModel":
        return copy.deepcopy(self)

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"model expects inputs of width {self.d_in}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite model input")
        return x

    def forward(self, x) -> np.ndarray:
        return self._forward(self._check_input(x))[0]

    __call__ = forward

    def _forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def _backward(self, acts, dout):
        """Gradients ``[dW0, db0, dW1, ...]`` and the input gradient."""
        grads = [None] * (2 * len(self.weights))
        d = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                d = d * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            d = d @ self.weights[i].T
        return grads, d


def architecture_fingerprint(sizes) -> str:
    return hashlib.sha1(("mlp-relu:" + ",".join(str(int(s)) for s in sizes)).encode()).hexdigest()[:16]


def embed_forward(model: EmbeddingModel, x) -> np.ndarray:
    return model.forward(x)


@dataclass(frozen=True)
class TrainConfig:
    conditional: str = "sinkhorn"
    T: float = 1.0
    gamma: float = 1.0
    unroll_iters: int = 20
    center_weight: float = 1.0
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    episodes_per_epoch: int = 100
    epochs: int = 10
    n_way: int = 5
    n_shot: int = 5
    n_query: int = 5
    train_way: int | None = None  # wider training episodes; None uses n_way
    seed: int = 0

    def __post_init__(self):
        if self.conditional not in ("softmax", "sinkhorn"):
            raise ValueError(f"unknown conditional {self.conditional!r}")
        if not (self.T > 0 and self.gamma > 0):
            raise ValueError("T and gamma must be > 0")
        if self.conditional == "sinkhorn" and self.unroll_iters < 1:
            raise ValueError("unroll_iters must be >= 1 in sinkhorn mode")
        if self.center_weight < 0:
            raise ValueError("center_weight must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if min(self.episodes_per_epoch, self.epochs, self.n_way, self.n_shot, self.n_query) < 1:
            raise ValueError("episode counts and sizes must be >= 1")

    @property
    def way_for_training(self) -> int:
        return self.train_way or self.n_way

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    surrogate: float
    center: float
    center_weight: float
    total: float

    @classmethod
    def of(cls, surrogate: float, center: float, center_weight: float) -> "LossBreakdown":
        return cls(surrogate, center, center_weight, surrogate + center_weight * center)

    def to_dict(self) -> dict:
        return asdict(self)


def _lse(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).sum(axis=axis))


def _softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _episode_loss(z_s, y_s, z_q, y_q, k, cfg: TrainConfig, include_surrogate=True):
    """Loss and gradients with respect to the support and query embeddings."""
    # overflow surfaces as a NumericError naming the term, not as warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _episode_loss_impl(z_s, y_s, z_q, y_q, k, cfg, include_surrogate)


def _episode_loss_impl(z_s, y_s, z_q, y_q, k, cfg, include_surrogate):
    counts = np.bincount(y_s, minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} missing from support")
    mu = np.zeros((k, z_s.shape[1]))
    np.add.at(mu, y_s, z_s)
    mu /= counts[:, None]

    # center loss: mean over support of squared distance to own prototype
    dev = z_s - mu[y_s]
    n_s = z_s.shape[0]
    center = float(np.sum(dev * dev) / n_s)
    dz_s = cfg.center_weight * 2.0 * dev / n_s
    dmu = np.zeros_like(mu)
    np.add.at(dmu, y_s, -cfg.center_weight * 2.0 * dev / n_s)

    diff = z_q[:, None, :] - mu[None, :, :]
    dist = np.einsum("qkd,qkd->qk", diff, diff)
    nq = z_q.shape[0]
    scale = cfg.T if cfg.conditional == "softmax" else cfg.gamma
    a = -dist / scale

    if cfg.conditional == "softmax":
        scores = a
        trace = None
    else:
        log_r, log_c = -np.log(nq), -np.log(k)
        g = np.zeros(k)
        trace = []
        for _ in range(cfg.unroll_iters):
            g_prev = g
            f = log_r - _lse(a + g_prev[None, :], axis=1)
            g = log_c - _lse(a + f[:, None], axis=0)
            trace.append((g_prev, f))
        scores = a + g[None, :]

    logp = scores - _lse(scores, axis=1)[:, None]
    rows = np.arange(nq)
    surrogate = float(-logp[rows, y_q].mean())
    if not np.isfinite(surrogate):
        raise NumericError("surrogate loss is non-finite")
    if not np.isfinite(center):
        raise NumericError("center loss is non-finite")

    dz_q = np.zeros_like(z_q)
    if include_surrogate:
        dlogp = np.zeros_like(logp)
        dlogp[rows, y_q] = -1.0 / nq
        dscores = dlogp - _softmax(scores, 1) * dlogp.sum(axis=1, keepdims=True)
        da = dscores.copy()
        if trace is not None:
            dg = dscores.sum(axis=0)
            for g_prev, f in reversed(trace):
                # g = log c - lse_i(a + f)
                pi_col = _softmax(a + f[:, None], 0)
                t = -dg[None, :] * pi_col
                da += t
                df = t.sum(axis=1)
                # f = log r - lse_j(a + g_prev)
                pi_row = _softmax(a + g_prev[None, :], 1)
                t = -df[:, None] * pi_row
                da += t
                dg = t.sum(axis=0)
        ddist = -da / scale
        w = 2.0 * ddist[:, :, None] * diff
        dz_q = w.sum(axis=1)
        dmu -= w.sum(axis=0)
    dz_s = dz_s + dmu[y_s] / counts[y_s, None]
    if include_surrogate:
        loss = LossBreakdown.of(surrogate, center, cfg.center_weight)
    else:
        loss = LossBreakdown(surrogate, center, cfg.center_weight, cfg.center_weight * center)
    return loss, dz_s, dz_q


def surrogate_loss_and_grads(model: EmbeddingModel, episode: Episode, cfg: TrainConfig,
                             include_surrogate: bool = True, input_grads: bool = False):
    """Surrogate + center loss of one episode and its parameter gradients.

    Returns ``(LossBreakdown, grads)`` with ``grads`` ordered as
    ``model.params()``. With ``input_grads=True`` a third element holds the
    gradients with respect to ``(support_x, query_x)``. When
    ``include_surrogate`` is False the surrogate is still reported but
    excluded from ``total`` and from the gradients.
    """
    xs = model._check_input(episode.support_x)
    xq = model._check_input(episode.query_x)
    x = np.vstack([xs, xq])
    z, acts = model._forward(x)
    n_s = xs.shape[0]
    loss, dz_s, dz_q = _episode_loss(
        z[:n_s], np.asarray(episode.support_y), z[n_s:], np.asarray(episode.query_y),
        episode.n_way, cfg, include_surrogate,
    )
    grads, dx = model._backward(acts, np.vstack([dz_s, dz_q]))
    if input_grads:
        return loss, grads, (dx[:n_s], dx[n_s:])
    return loss, grads


def grad_check(model: EmbeddingModel, episode: Episode, cfg: TrainConfig, step: float = 1e-5,
               include_surrogate: bool = True, seed: int = 0, floor: float = 1e-6,
               scale_floor: float = 1e-3) -> float:
    """Max relative error of analytic gradients against central differences.

    Covers every parameter (a seeded subset of 10k above that size) and, for
    parameter-free models, the inputs. Relative error is
    ``|a - n| / max(|a|, |n|, floor, scale_floor * max|a|)``. Central
    differences carry about eps*|loss|/step of rounding noise, so entries many
    orders below the largest gradient entry are judged against that scale
    instead of turning noise into huge ratios.
    """
    if not step > 0:
        raise ValueError("step must be > 0")

    def total(m, ep):
        return _total_loss(m, ep, cfg, include_surrogate)

    worst = 0.0
    if model.n_params:
        _, grads = surrogate_loss_and_grads(model, episode, cfg, include_surrogate)
        analytic = np.concatenate([g.ravel() for g in grads])
        theta = model.flat()
        idx = np.arange(theta.size)
        if theta.size > GRAD_CHECK_MAX_PARAMS:
            idx = np.sort(np.random.default_rng(seed).choice(theta.size, GRAD_CHECK_MAX_PARAMS, replace=False))
        floor = max(floor, scale_floor * float(np.abs(analytic).max(initial=0.0)))
        m = model.copy()
        for i in idx:
            t = theta.copy()
            t[i] += step
            m.set_flat(t)
            up = total(m, episode)
            t[i] -= 2 * step
            m.set_flat(t)
            down = total(m, episode)
            worst = max(worst, _rel(analytic[i], (up - down) / (2 * step), floor))
    else:
        _, _, (gs, gq) = surrogate_loss_and_grads(model, episode, cfg, include_surrogate, input_grads=True)
        floor = max(floor, scale_floor * float(max(np.abs(gs).max(initial=0.0), np.abs(gq).max(initial=0.0))))
        for name, g in (("support_x", gs), ("query_x", gq)):
            base = getattr(episode, name)
            for i in np.ndindex(base.shape):
                x = base.copy()
                x[i] += step
                up = total(model, _replace(episode, name, x))
                x[i] -= 2 * step
                down = total(model, _replace(episode, name, x))
                worst = max(worst, _rel(g[i], (up - down) / (2 * step), floor))
    return worst


def _rel(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


def _replace(episode, name, value):
    d = dict(episode.__dict__)
    d[name] = value
    return Episode(**d)


def _total_loss(model, episode, cfg, include_surrogate=True):
    xs, xq = episode.support_x, episode.query_x
    n_s = xs.shape[0]
    z = model.forward(np.vstack([xs, xq]))
    loss, _, _ = _episode_loss(z[:n_s], np.asarray(episode.support_y), z[n_s:],
                               np.asarray(episode.query_y), episode.n_way, cfg, include_surrogate)
    return loss.total


# ----------------------------------------------------------- optimization


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self.velocity = None

    def step(self, params, grads):
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.lr, cfg.momentum)
    return Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``model`` holds the last finite parameters."""

    def __init__(self, message, model, curve):
        super().__init__(message)
        self.model = model
        self.curve = curve


class TrainingInterrupted(KeyboardInterrupt):
    def __init__(self, model, curve):
        super().__init__("training interrupted")
        self.model = model
        self.curve = curve


def _mean_breakdown(losses):
    s = float(np.mean([l.surrogate for l in losses]))
    c = float(np.mean([l.center for l in losses]))
    return LossBreakdown.of(s, c, losses[0].center_weight)


def train(ds: LabeledDataset, model: EmbeddingModel, cfg: TrainConfig, on_epoch=None):
    """Run ``cfg.epochs * cfg.episodes_per_epoch`` optimizer steps.

    ``model`` is not modified. Returns ``(trained_model, curve)`` where
    ``curve`` holds one mean :class:`LossBreakdown` per epoch. Episode
    ``i`` of epoch ``e`` is sampled with a seed derived from
    ``(cfg.seed, e, i)``.
    """
    m = model.copy()
    opt = make_optimizer(cfg)
    curve: list[LossBreakdown] = []
    last_good = m.copy()
    try:
        for epoch in range(cfg.epochs):
            losses = []
            seeds = np.random.SeedSequence([cfg.seed, epoch]).generate_state(cfg.episodes_per_epoch)
            for s in seeds:
                ep = sample_episode(ds, cfg.way_for_training, cfg.n_shot, cfg.n_query, int(s))
                try:
                    loss, grads = surrogate_loss_and_grads(m, ep, cfg)
                except NumericError as e:
                    raise TrainingDiverged(f"epoch {epoch}: {e}", last_good, curve) from e
                params = m.params()
                opt.step(params, grads)
                if not all(np.all(np.isfinite(p)) for p in params):
                    raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", last_good, curve)
                losses.append(loss)
            curve.append(_mean_breakdown(losses))
            last_good = m.copy()
            log.info("epoch %d total %.6f surrogate %.6f center %.6f", epoch, curve[-1].total,
                     curve[-1].surrogate, curve[-1].center)
            if on_epoch is not None:
                on_epoch(epoch, m, curve)
    except KeyboardInterrupt:
        raise TrainingInterrupted(last_good, curve) from None
    return m, curve


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: EmbeddingModel, cfg: TrainConfig | None = None, final: bool = True,
                    extra: dict | None = None) -> None:
    """Write ``SKC1 | u32 header length | JSON header | f64 LE parameters``."""
    header = {
        "sizes": model.sizes,
        "fingerprint": model.fingerprint,
        "seed": model.seed,
        "config": cfg.to_dict() if cfg else None,
        "final": bool(final),
        "n_params": model.n_params,
        "version": __version__,
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(model.flat().astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[EmbeddingModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}", path=path, offset=0)
    if len(raw) < 8:
        raise ParseError("truncated header", path=path, offset=len(raw))
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"unreadable header: {e}", path=path, offset=8) from None
    sizes = header["sizes"]
    model = EmbeddingModel(sizes, seed=header.get("seed"))
    payload = raw[8 + hlen:]
    if len(payload) != 8 * model.n_params:
        raise ParseError(
            f"parameter blob has {len(payload)} bytes, expected {8 * model.n_params}",
            path=path, offset=8 + hlen,
        )
    model.set_flat(np.frombuffer(payload, dtype="<f8"))
    if header.get("fingerprint") != model.fingerprint:
        raise ParseError("fingerprint does not match layer sizes", path=path)
    return model, header
