"""Recurrent motion model: LSTM stack with a mixture-density output head.

The network maps a 2-D position (plus its recurrent state) to a bivariate
Gaussian mixture over the *offset* to the next position. Training minimizes
the negative log-likelihood of observed offsets; gradients are computed by
an exact, hand-written backpropagation through time so that training has
no framework dependency and stays bit-reproducible.

Head layout: 6 raw values per mixture component, in the order
(weight logit, mean_x, mean_y, std_x pre-activation, std_y pre-activation,
corr pre-activation). Weights go through a normalized exponential, stds
through exp (floored at ``STD_FLOOR``), correlations through tanh.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, DegenerateDensity, DivergedTraining, NonFiniteActivation
from .gmm import GaussianMixture2D, shift_means

INPUT_DIM = 2
STD_FLOOR = 1e-4
_LOG_STD_FLOOR = float(np.log(STD_FLOOR))
_LOG_2PI = float(np.log(2.0 * np.pi))
# Per-step log-densities are clamped here; hitting the clamp means the
# mixture assigned (numerically) zero probability to an observed offset.
_LOG_DENSITY_FLOOR = float(np.log(1e-300))

_MAGIC = b"LSTMMDL\x00"
_FORMAT_VERSION = 1
_CELL_TYPE_LSTM = 0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Output dimension is 6*num_components."""

    num_components: int = 3
    hidden_size: int = 32
    num_layers: int = 1

    def __post_init__(self):
        if self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")


@dataclass
class CellState:
    """Recurrent state for a batch of independent sequences.

    ``h`` and ``c`` have shape (num_layers, batch, hidden_size). States are
    value-like: stepping a model never mutates its input state, and
    :meth:`clone` gives an independent copy safe to evolve separately.
    """

    h: np.ndarray
    c: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.h.shape[1]

    def clone(self) -> "CellState":
        return CellState(self.h.copy(), self.c.copy())

    def take(self, indices: np.ndarray) -> "CellState":
        """Gather per-sequence states, e.g. when particles inherit ancestors."""
        return CellState(self.h[:, indices].copy(), self.c[:, indices].copy())


@dataclass
class MixtureBatch:
    """Per-sequence mixture parameters from one batched forward step."""

    pis: np.ndarray     # (B, K)
    means: np.ndarray   # (B, K, 2)
    stds: np.ndarray    # (B, K, 2)
    corrs: np.ndarray   # (B, K)

    def single(self, i: int = 0) -> GaussianMixture2D:
        return GaussianMixture2D(
            means=self.means[i], stds=self.stds[i], corrs=self.corrs[i], weights=self.pis[i]
        )


class LstmMdlModel:
    """LSTM-with-mixture-density-head motion model.

    Weights live in an ordered name -> array dict (``params``); the order
    doubles as the checkpoint serialization order. Inference never mutates
    weights, so a model may be shared read-only across threads.
    """

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict:
        shapes = {}
        for layer in range(config.num_layers):
            in_dim = INPUT_DIM if layer == 0 else config.hidden_size
            shapes[f"lstm{layer}.w_x"] = (in_dim, 4 * config.hidden_size)
            shapes[f"lstm{layer}.w_h"] = (config.hidden_size, 4 * config.hidden_size)
            shapes[f"lstm{layer}.b"] = (4 * config.hidden_size,)
        shapes["head.w"] = (config.hidden_size, 6 * config.num_components)
        shapes["head.b"] = (6 * config.num_components,)
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, scale: float = 0.1) -> "LstmMdlModel":
        """Random initialization; forget-gate biases start at 1."""
        params = {}
        for name, shape in cls.param_shapes(config).items():
            if name.endswith(".b"):
                params[name] = np.zeros(shape)
                if name.startswith("lstm"):
                    h = config.hidden_size
                    params[name][h : 2 * h] = 1.0
            else:
                params[name] = rng.normal(0.0, scale, size=shape)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "LstmMdlModel":
        params = {name: np.zeros(shape) for name, shape in cls.param_shapes(config).items()}
        return cls(config, params)

    def clone(self) -> "LstmMdlModel":
        return LstmMdlModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_state(model: LstmMdlModel, batch_size: int = 1) -> CellState:
    """All-zero recurrent state for ``batch_size`` sequences."""
    cfg = model.config
    shape = (cfg.num_layers, batch_size, cfg.hidden_size)
    return CellState(np.zeros(shape), np.zeros(shape))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _cell_forward(w_x, w_h, b, inp, h_prev, c_prev, hidden):
    a = inp @ w_x + h_prev @ w_h + b
    i = _sigmoid(a[:, :hidden])
    f = _sigmoid(a[:, hidden : 2 * hidden])
    g = np.tanh(a[:, 2 * hidden : 3 * hidden])
    o = _sigmoid(a[:, 3 * hidden :])
    c_new = f * c_prev + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (inp, h_prev, c_prev, i, f, g, o, tc)
    return h_new, c_new, cache


def _head_raw(model: LstmMdlModel, h_top: np.ndarray) -> np.ndarray:
    k = model.config.num_components
    raw = h_top @ model.params["head.w"] + model.params["head.b"]
    if not np.all(np.isfinite(raw)):
        raise NonFiniteActivation("mixture head produced a non-finite value")
    return raw.reshape(-1, k, 6)


def _head_params(raw: np.ndarray):
    """Raw head outputs -> (pis, means, stds, corrs) plus cache pieces."""
    logits = raw[:, :, 0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    pis = ex / ex.sum(axis=1, keepdims=True)
    means = raw[:, :, 1:3]
    std_raw = np.maximum(raw[:, :, 3:5], _LOG_STD_FLOOR)
    stds = np.exp(std_raw)
    corrs = np.tanh(raw[:, :, 5])
    floor_live = raw[:, :, 3:5] > _LOG_STD_FLOOR
    return pis, means, stds, corrs, floor_live


def forward_step_batch(model: LstmMdlModel, state: CellState, positions: np.ndarray):
    """One recurrent step for a batch of positions, shape (B, 2).

    Returns the successor state and the per-sequence offset mixtures. The
    input state is left untouched.
    """
    positions = np.asarray(positions, dtype=np.float64)
    cfg = model.config
    h_out = np.empty_like(state.h)
    c_out = np.empty_like(state.c)
    inp = positions
    for layer in range(cfg.num_layers):
        h_new, c_new, _ = _cell_forward(
            model.params[f"lstm{layer}.w_x"],
            model.params[f"lstm{layer}.w_h"],
            model.params[f"lstm{layer}.b"],
            inp,
            state.h[layer],
            state.c[layer],
            cfg.hidden_size,
        )
        h_out[layer] = h_new
        c_out[layer] = c_new
        inp = h_new
    pis, means, stds, corrs, _ = _head_params(_head_raw(model, inp))
    return CellState(h_out, c_out), MixtureBatch(pis, means, stds, corrs)


def forward_step(model: LstmMdlModel, state: CellState, pos) -> tuple:
    """Single-sequence step: returns (new state, offset mixture)."""
    pos = np.asarray(pos, dtype=np.float64).reshape(1, 2)
    new_state, batch = forward_step_batch(model, state, pos)
    return new_state, batch.single(0)


def precondition(model: LstmMdlModel, obs: np.ndarray):
    """Condition the model on an observed trajectory.

    Feeds every observed position through the model in order and returns
    the final state together with the final mixture shifted into position
    space (anchored at the last observed position).
    """
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] < 1:
        raise ValueError("observation must contain at least one position")
    state = init_state(model)
    mix = None
    for t in range(obs.shape[0]):
        state, mix = forward_step(model, state, obs[t])
    return state, shift_means(mix, obs[-1])


def _step_nll(raw, target):
    """Per-sequence NLL of ``target`` offsets plus everything backward needs."""
    pis, means, stds, corrs, floor_live = _head_params(raw)
    with np.errstate(divide="ignore"):
        log_pis = np.log(pis)
    dx = target[:, None, 0] - means[:, :, 0]
    dy = target[:, None, 1] - means[:, :, 1]
    u = dx / stds[:, :, 0]
    v = dy / stds[:, :, 1]
    q = 1.0 / (1.0 - corrs**2)
    z = u * u + v * v - 2.0 * corrs * u * v
    log_phi = (
        -_LOG_2PI
        - np.log(stds[:, :, 0])
        - np.log(stds[:, :, 1])
        + 0.5 * np.log(q)
        - 0.5 * q * z
    )
    s = log_pis + log_phi
    peak = s.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(s - peak).sum(axis=1))
    live = lse > _LOG_DENSITY_FLOOR
    nll = -np.maximum(lse, _LOG_DENSITY_FLOOR)
    gamma = np.exp(s - lse[:, None])
    cache = (pis, gamma, u, v, q, z, corrs, stds, floor_live, live)
    return nll, cache


def _head_step_backward(model, grads, h_top, raw_cache, step_weight):
    """Accumulate head gradients for one time step; returns dL/dh_top.

    ``step_weight`` carries the per-sequence mask divided by the total
    offset count, so the result is the gradient of the mean NLL.
    """
    pis, gamma, u, v, q, z, corrs, stds, floor_live, live = raw_cache
    w = (step_weight * live)[:, None]
    d_logit = w * (pis - gamma)
    g = w * gamma
    inv_sx = 1.0 / stds[:, :, 0]
    inv_sy = 1.0 / stds[:, :, 1]
    d_mx = -g * q * (u - corrs * v) * inv_sx
    d_my = -g * q * (v - corrs * u) * inv_sy
    d_sx = -g * (q * u * (u - corrs * v) - 1.0) * floor_live[:, :, 0]
    d_sy = -g * (q * v * (v - corrs * u) - 1.0) * floor_live[:, :, 1]
    d_corr = -g * (q * (corrs + u * v) - corrs * q * q * z) * (1.0 - corrs**2)
    d_raw = np.stack([d_logit, d_mx, d_my, d_sx, d_sy, d_corr], axis=2)
    d_raw = d_raw.reshape(d_raw.shape[0], -1)
    grads["head.w"] += h_top.T @ d_raw
    grads["head.b"] += d_raw.sum(axis=0)
    return d_raw @ model.params["head.w"].T


def _cell_backward(w_x, w_h, grads, prefix, cache, dh, dc_in, hidden):
    inp, h_prev, c_prev, i, f, g, o, tc = cache
    dc = dc_in + dh * o * (1.0 - tc * tc)
    da = np.empty((dh.shape[0], 4 * hidden))
    da[:, :hidden] = dc * g * i * (1.0 - i)
    da[:, hidden : 2 * hidden] = dc * c_prev * f * (1.0 - f)
    da[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
    da[:, 3 * hidden :] = dh * tc * o * (1.0 - o)
    grads[prefix + ".w_x"] += inp.T @ da
    grads[prefix + ".w_h"] += h_prev.T @ da
    grads[prefix + ".b"] += da.sum(axis=0)
    d_inp = da @ w_x.T
    dh_prev = da @ w_h.T
    dc_prev = dc * f
    return d_inp, dh_prev, dc_prev


def _loss_and_grads(model, batch, mask, want_grads=True):
    """Mean NLL over the valid offsets of a padded batch, with BPTT grads.

    ``batch`` is (B, T, 2); ``mask`` is (B, T-1), true where an offset is a
    real (non-padding) training target. Padded steps run through the
    forward pass but contribute neither loss nor gradient.
    """
    cfg = model.config
    b, t_total, _ = batch.shape
    hidden = cfg.hidden_size
    # rebound per step, so caches keep references to the older arrays
    h = [np.zeros((b, hidden)) for _ in range(cfg.num_layers)]
    c = [np.zeros((b, hidden)) for _ in range(cfg.num_layers)]
    mask = mask.astype(np.float64)
    total = mask.sum()
    if total <= 0:
        raise ValueError("batch has no valid offsets")
    steps = []
    nll_sum = 0.0
    degenerate = 0
    for t in range(t_total - 1):
        inp = batch[:, t]
        layer_caches = []
        for layer in range(cfg.num_layers):
            h_new, c_new, cache = _cell_forward(
                model.params[f"lstm{layer}.w_x"],
                model.params[f"lstm{layer}.w_h"],
                model.params[f"lstm{layer}.b"],
                inp,
                h[layer],
                c[layer],
                hidden,
            )
            h[layer] = h_new
            c[layer] = c_new
            layer_caches.append(cache)
            inp = h_new
        h_top = inp
        raw = _head_raw(model, h_top)
        target = batch[:, t + 1] - batch[:, t]
        nll, head_cache = _step_nll(raw, target)
        nll_sum += float((nll * mask[:, t]).sum())
        degenerate += int(((~head_cache[-1]) & (mask[:, t] > 0)).sum())
        steps.append((layer_caches, h_top, head_cache))
    loss = nll_sum / total
    if not want_grads:
        return loss, None, degenerate

    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    dh_next = np.zeros((cfg.num_layers, b, hidden))
    dc_next = np.zeros((cfg.num_layers, b, hidden))
    for t in reversed(range(t_total - 1)):
        layer_caches, h_top, head_cache = steps[t]
        d_inject = _head_step_backward(model, grads, h_top, head_cache, mask[:, t] / total)
        for layer in reversed(range(cfg.num_layers)):
            dh = dh_next[layer] + d_inject
            d_inp, dh_prev, dc_prev = _cell_backward(
                model.params[f"lstm{layer}.w_x"],
                model.params[f"lstm{layer}.w_h"],
                grads,
                f"lstm{layer}",
                layer_caches[layer],
                dh,
                dc_next[layer],
                hidden,
            )
            dh_next[layer] = dh_prev
            dc_next[layer] = dc_prev
            d_inject = d_inp
    return loss, grads, degenerate


def _as_points(traj) -> np.ndarray:
    pts = np.asarray(getattr(traj, "points", traj), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("trajectory must be a (T, 2) array with T >= 2")
    return pts


def nll_loss(model: LstmMdlModel, traj) -> float:
    """Mean negative log-likelihood of a trajectory's offsets.

    Raises DegenerateDensity if any per-step density underflowed to zero
    (the value itself is clamped at 1e-300 before taking the log).
    """
    pts = _as_points(traj)
    mask = np.ones((1, pts.shape[0] - 1), dtype=bool)
    loss, _, degenerate = _loss_and_grads(model, pts[None], mask, want_grads=False)
    if degenerate:
        raise DegenerateDensity(f"{degenerate} step(s) underflowed to zero density")
    return loss


def backward(model: LstmMdlModel, traj) -> dict:
    """Exact gradient of :func:`nll_loss` w.r.t. every weight array."""
    pts = _as_points(traj)
    mask = np.ones((1, pts.shape[0] - 1), dtype=bool)
    _, grads, degenerate = _loss_and_grads(model, pts[None], mask)
    if degenerate:
        raise DegenerateDensity(f"{degenerate} step(s) underflowed to zero density")
    return grads


@dataclass
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 200
    grad_clip: float = 1.0
    seed: int = 0
    batch_size: int = 64
    # cosine decay settles the mixture head at the loss minimum, which is
    # what calibrates the junction branch weights
    schedule: str = "cosine"
    adam_beta1: float = field(default=0.9, repr=False)
    adam_beta2: float = field(default=0.999, repr=False)
    adam_eps: float = field(default=1e-8, repr=False)

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")

    def epoch_lr(self, epoch: int) -> float:
        if self.schedule == "constant" or self.epochs <= 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * (0.02 + 0.98 * 0.5 * (1.0 + np.cos(np.pi * frac)))


def _make_batch(trajs):
    t_max = max(p.shape[0] for p in trajs)
    batch = np.zeros((len(trajs), t_max, 2))
    mask = np.zeros((len(trajs), t_max - 1), dtype=bool)
    for i, pts in enumerate(trajs):
        batch[i, : pts.shape[0]] = pts
        # pad by repeating the last point; padded offsets stay masked out
        batch[i, pts.shape[0] :] = pts[-1]
        mask[i, : pts.shape[0] - 1] = True
    return batch, mask


def train(model: LstmMdlModel, dataset, config: TrainConfig):
    """Minibatch Adam on the mean offset NLL; returns (model, loss trace).

    The model is updated in place. Gradients are clipped per weight array
    to ``grad_clip`` in L2 norm before the update. With a fixed seed the
    whole run, including the final weight bytes, is reproducible.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    points = [_as_points(t) for t in dataset]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    adam_m = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    adam_v = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    step = 0
    trace = []
    for epoch in range(config.epochs):
        lr = config.epoch_lr(epoch)
        order = rng.permutation(len(points))
        loss_sum = 0.0
        weight_sum = 0.0
        for start in range(0, len(points), config.batch_size):
            chosen = [points[j] for j in order[start : start + config.batch_size]]
            batch, mask = _make_batch(chosen)
            loss, grads, _ = _loss_and_grads(model, batch, mask)
            if not np.isfinite(loss):
                raise DivergedTraining(f"loss became {loss} at step {step}")
            n_offsets = int(mask.sum())
            loss_sum += loss * n_offsets
            weight_sum += n_offsets
            step += 1
            for name, g in grads.items():
                if config.grad_clip and config.grad_clip > 0:
                    norm = float(np.sqrt((g * g).sum()))
                    if norm > config.grad_clip:
                        g = g * (config.grad_clip / norm)
                adam_m[name] = config.adam_beta1 * adam_m[name] + (1 - config.adam_beta1) * g
                adam_v[name] = config.adam_beta2 * adam_v[name] + (1 - config.adam_beta2) * g * g
                m_hat = adam_m[name] / (1 - config.adam_beta1**step)
                v_hat = adam_v[name] / (1 - config.adam_beta2**step)
                model.params[name] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        trace.append(loss_sum / weight_sum)
    return model, trace


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, cell type, config, then raw float64
# little-endian weight arrays in declared order.
# ---------------------------------------------------------------------------


def save_checkpoint(model: LstmMdlModel, path):
    cfg = model.config
    header = _MAGIC + struct.pack(
        "<5I", _FORMAT_VERSION, _CELL_TYPE_LSTM, cfg.num_components, cfg.hidden_size, cfg.num_layers
    )
    blobs = [np.ascontiguousarray(model.params[name], dtype="<f8").tobytes()
             for name in LstmMdlModel.param_shapes(cfg)]
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> LstmMdlModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(_MAGIC) + 20 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    version, cell_type, k, hidden, layers = struct.unpack_from("<5I", data, len(_MAGIC))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if cell_type != _CELL_TYPE_LSTM:
        raise CheckpointError(f"unsupported cell type {cell_type}")
    config = ModelConfig(num_components=k, hidden_size=hidden, num_layers=layers)
    offset = len(_MAGIC) + 20
    params = {}
    for name, shape in LstmMdlModel.param_shapes(config).items():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise CheckpointError("checkpoint truncated")
        params[name] = np.frombuffer(data[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(data):
        raise CheckpointError("trailing bytes after weight arrays")
    return LstmMdlModel(config, params)
