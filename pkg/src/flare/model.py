"""FLARe forecaster and the RNN-Concat baseline, with hand-written BPTT.

Both models encode each visit with three modality MLPs and run a recurrent
cell over the encoded window. FLARe then keeps going past the last visit: a
feature-prediction MLP (``rho``) maps the hidden state to the next visit's
latent, which is fed back into the cell for ``tau`` steps before the final
hidden state is classified. ``rho`` also fills in latents for missing visits
inside the window. The baseline instead appends the horizon to the last hidden
state and classifies that.

All forward functions run on a :class:`Batch` of samples that share the same
window length ``T``; a single window is just a batch of one. Horizons and
missingness masks may differ between rows.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .numeric import (
    DTYPE,
    ContractError,
    LinearTrace,
    LossWeights,
    ParamBlock,
    ShapeError,
    activation,
    activation_backward,
    linear_backward,
    linear_forward,
    sigmoid,
    weighted_cross_entropy,
)

CLASSES = ("CN", "MCI", "AD")
MODALITIES = ("volumetric", "demographic", "cognitive")
_ENC_PREFIX = {"volumetric": "enc_i", "demographic": "enc_s", "cognitive": "enc_c"}


class ImputationAnchorError(ContractError):
    """The first visit of a window is unobserved, so nothing can anchor imputation."""


class UnsupportedInputError(ValueError):
    """The baseline was handed a window with missing visits."""


class StaleTraceError(RuntimeError):
    """A trace is being backpropagated after the parameters changed."""


@dataclass
class ModelConfig:
    dim_volumetric: int = 32
    dim_demographic: int = 3
    dim_cognitive: int = 4
    # hidden layer sizes of the three encoders, in (volumetric, demographic, cognitive) order
    enc_hidden_sizes: tuple = ((32, 16), (8, 8), (8, 8))
    enc_out: tuple = (8, 4, 4)
    rnn_hidden: int = 32
    rho_hidden_sizes: tuple = (32,)
    classifier_hidden_sizes: tuple = (32,)
    num_classes: int = 3
    loss: LossWeights = field(default_factory=LossWeights)
    max_T: int = 4
    max_sum_T_tau: int = 5
    activation: str = "relu"
    cell: str = "gru"
    tau_encoding: str = "scalar"

    def __post_init__(self):
        self.enc_hidden_sizes = tuple(tuple(int(n) for n in h) for h in self.enc_hidden_sizes)
        self.enc_out = tuple(int(n) for n in self.enc_out)
        self.rho_hidden_sizes = tuple(int(n) for n in self.rho_hidden_sizes)
        self.classifier_hidden_sizes = tuple(int(n) for n in self.classifier_hidden_sizes)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(tuple(self.loss.get("class_weights", (1.0, 1.3, 2.0))), float(self.loss.get("alpha", 1.0)))
        self.validate()

    def validate(self) -> None:
        if self.num_classes != 3:
            raise ValueError("num_classes must be 3 (CN, MCI, AD)")
        if len(self.enc_hidden_sizes) != 3 or len(self.enc_out) != 3:
            raise ValueError("enc_hidden_sizes and enc_out need one entry per modality")
        dims = (self.dim_volumetric, self.dim_demographic, self.dim_cognitive, self.rnn_hidden, *self.enc_out)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be positive, got {dims}")
        if self.activation not in ("relu", "tanh", "sigmoid"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.cell not in ("gru", "tanh"):
            raise ValueError(f"cell must be 'gru' or 'tanh', got {self.cell!r}")
        if self.tau_encoding not in ("scalar", "onehot"):
            raise ValueError(f"tau_encoding must be 'scalar' or 'onehot', got {self.tau_encoding!r}")
        if not 2 <= self.max_T < self.max_sum_T_tau:
            raise ValueError(f"need 2 <= max_T < max_sum_T_tau, got {self.max_T}, {self.max_sum_T_tau}")

    @property
    def d_f(self) -> int:
        return sum(self.enc_out)

    @property
    def max_tau(self) -> int:
        return self.max_sum_T_tau - 2

    @property
    def input_dims(self) -> tuple[int, int, int]:
        return (self.dim_volumetric, self.dim_demographic, self.dim_cognitive)

    @property
    def tau_features(self) -> int:
        return 1 if self.tau_encoding == "scalar" else self.max_tau

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = {"class_weights": list(self.loss.class_weights), "alpha": self.loss.alpha}
        for k in ("enc_hidden_sizes",):
            d[k] = [list(h) for h in d[k]]
        for k in ("enc_out", "rho_hidden_sizes", "classifier_hidden_sizes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class VisitInput:
    volumetric: np.ndarray | None = None
    demographic: np.ndarray | None = None
    cognitive: np.ndarray | None = None
    observed: bool = True

    @classmethod
    def missing(cls) -> "VisitInput":
        return cls(observed=False)


@dataclass
class Batch:
    """Window features laid out as ``(B, T, dim)``; unobserved cells are never read."""

    volumetric: np.ndarray
    demographic: np.ndarray
    cognitive: np.ndarray
    observed: np.ndarray
    tau: np.ndarray
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.observed.shape[0]

    @property
    def T(self) -> int:
        return self.observed.shape[1]

    def modality(self, i: int) -> np.ndarray:
        return (self.volumetric, self.demographic, self.cognitive)[i]


def make_batch(windows: Sequence[Sequence[VisitInput]], taus, config: ModelConfig, labels=None) -> Batch:
    if not windows:
        raise ContractError("empty batch")
    T = len(windows[0])
    if any(len(w) != T for w in windows):
        raise ShapeError("all windows in a batch must have the same length T")
    B = len(windows)
    arrays = [np.zeros((B, T, d), dtype=DTYPE) for d in config.input_dims]
    observed = np.zeros((B, T), dtype=bool)
    for b, window in enumerate(windows):
        for t, visit in enumerate(window):
            if not visit.observed:
                continue
            observed[b, t] = True
            for i, name in enumerate(MODALITIES):
                vec = np.asarray(getattr(visit, name), dtype=DTYPE)
                if vec.shape != (config.input_dims[i],):
                    raise ShapeError(f"{name} vector has shape {vec.shape}, expected ({config.input_dims[i]},)")
                arrays[i][b, t] = vec
    tau = np.broadcast_to(np.asarray(taus, dtype=np.int64), (B,)).copy()
    if labels is not None:
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,)).copy()
    return Batch(*arrays, observed=observed, tau=tau, labels=labels)


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

class ModelParams:
    """Named parameter blocks for one model plus a version counter for staleness checks."""

    def __init__(self, config: ModelConfig, kind: str, blocks: dict[str, ParamBlock]):
        if kind not in ("flare", "concat"):
            raise ValueError(f"model kind must be 'flare' or 'concat', got {kind!r}")
        self.config = config
        self.kind = kind
        self.blocks = blocks
        self.version = 0
        self.step = 0

    def __getitem__(self, name: str) -> ParamBlock:
        return self.blocks[name]

    def __iter__(self):
        return iter(self.blocks.values())

    def __len__(self) -> int:
        return len(self.blocks)

    def names(self) -> list[str]:
        return list(self.blocks)

    def zero_grads(self) -> None:
        for p in self.blocks.values():
            p.grad.fill(0.0)

    def mark_updated(self) -> None:
        self.version += 1

    def copy(self) -> "ModelParams":
        blocks = {}
        for name, p in self.blocks.items():
            q = ParamBlock(name, p.value.copy())
            q.grad[...] = p.grad
            q.adam_m[...] = p.adam_m
            q.adam_v[...] = p.adam_v
            blocks[name] = q
        out = ModelParams(self.config, self.kind, blocks)
        out.step = self.step
        return out

    def num_values(self) -> int:
        return sum(p.value.size for p in self.blocks.values())


def _mlp_sizes(n_in: int, hidden: Sequence[int], n_out: int) -> list[tuple[int, int]]:
    sizes = [n_in, *hidden, n_out]
    return list(zip(sizes[:-1], sizes[1:]))


def _layer_plan(config: ModelConfig, kind: str) -> list[tuple[str, int, int]]:
    """(name, fan_out, fan_in) for every weight matrix, in a fixed order."""
    plan = []
    for i, mod in enumerate(MODALITIES):
        for j, (a, b) in enumerate(_mlp_sizes(config.input_dims[i], config.enc_hidden_sizes[i], config.enc_out[i])):
            plan.append((f"{_ENC_PREFIX[mod]}.{j}", b, a))
    D, H = config.d_f, config.rnn_hidden
    gates = ("z", "r", "n") if config.cell == "gru" else ("",)
    for g in gates:
        plan.append((f"rnn.W{g}", H, D))
        plan.append((f"rnn.U{g}", H, H))
    if kind == "flare":
        for j, (a, b) in enumerate(_mlp_sizes(H, config.rho_hidden_sizes, D)):
            plan.append((f"rho.{j}", b, a))
        clf_in = H
    else:
        clf_in = H + config.tau_features
    for j, (a, b) in enumerate(_mlp_sizes(clf_in, config.classifier_hidden_sizes, config.num_classes)):
        plan.append((f"clf.{j}", b, a))
    return plan


def init_params(config: ModelConfig, kind: str = "flare", rng: np.random.Generator | int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    blocks: dict[str, ParamBlock] = {}
    for name, fan_out, fan_in in _layer_plan(config, kind):
        bound = np.sqrt(1.0 / fan_in)
        if name.startswith("rnn."):
            # recurrent blocks: W*/U* weights, one bias per gate, fan_in of the bias is the input side
            blocks[name] = ParamBlock(name, rng.uniform(-bound, bound, (fan_out, fan_in)))
            if name.startswith("rnn.U"):
                bname = "rnn.b" + name[len("rnn.U"):]
                blocks[bname] = ParamBlock(bname, rng.uniform(-bound, bound, fan_out))
            continue
        blocks[name + ".W"] = ParamBlock(name + ".W", rng.uniform(-bound, bound, (fan_out, fan_in)))
        blocks[name + ".b"] = ParamBlock(name + ".b", rng.uniform(-bound, bound, fan_out))
    return ModelParams(config, kind, blocks)


def _n_layers(params: ModelParams, prefix: str) -> int:
    n = 0
    while f"{prefix}.{n}.W" in params.blocks:
        n += 1
    return n


# --------------------------------------------------------------------------
# MLP and recurrent cell
# --------------------------------------------------------------------------

def mlp_forward(x, params: ModelParams, prefix: str):
    """Hidden layers use the configured activation; the output layer is linear."""
    kind = params.config.activation
    n = _n_layers(params, prefix)
    cache = []
    for j in range(n):
        W = params[f"{prefix}.{j}.W"].value
        pre = linear_forward(x, W, params[f"{prefix}.{j}.b"].value)
        lt = LinearTrace(x, W)
        if j < n - 1:
            x = activation(pre, kind)
            cache.append((lt, pre, x))
        else:
            x = pre
            cache.append((lt, None, None))
    return x, cache


def mlp_backward(dout, cache, params: ModelParams, prefix: str):
    kind = params.config.activation
    g = dout
    for j in range(len(cache) - 1, -1, -1):
        lt, pre, post = cache[j]
        if pre is not None:
            g = activation_backward(pre, kind, g, out=post)
        g, dW, db = linear_backward(lt, g)
        params[f"{prefix}.{j}.W"].grad += dW
        params[f"{prefix}.{j}.b"].grad += db
    return g


def encode_visit(x, params: ModelParams):
    """Latent for observed visit(s): concatenated volumetric, demographic and cognitive encodings.

    ``x`` is a :class:`VisitInput` or a tuple of three arrays (one per modality,
    rows are samples).
    """
    f, _ = _encode(x, params)
    return f


def _encode(x, params: ModelParams):
    if isinstance(x, VisitInput):
        if not x.observed:
            raise ContractError("cannot encode an unobserved visit; impute it instead")
        x = tuple(np.asarray(getattr(x, m), dtype=DTYPE) for m in MODALITIES)
    parts, caches = [], []
    for i, mod in enumerate(MODALITIES):
        if x[i].shape[-1] != params.config.input_dims[i]:
            raise ShapeError(f"{mod} input has {x[i].shape[-1]} features, expected {params.config.input_dims[i]}")
        out, c = mlp_forward(x[i], params, _ENC_PREFIX[mod])
        parts.append(out)
        caches.append(c)
    return np.concatenate(parts, axis=-1), caches


def _encode_backward(df, caches, params: ModelParams) -> None:
    start = 0
    for i, mod in enumerate(MODALITIES):
        stop = start + params.config.enc_out[i]
        mlp_backward(df[..., start:stop], caches[i], params, _ENC_PREFIX[mod])
        start = stop


def rnn_step(f, h_prev, params: ModelParams):
    h, _ = _rnn_step(f, h_prev, params)
    return h


def _rnn_step(f, h_prev, params: ModelParams):
    cfg = params.config
    f = np.asarray(f, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    if f.shape[-1] != cfg.d_f:
        raise ShapeError(f"latent has {f.shape[-1]} entries, cell expects {cfg.d_f}")
    if h_prev.shape[-1] != cfg.rnn_hidden:
        raise ShapeError(f"hidden state has {h_prev.shape[-1]} entries, cell expects {cfg.rnn_hidden}")
    p = params.blocks
    if cfg.cell == "tanh":
        a = f @ p["rnn.W"].value.T + h_prev @ p["rnn.U"].value.T + p["rnn.b"].value
        h = np.tanh(a)
        return h, (f, h_prev, h)
    z = sigmoid(f @ p["rnn.Wz"].value.T + h_prev @ p["rnn.Uz"].value.T + p["rnn.bz"].value)
    r = sigmoid(f @ p["rnn.Wr"].value.T + h_prev @ p["rnn.Ur"].value.T + p["rnn.br"].value)
    u = h_prev @ p["rnn.Un"].value.T
    n = np.tanh(f @ p["rnn.Wn"].value.T + p["rnn.bn"].value + r * u)
    h = (1.0 - z) * h_prev + z * n
    return h, (f, h_prev, z, r, u, n)


def _sum_rows(g):
    return g.sum(axis=0) if g.ndim == 2 else g


def _outer(g, x):
    return g.T @ x if g.ndim == 2 else np.outer(g, x)


def _rnn_step_backward(dh, cache, params: ModelParams):
    p = params.blocks
    if params.config.cell == "tanh":
        f, h_prev, h = cache
        da = dh * (1.0 - h * h)
        p["rnn.W"].grad += _outer(da, f)
        p["rnn.U"].grad += _outer(da, h_prev)
        p["rnn.b"].grad += _sum_rows(da)
        return da @ p["rnn.W"].value, da @ p["rnn.U"].value
    f, h_prev, z, r, u, n = cache
    dz = dh * (n - h_prev)
    dn = dh * z
    dh_prev = dh * (1.0 - z)
    dan = dn * (1.0 - n * n)
    du = dan * r
    dr = dan * u
    dar = dr * r * (1.0 - r)
    daz = dz * z * (1.0 - z)
    p["rnn.Wn"].grad += _outer(dan, f)
    p["rnn.bn"].grad += _sum_rows(dan)
    p["rnn.Un"].grad += _outer(du, h_prev)
    p["rnn.Wr"].grad += _outer(dar, f)
    p["rnn.Ur"].grad += _outer(dar, h_prev)
    p["rnn.br"].grad += _sum_rows(dar)
    p["rnn.Wz"].grad += _outer(daz, f)
    p["rnn.Uz"].grad += _outer(daz, h_prev)
    p["rnn.bz"].grad += _sum_rows(daz)
    df = dan @ p["rnn.Wn"].value + dar @ p["rnn.Wr"].value + daz @ p["rnn.Wz"].value
    dh_prev = dh_prev + du @ p["rnn.Un"].value + dar @ p["rnn.Ur"].value + daz @ p["rnn.Uz"].value
    return df, dh_prev


def predict_next_feature(h, params: ModelParams):
    """rho: hidden state -> predicted next-visit latent."""
    if params.kind != "flare":
        raise ContractError("the baseline has no feature-prediction network")
    h = np.asarray(h, dtype=DTYPE)
    if h.shape[-1] != params.config.rnn_hidden:
        raise ShapeError(f"hidden state has {h.shape[-1]} entries, expected {params.config.rnn_hidden}")
    out, _ = mlp_forward(h, params, "rho")
    return out


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------

@dataclass
class _WindowStep:
    obs_rows: np.ndarray
    mis_rows: np.ndarray
    enc_cache: list | None
    rho_rows: np.ndarray | None = None
    rho_out: np.ndarray | None = None
    rho_cache: list | None = None
    teacher_rows: np.ndarray | None = None  # rows (subset of obs_rows) whose aux term is scored
    rnn_cache: tuple | None = None


@dataclass
class RolloutTrace:
    """Everything one forward pass produced, kept for backprop and inspection.

    Per-step lists hold ``(B, dim)`` arrays, except the rollout lists, which hold
    only the rows still rolling at that step (see ``rollout_rows``).
    """

    kind: str
    version: int
    batch_size: int
    T: int
    tau: np.ndarray
    f: list = field(default_factory=list)
    h: list = field(default_factory=list)
    imputed: np.ndarray | None = None
    f_hat: list = field(default_factory=list)
    h_hat: list = field(default_factory=list)
    rollout_rows: list = field(default_factory=list)
    logits: np.ndarray | None = None
    clf_input: np.ndarray | None = None
    n_rnn_steps: np.ndarray | None = None
    n_rho_rollout: np.ndarray | None = None
    n_rho_imputed: np.ndarray | None = None
    n_rho_teacher: np.ndarray | None = None
    teacher: bool = False
    calls: Counter = field(default_factory=Counter)
    _steps: list = field(default_factory=list, repr=False)
    _rollout_caches: list = field(default_factory=list, repr=False)
    _clf_cache: list | None = field(default=None, repr=False)

    def provenance(self, row: int = 0) -> list[str]:
        out = ["imputed" if self.imputed[row, t] else "encoded" for t in range(self.T)]
        return out + ["rolled_out"] * int(self.tau[row])

    @property
    def classified_hidden(self) -> np.ndarray:
        return self.clf_input[:, : self.h[0].shape[1]] if self.kind == "concat" else self.clf_input

    @property
    def predicted_class(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


def _as_batch(window, tau, params: ModelParams) -> Batch:
    if isinstance(window, Batch):
        return window
    return make_batch([window], [tau], params.config)


def _check_batch(batch: Batch, params: ModelParams) -> None:
    if batch.T < 1:
        raise ContractError("window must contain at least one visit")
    if np.any(batch.tau < 1):
        raise ContractError(f"horizon tau must be >= 1, got {batch.tau.min()}")


def _run_window(batch: Batch, params: ModelParams, trace: RolloutTrace, teacher: bool):
    B, T = batch.size, batch.T
    H = params.config.rnn_hidden
    h = np.zeros((B, H), dtype=DTYPE)
    trace.imputed = ~batch.observed
    trace.n_rho_imputed = np.zeros(B, dtype=np.int64)
    trace.n_rho_teacher = np.zeros(B, dtype=np.int64)
    all_rows = np.arange(B)
    for t in range(T):
        obs = batch.observed[:, t]
        obs_rows, mis_rows = all_rows[obs], all_rows[~obs]
        step = _WindowStep(obs_rows, mis_rows, None)
        f = np.empty((B, params.config.d_f), dtype=DTYPE)
        if len(obs_rows):
            x = tuple(batch.modality(i)[obs_rows, t] for i in range(3))
            enc, step.enc_cache = _encode(x, params)
            f[obs_rows] = enc
        if t > 0 and (len(mis_rows) or teacher):
            rho_rows = all_rows if teacher else mis_rows
            step.rho_rows = rho_rows
            step.rho_out, step.rho_cache = mlp_forward(h[rho_rows], params, "rho")
            trace.calls["rho"] += 1
            pos = np.searchsorted(rho_rows, mis_rows)
            f[mis_rows] = step.rho_out[pos]
            trace.n_rho_imputed[mis_rows] += 1
            if teacher:
                step.teacher_rows = obs_rows
                trace.n_rho_teacher[obs_rows] += 1
        h, step.rnn_cache = _rnn_step(f, h, params)
        trace.calls["rnn_step"] += 1
        trace.f.append(f)
        trace.h.append(h)
        trace._steps.append(step)
    return h


def forward_flare(window, tau=None, params: ModelParams | None = None, teacher: bool = True) -> RolloutTrace:
    """Encode/impute the window, roll the latent forward ``tau`` steps, classify.

    ``window`` is a list of :class:`VisitInput` (with scalar ``tau``) or a
    :class:`Batch`. With ``teacher`` set, rho is also evaluated at every
    observed in-window visit after the first so the auxiliary loss can be scored.
    """
    batch = _as_batch(window, tau, params)
    if params.kind != "flare":
        raise ContractError("forward_flare needs FLARe parameters")
    _check_batch(batch, params)
    if not batch.observed[:, 0].all():
        raise ImputationAnchorError("the first visit of every window must be observed")
    B = batch.size
    trace = RolloutTrace("flare", params.version, B, batch.T, batch.tau.copy(), teacher=teacher)
    h = _run_window(batch, params, trace, teacher=teacher)
    trace.n_rnn_steps = np.full(B, batch.T, dtype=np.int64)
    trace.n_rho_rollout = np.zeros(B, dtype=np.int64)
    all_rows = np.arange(B)
    for k in range(1, int(batch.tau.max()) + 1):
        rows = all_rows[batch.tau >= k]
        f_hat, rho_cache = mlp_forward(h[rows], params, "rho")
        h_new, rnn_cache = _rnn_step(f_hat, h[rows], params)
        trace.calls["rho"] += 1
        trace.calls["rnn_step"] += 1
        trace.n_rho_rollout[rows] += 1
        trace.n_rnn_steps[rows] += 1
        h = h.copy()
        h[rows] = h_new
        trace.rollout_rows.append(rows)
        trace.f_hat.append(f_hat)
        trace.h_hat.append(h_new)
        trace._rollout_caches.append((rho_cache, rnn_cache))
    trace.clf_input = h
    trace.logits, trace._clf_cache = mlp_forward(h, params, "clf")
    return trace


def tau_features(tau, config: ModelConfig) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.int64)
    if config.tau_encoding == "scalar":
        return tau.astype(DTYPE)[:, None]
    out = np.zeros((len(tau), config.max_tau), dtype=DTYPE)
    if np.any(tau > config.max_tau):
        raise ContractError(f"tau {tau.max()} exceeds one-hot width {config.max_tau}")
    out[np.arange(len(tau)), tau - 1] = 1.0
    return out


def forward_baseline(window, tau=None, params: ModelParams | None = None) -> RolloutTrace:
    """RNN-Concat: encode and run the cell over observed visits, append tau, classify."""
    batch = _as_batch(window, tau, params)
    if params.kind != "concat":
        raise ContractError("forward_baseline needs baseline parameters")
    _check_batch(batch, params)
    if not batch.observed.all():
        raise UnsupportedInputError("the baseline has no imputation path; window contains missing visits")
    B = batch.size
    trace = RolloutTrace("concat", params.version, B, batch.T, batch.tau.copy())
    h = _run_window(batch, params, trace, teacher=False)
    trace.n_rnn_steps = np.full(B, batch.T, dtype=np.int64)
    trace.n_rho_rollout = np.zeros(B, dtype=np.int64)
    trace.clf_input = np.concatenate([h, tau_features(batch.tau, params.config)], axis=1)
    trace.logits, trace._clf_cache = mlp_forward(trace.clf_input, params, "clf")
    return trace


def forward(batch, params: ModelParams, teacher: bool = True) -> RolloutTrace:
    if params.kind == "flare":
        return forward_flare(batch, params=params, teacher=teacher)
    return forward_baseline(batch, params=params)


# --------------------------------------------------------------------------
# Loss and backward
# --------------------------------------------------------------------------

@dataclass
class LossTerms:
    """Scalar loss pieces plus what ``backward`` needs to propagate them."""

    total: float
    cel: float
    aux: float
    alpha: float
    dlogits: np.ndarray
    per_sample: np.ndarray | None = None


def loss_flare(trace: RolloutTrace, labels, loss: LossWeights) -> LossTerms:
    """Weighted CE on the forecast plus alpha times the in-window next-latent MSE.

    The aux term covers every teacher-forced transition t -> t+1 whose target
    visit is observed; its targets are the encodings stored in the trace.
    Losses are summed over the batch.
    """
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (trace.batch_size,))
    cel, dlogits = weighted_cross_entropy(trace.logits, labels, loss.class_weights)
    logp = trace.logits - trace.logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    per = -np.asarray(loss.class_weights)[labels] * logp[np.arange(len(labels)), labels]
    aux = 0.0
    if loss.alpha > 0 and not trace.teacher:
        raise ContractError("aux loss needs a trace produced with teacher=True")
    if trace.teacher:
        for t, step in enumerate(trace._steps):
            if step.teacher_rows is None or not len(step.teacher_rows):
                continue
            pred = step.rho_out[np.searchsorted(step.rho_rows, step.teacher_rows)]
            target = trace.f[t][step.teacher_rows]
            diff = pred - target
            row_loss = (diff * diff).mean(axis=1)
            aux += float(row_loss.sum())
            per[step.teacher_rows] += loss.alpha * row_loss
    return LossTerms(cel + loss.alpha * aux, cel, aux, float(loss.alpha), dlogits, per)


def loss_baseline(trace: RolloutTrace, labels, loss: LossWeights) -> LossTerms:
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (trace.batch_size,))
    cel, dlogits = weighted_cross_entropy(trace.logits, labels, loss.class_weights)
    return LossTerms(cel, cel, 0.0, 0.0, dlogits)


def compute_loss(trace: RolloutTrace, labels, loss: LossWeights) -> LossTerms:
    return loss_flare(trace, labels, loss) if trace.kind == "flare" else loss_baseline(trace, labels, loss)


def backward(trace: RolloutTrace, terms: LossTerms, params: ModelParams) -> None:
    """Accumulate d(total)/d(param) into every block's ``grad`` (adds, never overwrites)."""
    if trace.version != params.version:
        raise StaleTraceError(
            f"trace was built at parameter version {trace.version}, parameters are now at {params.version}"
        )
    if trace.kind != params.kind:
        raise ContractError(f"{trace.kind} trace cannot be backpropagated into {params.kind} parameters")
    H = params.config.rnn_hidden
    dclf = mlp_backward(terms.dlogits, trace._clf_cache, params, "clf")
    dh = np.array(dclf[:, :H])
    if trace.kind == "flare":
        for k in range(len(trace.rollout_rows) - 1, -1, -1):
            rows = trace.rollout_rows[k]
            rho_cache, rnn_cache = trace._rollout_caches[k]
            df_hat, dh_rows = _rnn_step_backward(dh[rows], rnn_cache, params)
            dh_rows = dh_rows + mlp_backward(df_hat, rho_cache, params, "rho")
            dh[rows] = dh_rows
    alpha = terms.alpha
    for t in range(trace.T - 1, -1, -1):
        step = trace._steps[t]
        df, dh = _rnn_step_backward(dh, step.rnn_cache, params)
        d_rho = None
        if step.rho_rows is not None:
            d_rho = np.zeros_like(step.rho_out)
            if len(step.mis_rows):
                d_rho[np.searchsorted(step.rho_rows, step.mis_rows)] += df[step.mis_rows]
        d_enc = df[step.obs_rows]
        if alpha > 0 and step.teacher_rows is not None and len(step.teacher_rows):
            pos = np.searchsorted(step.rho_rows, step.teacher_rows)
            diff = step.rho_out[pos] - trace.f[t][step.teacher_rows]
            g = alpha * 2.0 * diff / diff.shape[1]
            d_rho[pos] += g
            # teacher rows are exactly the observed rows at this step
            d_enc = d_enc - g
        if len(step.obs_rows):
            _encode_backward(d_enc, step.enc_cache, params)
        if d_rho is not None:
            dh_part = mlp_backward(d_rho, step.rho_cache, params, "rho")
            dh[step.rho_rows] += dh_part


def loss_and_grad(batch: Batch, params: ModelParams, labels=None) -> LossTerms:
    labels = batch.labels if labels is None else labels
    lw = params.config.loss
    trace = forward(batch, params, teacher=lw.alpha > 0)
    terms = compute_loss(trace, labels, lw)
    backward(trace, terms, params)
    return terms


def predict(batch: Batch, params: ModelParams) -> np.ndarray:
    """Predicted class per row (no teacher evaluations)."""
    return forward(batch, params, teacher=False).predicted_class
