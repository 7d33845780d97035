"""Networks: the conditional denoiser, the adversarial discriminator, and a
frozen random feature net used as the perceptual-distance proxy.

All parameters live as plain float64 arrays in an ordered name -> array dict.
For a differentiable pass the caller lifts them onto a tape with ``lift`` and
passes the lifted mapping to ``forward``; without it the same code runs on
constants.
"""

from __future__ import annotations

import numpy as np

from trajdiff import autodiff as ad
from trajdiff.autodiff import Tape, Tensor

PREDICTION_MODES = ("epsilon", "x0", "direct-next")
SHARING_MODES = ("shared", "per-step")

NULL_LABEL = -1


def time_embed(t: int, dim: int, T: int = 1000) -> np.ndarray:
    """Sinusoidal step embedding: per frequency i the pair
    (sin(t / 10000^(2i/dim)), cos(t / 10000^(2i/dim))), i = 0..dim/2 - 1.

    t = 0 is allowed as a probe value; ordinary steps are 1..T.
    """
    if dim % 2 != 0 or dim <= 0:
        raise ValueError(f"embedding dim must be a positive even integer, got {dim}")
    t = int(t)
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 10000.0 ** (2.0 * i / dim)
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(t / freq)
    out[1::2] = np.cos(t / freq)
    return out


class CondEmbedding:
    """Frozen class-label lookup table with one reserved null-label row.

    Row k is the embedding of label k; ``NULL_LABEL`` (or None) selects the
    reserved last row used for unconditional passes. Rows are seeded random
    and never trained.
    """

    def __init__(self, n_classes: int, dim: int = 16, seed: int = 0):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = int(n_classes)
        self.dim = int(dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.table = rng.normal(size=(self.n_classes + 1, self.dim))
        self.table.setflags(write=False)

    def _row_index(self, label) -> int:
        if label is None or label == NULL_LABEL:
            return self.n_classes
        k = int(label)
        if not 0 <= k < self.n_classes:
            raise ValueError(f"label {k} outside [0, {self.n_classes})")
        return k

    def row(self, label) -> np.ndarray:
        return self.table[self._row_index(label)]

    def rows(self, labels) -> np.ndarray:
        idx = np.array([self._row_index(l) for l in np.asarray(labels).reshape(-1)])
        return self.table[idx]


# ---------------------------------------------------------------------------
# shared MLP plumbing


def _init_layers(sizes, seed, var_scale):
    """Fan-in scaled Gaussian weights, zero biases. ``var_scale`` is the
    numerator of the weight variance (1 for tanh stacks, 2 for relu-family)."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(size=(fan_in, fan_out)) * np.sqrt(var_scale / fan_in)
        params[f"L{i}.W"] = w
        params[f"L{i}.b"] = np.zeros(fan_out)
    return params


def _mlp_forward(params, prefix, n_layers, x, activation):
    """x: Tensor (n, in) or (in,). Hidden layers use ``activation``;
    the last layer is linear."""
    act = {"tanh": ad.tanh, "leaky_relu": lambda v: ad.leaky_relu(v, 0.01)}[activation]
    h = x
    for i in range(n_layers):
        w = params[f"{prefix}L{i}.W"]
        b = params[f"{prefix}L{i}.b"]
        h = ad.add(ad.matmul(h, w), b)
        if i < n_layers - 1:
            h = act(h)
    return h


def _count(params) -> int:
    return sum(v.size for v in params.values())


def _state_of(params) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in params.items()}


def _params_from_state(state) -> dict:
    out = {}
    for k, rec in state.items():
        out[k] = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
    return out


class _Net:
    """Base for parameterized nets: lift/assign/count/state plumbing."""

    params: dict

    def lift(self, tape: Tape) -> dict:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def assign(self, new_params: dict) -> None:
        for k, v in new_params.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if np.shape(v) != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k!r}")
            self.params[k] = np.asarray(v, dtype=np.float64)

    @property
    def n_params(self) -> int:
        return _count(self.params)


class Denoiser(_Net):
    """Conditional MLP denoiser. Input is concat(z, time embedding, condition
    embedding); output has the data dimension and is read per
    ``prediction_mode``: predicted noise (epsilon), predicted clean sample
    (x0), or the next latent itself (direct-next).

    ``sharing_mode='per-step'`` keeps an independent parameter set for each
    position of ``step_list`` instead of one shared set.
    """

    def __init__(self, data_dim: int, T: int = 1000, hidden=(128, 128, 128),
                 time_dim: int = 16, cond_dim: int = 16,
                 prediction_mode: str = "direct-next",
                 sharing_mode: str = "shared", step_list=None, seed: int = 0):
        if prediction_mode not in PREDICTION_MODES:
            raise ValueError(f"prediction_mode must be one of {PREDICTION_MODES}")
        if sharing_mode not in SHARING_MODES:
            raise ValueError(f"sharing_mode must be one of {SHARING_MODES}")
        self.data_dim = int(data_dim)
        self.T = int(T)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.cond_dim = int(cond_dim)
        self.prediction_mode = prediction_mode
        self.sharing_mode = sharing_mode
        self.seed = int(seed)
        if sharing_mode == "per-step":
            if not step_list:
                raise ValueError("per-step sharing needs a step_list")
            self.step_list = tuple(int(t) for t in step_list)
        else:
            self.step_list = tuple(int(t) for t in step_list) if step_list else None

        sizes = (self.data_dim + self.time_dim + self.cond_dim,
                 *self.hidden, self.data_dim)
        self._n_layers = len(sizes) - 1
        self.params = {}
        if sharing_mode == "shared":
            self.params = _init_layers(sizes, seed, 1.0)
        else:
            for j in range(len(self.step_list)):
                for k, v in _init_layers(sizes, seed + j, 1.0).items():
                    self.params[f"s{j}.{k}"] = v

    def _prefix_for(self, t: int) -> str:
        if self.sharing_mode == "shared":
            return ""
        if t not in self.step_list:
            raise ValueError(f"step {t} not in the per-step step_list {self.step_list}")
        return f"s{self.step_list.index(t)}."

    def forward(self, z, t, e_c, tape: Tape | None = None,
                params: dict | None = None) -> Tensor:
        """Run the denoiser; ``params`` may be a lifted (on-tape) mapping.

        ``t`` is a single step for the whole batch, or (in shared mode) an
        array with one step per row.
        """
        p = params if params is not None else self.params
        zt = ad.as_tensor(z)
        if zt.shape[-1] != self.data_dim:
            raise ValueError(f"z last dim {zt.shape[-1]} != data dim {self.data_dim}")
        per_row_t = np.ndim(t) >= 1
        if per_row_t:
            if self.sharing_mode != "shared":
                raise ValueError("per-row steps need shared parameters")
            if zt.data.ndim != 2 or len(t) != zt.shape[0]:
                raise ValueError("per-row steps must match the batch size")
            temb = np.stack([time_embed(int(ti), self.time_dim, self.T)
                             for ti in np.asarray(t).reshape(-1)])
            prefix = ""
        else:
            t = int(t)
            if not 1 <= t <= self.T:
                raise ValueError(f"step {t} outside [1, {self.T}]")
            temb = time_embed(t, self.time_dim, self.T)
            prefix = self._prefix_for(t)
        ec = np.zeros(0) if e_c is None else np.asarray(e_c, dtype=np.float64)
        if ec.shape[-1] != self.cond_dim:
            raise ValueError(f"e_c last dim {ec.shape[-1]} != cond dim {self.cond_dim}")
        if zt.data.ndim == 2:
            n = zt.shape[0]
            if temb.ndim == 1:
                temb = np.tile(temb, (n, 1))
            if ec.ndim == 1:
                ec = np.tile(ec, (n, 1))
            elif ec.shape[0] != n:
                raise ValueError("e_c batch size does not match z")
            axis = 1
        else:
            if ec.ndim != 1:
                raise ValueError("batched e_c with unbatched z")
            axis = 0
        x = ad.concat([zt, ad.as_tensor(temb), ad.as_tensor(ec)], axis=axis)
        return _mlp_forward(p, prefix, self._n_layers, x, "tanh")

    def to_state(self) -> dict:
        return {"kind": "denoiser", "data_dim": self.data_dim, "T": self.T,
                "hidden": list(self.hidden), "time_dim": self.time_dim,
                "cond_dim": self.cond_dim, "prediction_mode": self.prediction_mode,
                "sharing_mode": self.sharing_mode,
                "step_list": list(self.step_list) if self.step_list else None,
                "seed": self.seed, "params": _state_of(self.params)}

    @staticmethod
    def from_state(state: dict) -> "Denoiser":
        if state.get("kind") != "denoiser":
            raise ValueError("state blob is not a denoiser checkpoint")
        net = Denoiser(state["data_dim"], T=state["T"], hidden=state["hidden"],
                       time_dim=state["time_dim"], cond_dim=state["cond_dim"],
                       prediction_mode=state["prediction_mode"],
                       sharing_mode=state["sharing_mode"],
                       step_list=state["step_list"], seed=state["seed"])
        net.assign(_params_from_state(state["params"]))
        return net


class Discriminator(_Net):
    """MLP producing one real-vs-fake logit per row; sigmoid(logit) is the
    probability the input is real."""

    def __init__(self, data_dim: int, hidden=(64, 64), cond_dim: int = 0,
                 seed: int = 0):
        self.data_dim = int(data_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.cond_dim = int(cond_dim)
        self.seed = int(seed)
        sizes = (self.data_dim + self.cond_dim, *self.hidden)
        self._n_layers = len(sizes) - 1
        self.params = _init_layers(sizes, seed, 2.0)
        rng = np.random.default_rng(seed + 1)
        self.params["head.W"] = rng.normal(size=self.hidden[-1]) * np.sqrt(
            2.0 / self.hidden[-1])
        self.params["head.b"] = np.zeros(())

    def forward(self, z, e_c=None, tape: Tape | None = None,
                params: dict | None = None) -> Tensor:
        """Logits, shape (n,) for batched z, scalar for a single row."""
        p = params if params is not None else self.params
        zt = ad.as_tensor(z)
        if zt.shape[-1] != self.data_dim:
            raise ValueError(f"z last dim {zt.shape[-1]} != data dim {self.data_dim}")
        single = zt.data.ndim == 1
        if single:
            zt = ad.broadcast_to(zt, (1, self.data_dim))
        if self.cond_dim:
            ec = np.asarray(e_c, dtype=np.float64)
            if ec.ndim == 1:
                ec = np.tile(ec, (zt.shape[0], 1))
            zt = ad.concat([zt, ad.as_tensor(ec)], axis=1)
        h = _mlp_forward(p, "", self._n_layers, zt, "leaky_relu")
        h = ad.leaky_relu(h, 0.01)
        logits = ad.add(ad.matmul(h, p["head.W"]), p["head.b"])
        return ad.tslice(logits, 0) if single else logits

    def to_state(self) -> dict:
        return {"kind": "discriminator", "data_dim": self.data_dim,
                "hidden": list(self.hidden), "cond_dim": self.cond_dim,
                "seed": self.seed, "params": _state_of(self.params)}

    @staticmethod
    def from_state(state: dict) -> "Discriminator":
        if state.get("kind") != "discriminator":
            raise ValueError("state blob is not a discriminator checkpoint")
        net = Discriminator(state["data_dim"], hidden=state["hidden"],
                            cond_dim=state["cond_dim"], seed=state["seed"])
        net.assign(_params_from_state(state["params"]))
        return net


class FeatureNet:
    """Fixed random feature map, data dim -> ``feat_dim``. Weights are drawn
    once from N(0, 2/fan_in) and never appear in any gradient update; the
    same seed reproduces them bit-exactly."""

    def __init__(self, data_dim: int, feat_dim: int = 64, seed: int = 0):
        self.data_dim = int(data_dim)
        self.feat_dim = int(feat_dim)
        self.seed = int(seed)
        sizes = (self.data_dim, self.feat_dim, self.feat_dim)
        self._n_layers = len(sizes) - 1
        self.params = _init_layers(sizes, seed, 2.0)
        for v in self.params.values():
            v.setflags(write=False)

    def features(self, z) -> Tensor:
        zt = ad.as_tensor(z)
        if zt.shape[-1] != self.data_dim:
            raise ValueError(f"z last dim {zt.shape[-1]} != data dim {self.data_dim}")
        return _mlp_forward(self.params, "", self._n_layers, zt, "tanh")

    @property
    def n_params(self) -> int:
        return _count(self.params)
