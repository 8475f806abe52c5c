"""Continuous-time recurrent cells: GRUODE, GRU-D, ODERNN and ODELSTM.

Every cell works on a batch of instances at once. Each row keeps its own event
grid: between events the hidden state is evolved from the row's previous event
time to its next one, and padded (inactive) events leave a row untouched. The
batch is a vectorization device only; row results do not depend on the other
rows.

Weights use the row-vector convention ``x @ W`` with ``W`` of shape (in, out).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .data import Instance
from .ode import integrate_rows

CELL_KINDS = ("gruode", "gru-d", "odernn", "odelstm")


@dataclass
class HiddenState:
    h: Value
    c: Value | None = None  # ODELSTM cell memory
    x_last: np.ndarray | None = None  # last observed value per variable
    t_last: np.ndarray | None = None  # time of that observation

    def replace(self, **kw) -> "HiddenState":
        return replace(self, **kw)


@dataclass
class Batch:
    """Padded event arrays for B instances with up to K events each."""

    times: np.ndarray  # (B, K); padded events repeat the last real time
    x: np.ndarray  # (B, K, D)
    m: np.ndarray  # (B, K, D)
    active: np.ndarray  # (B, K) bool
    n_events: np.ndarray  # (B,)

    @classmethod
    def from_instances(cls, instances: list[Instance]) -> "Batch":
        b = len(instances)
        k = max(i.n_events for i in instances)
        d = instances[0].dim
        times = np.zeros((b, k))
        x = np.zeros((b, k, d))
        m = np.zeros((b, k, d))
        active = np.zeros((b, k), dtype=bool)
        for r, inst in enumerate(instances):
            n = inst.n_events
            times[r, :n] = inst.times
            times[r, n:] = inst.times[-1]
            x[r, :n] = inst.values.T
            m[r, :n] = inst.mask.T
            active[r, :n] = True
        return cls(times, x, m, active, active.sum(axis=1))

    @property
    def size(self) -> int:
        return self.times.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.shape[1]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Cell:
    """Shared machinery; subclasses define the parameters, evolve and update."""

    kind = ""

    def __init__(self, dim: int, hidden: int = 64, mask_input: bool = False,
                 max_step: float = 0.05, method: str = "rk4", seed: int = 0,
                 params: dict | None = None, x_mean=None):
        self.dim = dim
        self.hidden = hidden
        self.mask_input = mask_input
        self.max_step = max_step
        self.method = method
        self.x_mean = np.zeros(dim) if x_mean is None else np.asarray(x_mean, dtype=np.float64)
        self.params = params if params is not None else self.init_params(np.random.default_rng(seed))

    @property
    def input_dim(self) -> int:
        return 2 * self.dim if self.mask_input else self.dim

    def config(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "hidden": self.hidden,
                "mask_input": self.mask_input, "max_step": self.max_step,
                "method": self.method, "x_mean": self.x_mean.tolist()}

    def init_params(self, rng) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _gru_params(self, rng, prefix: str, in_dim: int | None) -> dict:
        h = self.hidden
        p = {}
        for g in "rzh":
            if in_dim:
                p[f"{prefix}W{g}"] = _uniform(rng, (in_dim, h), h)
            p[f"{prefix}U{g}"] = _uniform(rng, (h, h), h)
            p[f"{prefix}b{g}"] = _uniform(rng, (h,), h)
        return p

    def _mlp_params(self, rng, prefix: str) -> dict:
        h = self.hidden
        return {f"{prefix}A1": _uniform(rng, (h, h), h), f"{prefix}a1": np.zeros(h),
                f"{prefix}A2": 0.1 * _uniform(rng, (h, h), h), f"{prefix}a2": np.zeros(h)}

    # state ------------------------------------------------------------------
    def initial_state(self, tape: Tape, batch_size: int) -> HiddenState:
        return HiddenState(
            h=tape.const(np.zeros((batch_size, self.hidden))),
            x_last=np.tile(self.x_mean, (batch_size, 1)),
            t_last=np.zeros((batch_size, self.dim)))

    def evolve(self, P: dict, state: HiddenState, t_from, t_to) -> HiddenState:
        return state

    def update(self, P: dict, state: HiddenState, x: np.ndarray, m: np.ndarray,
               t: np.ndarray, active: np.ndarray | None = None) -> HiddenState:
        raise NotImplementedError

    # helpers ----------------------------------------------------------------
    def _input(self, tape: Tape, x, m) -> Value:
        x = x * m
        return tape.const(np.concatenate([x, m], axis=1) if self.mask_input else x)

    @staticmethod
    def _gru(P, prefix, xin: Value | None, h: Value, extra: dict | None = None) -> Value:
        """Vanilla GRU step; ``extra`` adds per-gate pre-activation terms."""
        extra = extra or {}

        def pre(g, hh):
            a = hh @ P[f"{prefix}U{g}"] + P[f"{prefix}b{g}"]
            if xin is not None:
                a = a + xin @ P[f"{prefix}W{g}"]
            if g in extra:
                a = a + extra[g]
            return a

        r = pre("r", h).sigmoid()
        z = pre("z", h).sigmoid()
        cand = pre("h", r * h).tanh()
        return z * h + (1.0 - z) * cand

    @staticmethod
    def _gate_rows(active, new: Value, old: Value) -> Value:
        if active is None or np.all(active):
            return new
        return ad.where(np.asarray(active)[:, None], new, old)

    def _bookkeep(self, state: HiddenState, x, m, t, active) -> HiddenState:
        obs = m > 0
        if active is not None:
            obs = obs & np.asarray(active)[:, None]
        x_last = np.where(obs, x, state.x_last)
        t_last = np.where(obs, np.asarray(t, dtype=np.float64).reshape(-1, 1), state.t_last)
        return state.replace(x_last=x_last, t_last=t_last)


class GRUODE(Cell):
    """GRU whose hidden state follows dh/dt = (1 - z) * (h_cand - h) between events.

    By default the continuous gates see no input (x(t) = 0); ``held_input``
    feeds the last observed value of every variable instead.
    """

    kind = "gruode"

    def __init__(self, *args, held_input: bool = False, **kw):
        self.held_input = held_input
        super().__init__(*args, **kw)

    def config(self) -> dict:
        return dict(super().config(), held_input=self.held_input)

    def init_params(self, rng):
        p = self._gru_params(rng, "cell.c_", self.dim if self.held_input else None)
        p.update(self._gru_params(rng, "cell.u_", self.input_dim))
        return p

    def field(self, P, x_held=None):
        def f(h, t, ctx):
            xin = None if x_held is None else h.tape.const(x_held)
            r = self._pre(P, "cell.c_", "r", xin, h).sigmoid()
            z = self._pre(P, "cell.c_", "z", xin, h).sigmoid()
            cand = self._pre(P, "cell.c_", "h", xin, r * h).tanh()
            return (1.0 - z) * (cand - h)
        return f

    @staticmethod
    def _pre(P, prefix, g, xin, hh):
        a = hh @ P[f"{prefix}U{g}"] + P[f"{prefix}b{g}"]
        if xin is not None:
            a = a + xin @ P[f"{prefix}W{g}"]
        return a

    def evolve(self, P, state, t_from, t_to):
        x_held = state.x_last if self.held_input else None
        h = integrate_rows(self.field(P, x_held), state.h, t_from, t_to,
                           self.max_step, self.method)
        return state.replace(h=h)

    def update(self, P, state, x, m, t, active=None):
        h = self._gru(P, "cell.u_", self._input(state.h.tape, x, m), state.h)
        return self._bookkeep(state.replace(h=self._gate_rows(active, h, state.h)), x, m, t, active)


class GRUD(Cell):
    """GRU with trainable exponential decays of inputs and hidden state.

    The hidden state is constant between events; the decay is applied inside
    :meth:`update` from the per-variable time since the last observation.
    """

    kind = "gru-d"

    def init_params(self, rng):
        d, h = self.dim, self.hidden
        p = self._gru_params(rng, "cell.", d)
        for g in "rzh":
            p[f"cell.V{g}"] = _uniform(rng, (d, h), h)
        p["cell.wgx"] = np.abs(_uniform(rng, (d,), 1))
        p["cell.bgx"] = np.zeros(d)
        p["cell.Wgh"] = np.abs(_uniform(rng, (d, h), d))
        p["cell.bgh"] = np.zeros(h)
        return p

    def decays(self, P, delta: Value):
        gx = (-(delta * P["cell.wgx"] + P["cell.bgx"]).relu()).exp()
        gh = (-(delta @ P["cell.Wgh"] + P["cell.bgh"]).relu()).exp()
        return gx, gh

    def update(self, P, state, x, m, t, active=None):
        tape = state.h.tape
        delta = tape.const(np.asarray(t, dtype=np.float64).reshape(-1, 1) - state.t_last)
        gx, gh = self.decays(P, delta)
        mc = tape.const(m)
        fill = gx * tape.const(state.x_last) + (1.0 - gx) * tape.const(self.x_mean)
        xhat = mc * tape.const(x) + (1.0 - mc) * fill
        hhat = gh * state.h
        extra = {g: mc @ P[f"cell.V{g}"] for g in "rzh"}
        h = self._gru(P, "cell.", xhat, hhat, extra)
        return self._bookkeep(state.replace(h=self._gate_rows(active, h, state.h)), x, m, t, active)


class ODERNN(Cell):
    """GRU updates at events, dh/dt = f(h) from a one-hidden-layer tanh network between them."""

    kind = "odernn"

    def init_params(self, rng):
        p = self._mlp_params(rng, "cell.f_")
        p.update(self._gru_params(rng, "cell.", self.input_dim))
        return p

    def field(self, P):
        def f(h, t, ctx):
            return (h @ P["cell.f_A1"] + P["cell.f_a1"]).tanh() @ P["cell.f_A2"] + P["cell.f_a2"]
        return f

    def evolve(self, P, state, t_from, t_to):
        h = integrate_rows(self.field(P), state.h, t_from, t_to, self.max_step, self.method)
        return state.replace(h=h)

    def update(self, P, state, x, m, t, active=None):
        h = self._gru(P, "cell.", self._input(state.h.tape, x, m), state.h)
        return self._bookkeep(state.replace(h=self._gate_rows(active, h, state.h)), x, m, t, active)


class ODELSTM(ODERNN):
    """LSTM updates of (h, c) at events; h alone follows the ODE between them."""

    kind = "odelstm"

    def init_params(self, rng):
        h, n_in = self.hidden, self.input_dim
        p = self._mlp_params(rng, "cell.f_")
        for g in "fioc":
            p[f"cell.W{g}"] = _uniform(rng, (n_in, h), h)
            p[f"cell.U{g}"] = _uniform(rng, (h, h), h)
            p[f"cell.b{g}"] = np.ones(h) if g == "f" else np.zeros(h)
        return p

    def initial_state(self, tape, batch_size):
        s = super().initial_state(tape, batch_size)
        return s.replace(c=tape.const(np.zeros((batch_size, self.hidden))))

    def update(self, P, state, x, m, t, active=None):
        xin = self._input(state.h.tape, x, m)
        h = state.h

        def pre(g):
            return xin @ P[f"cell.W{g}"] + h @ P[f"cell.U{g}"] + P[f"cell.b{g}"]

        f, i, o = pre("f").sigmoid(), pre("i").sigmoid(), pre("o").sigmoid()
        c = f * state.c + i * pre("c").tanh()
        h_new = o * c.tanh()
        state = state.replace(h=self._gate_rows(active, h_new, h),
                              c=self._gate_rows(active, c, state.c))
        return self._bookkeep(state, x, m, t, active)


_KINDS = {"gruode": GRUODE, "gru-d": GRUD, "odernn": ODERNN, "odelstm": ODELSTM}


def make_cell(kind: str, dim: int, hidden: int = 64, **kw) -> Cell:
    if kind not in _KINDS:
        raise ValueError(f"unknown cell {kind!r}; choose from {CELL_KINDS}")
    return _KINDS[kind](dim, hidden, **kw)


def cell_from_config(cfg: dict, params: dict) -> Cell:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    dim = cfg.pop("dim")
    hidden = cfg.pop("hidden")
    return make_cell(kind, dim, hidden, params=params, **cfg)


# sequences ----------------------------------------------------------------------

def run_batch(cell: Cell, P: dict, batch: Batch, tape: Tape):
    """Alternate evolve and update over every event of every row.

    Returns ``(h_pre, h_post)``: lists over event index k of (B, H) Values holding
    the states just before and just after the update at each row's k-th event.
    """
    state = cell.initial_state(tape, batch.size)
    t_prev = np.zeros(batch.size)
    h_pre, h_post = [], []
    for k in range(batch.n_steps):
        t_k = batch.times[:, k]
        state = cell.evolve(P, state, t_prev, t_k)
        h_pre.append(state.h)
        state = cell.update(P, state, batch.x[:, k], batch.m[:, k], t_k, batch.active[:, k])
        h_post.append(state.h)
        t_prev = t_k
    return h_pre, h_post


def gather_events(values: list[Value], batch: Batch) -> Value:
    """Stack per-event (B, H) Values into (N, H) rows for the active events,
    ordered instance by instance, events in time order."""
    stacked = ad.stack(values, axis=1)  # (B, K, H)
    rows, cols = np.nonzero(batch.active)
    return stacked[rows, cols]


def run_sequence(cell: Cell, instance: Instance):
    """Pre- and post-update hidden states at every event of one instance."""
    tape = Tape(record=False)
    P = tape.params_from(cell.params)
    h_pre, h_post = run_batch(cell, P, Batch.from_instances([instance]), tape)
    return [(a.data[0].copy(), b.data[0].copy()) for a, b in zip(h_pre, h_post)]


def _tape_params(cell: Cell, tape: Tape) -> dict:
    if all(k in tape.params for k in cell.params):
        return {k: tape.params[k] for k in cell.params}
    return tape.params_from(cell.params)


def evolve(cell: Cell, state: HiddenState, t_from: float, t_to: float, P=None) -> HiddenState:
    """Evolve a single-row state (convenience wrapper over the batched method)."""
    if t_to < t_from:
        raise ValueError("t_to must not precede t_from")
    P = P if P is not None else _tape_params(cell, state.h.tape)
    return cell.evolve(P, state, np.array([t_from]), np.array([t_to]))


def update(cell: Cell, state: HiddenState, x, m, t: float, P=None) -> HiddenState:
    m = np.asarray(m, dtype=np.float64).reshape(1, -1)
    if not np.any(m):
        raise ValueError("update needs at least one observed variable")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1) * m
    P = P if P is not None else _tape_params(cell, state.h.tape)
    return cell.update(P, state, x, m, np.array([float(t)]))
