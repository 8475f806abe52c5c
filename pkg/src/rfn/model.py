"""Marginal cell + joint layer, and the per-instance normalized training objective."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Value
from .cells import Batch, Cell, cell_from_config, gather_events, run_batch
from .flow import BaseHead, FlowField, tape_log_likelihood
from .ode import IntegrationSpec


class Model:
    """A recurrent cell feeding either a conditional flow (``joint='cnf'``) or a
    plain Gaussian head (``joint='gaussian'``).

    In ``mode='syn'`` every event is fully observed; in ``mode='asyn'`` the base
    is per-dimension and both the base log-density and the flow are masked.
    """

    def __init__(self, cell: Cell, head: BaseHead, field: FlowField | None, mode: str = "syn",
                 flow_spec: IntegrationSpec | None = None):
        if mode not in ("syn", "asyn"):
            raise ValueError(f"mode must be 'syn' or 'asyn', got {mode!r}")
        if mode == "asyn" and head.full_cov:
            raise ValueError("asyn mode needs a per-dimension base head")
        self.cell = cell
        self.head = head
        self.field = field
        self.mode = mode
        self.flow_spec = flow_spec or IntegrationSpec(0.0, 1.0, 20, "rk4")

    @property
    def joint(self) -> str:
        return "gaussian" if self.field is None else "cnf"

    @property
    def params(self) -> dict[str, np.ndarray]:
        p = dict(self.cell.params)
        p.update(self.head.params)
        if self.field is not None:
            p.update(self.field.params)
        return p

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        for part in (self.cell, self.head, self.field):
            if part is None:
                continue
            for k in part.params:
                part.params[k] = np.array(params[k], dtype=np.float64)

    def config(self) -> dict:
        return {"cell": self.cell.config(), "head": self.head.config(),
                "field": None if self.field is None else self.field.config(),
                "mode": self.mode,
                "flow_spec": {"t0": self.flow_spec.t0, "t1": self.flow_spec.t1,
                              "n_steps": self.flow_spec.n_steps, "method": self.flow_spec.method}}

    @classmethod
    def from_config(cls, cfg: dict, params: dict[str, np.ndarray]) -> "Model":
        cell_params = {k: v for k, v in params.items() if k.startswith("cell.")}
        cell = cell_from_config(cfg["cell"], cell_params)
        hc = dict(cfg["head"])
        head = BaseHead(hc.pop("dim"), hc.pop("hidden"), params={
            k: v for k, v in params.items() if k.startswith(hc["prefix"])}, **hc)
        field = None
        if cfg["field"] is not None:
            fc = dict(cfg["field"])
            field = FlowField(fc.pop("dim"), fc.pop("hidden"), params={
                k: v for k, v in params.items() if k.startswith(fc["prefix"])}, **fc)
        return cls(cell, head, field, cfg["mode"], IntegrationSpec(**cfg["flow_spec"]))

    # objective -----------------------------------------------------------------
    def event_log_likelihood(self, P: dict, batch: Batch, tape: Tape):
        """Log-likelihood of every active event, conditioned on its pre-event state.

        Returns ``(ll (N,), rows, cols)`` with (rows, cols) indexing the batch.
        """
        h_pre, _ = run_batch(self.cell, P, batch, tape)
        H = gather_events(h_pre, batch)
        rows, cols = np.nonzero(batch.active)
        X = batch.x[rows, cols]
        mask = None if self.mode == "syn" else batch.m[rows, cols]
        ll = tape_log_likelihood(self.head, self.field, P, tape.const(X), H, mask, self.flow_spec)
        return ll, rows, cols

    def loss(self, P: dict, batch: Batch, tape: Tape) -> Value:
        """Negative objective averaged over the instances of the batch.

        Each instance contributes the mean of its event log-likelihoods; in the
        masked mode that mean is additionally divided by D.
        """
        if self.mode == "syn" and not np.all(batch.m[batch.active] == 1):
            raise ValueError("syn mode requires fully observed events")
        ll, rows, _ = self.event_log_likelihood(P, batch, tape)
        per_event = 1.0 / batch.n_events[rows]
        if self.mode == "asyn":
            per_event = per_event / self.cell.dim
        weights = per_event / batch.size
        return -(ll * weights).sum()

    def loss_value(self, batch: Batch) -> float:
        tape = Tape()
        return float(self.loss(tape.params_from(self.params), batch, tape).data)
