"""Conditional continuous normalizing flow conditioned on a recurrent hidden state.

The base distribution at each event is a Gaussian whose parameters come from a
small network of the hidden state ``h``. The flow field is affine in ``z`` with
a scalar sigmoid gate in flow time ``s``:

    f(z, s, h) = (z @ Wz + h @ Wh + bz) * sigmoid(ws * s + bs)

so Tr[df/dz] = sigmoid(ws * s + bs) * Tr(Wz) exactly. Data live at s = 1 and
base samples at s = 0; ``encode`` runs 1 -> 0, ``decode`` runs 0 -> 1.

In the asynchronous (masked) mode the field is multiplied by the mask and only
sees the observed coordinates, so unobserved coordinates pass through unchanged
and contribute nothing to the trace.

Functions prefixed with ``tape_`` take parameter Values already registered on a
tape; the plain-named functions wrap them for numpy in, numpy out use.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Value
from .ode import FLOW_SPEC, IntegrationSpec, integrate, integrate_augmented

LOG_2PI = float(np.log(2.0 * np.pi))
VAR_FLOOR = 1e-4


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class BaseHead:
    """Two-layer tanh network mapping ``h`` to Gaussian base parameters.

    ``full_cov`` selects a Cholesky-parameterized full covariance (softplus on
    the diagonal of the factor); otherwise per-dimension variances.
    """

    def __init__(self, dim: int, hidden: int, full_cov: bool = True, width: int | None = None,
                 floor: float = VAR_FLOOR, seed: int = 0, params: dict | None = None,
                 prefix: str = "head."):
        self.dim = dim
        self.hidden = hidden
        self.full_cov = full_cov
        self.width = width or hidden
        self.floor = floor
        self.prefix = prefix
        self.params = params if params is not None else self.init_params(np.random.default_rng(seed))

    @property
    def n_out(self) -> int:
        d = self.dim
        return 2 * d + (d * (d - 1) // 2 if self.full_cov else 0)

    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "full_cov": self.full_cov,
                "width": self.width, "floor": self.floor, "prefix": self.prefix}

    def init_params(self, rng) -> dict:
        p = self.prefix
        return {f"{p}W1": _uniform(rng, (self.hidden, self.width), self.hidden),
                f"{p}b1": np.zeros(self.width),
                f"{p}W2": 0.1 * _uniform(rng, (self.width, self.n_out), self.width),
                f"{p}b2": np.zeros(self.n_out)}

    def forward(self, P: dict, h: Value):
        """Returns ``(mu, L)`` with L of shape (N, D, D) or ``(mu, var)``."""
        p, d = self.prefix, self.dim
        out = (h @ P[f"{p}W1"] + P[f"{p}b1"]).tanh() @ P[f"{p}W2"] + P[f"{p}b2"]
        mu = out[:, :d]
        scale = out[:, d:2 * d].softplus() + self.floor
        if not self.full_cov:
            return mu, scale
        return mu, ad.tril_assemble(scale, out[:, 2 * d:])


class FlowField:
    """Parameters ``Wz`` (D, D), ``Wh`` (H, D), ``bz`` (D,), scalars ``ws``, ``bs``."""

    def __init__(self, dim: int, hidden: int, seed: int = 0, params: dict | None = None,
                 prefix: str = "flow.", init_scale: float = 0.1):
        self.dim = dim
        self.hidden = hidden
        self.prefix = prefix
        self.init_scale = init_scale
        self.params = params if params is not None else self.init_params(np.random.default_rng(seed))

    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "prefix": self.prefix}

    def init_params(self, rng) -> dict:
        p, d, h = self.prefix, self.dim, self.hidden
        return {f"{p}Wz": self.init_scale * _uniform(rng, (d, d), d),
                f"{p}Wh": self.init_scale * _uniform(rng, (h, d), h),
                f"{p}bz": np.zeros(d),
                f"{p}ws": np.array(0.0),
                f"{p}bs": np.array(0.0)}

    def gate(self, P: dict, s: float) -> Value:
        return (P[f"{self.prefix}ws"] * s + P[f"{self.prefix}bs"]).sigmoid()

    def shift(self, P: dict, h: Value) -> Value:
        return h @ P[f"{self.prefix}Wh"] + P[f"{self.prefix}bz"]

    def vector_field(self, P: dict, mask: np.ndarray | None = None):
        """f(z, s, shift) with ``shift = h @ Wh + bz`` passed as the context."""
        Wz = P[f"{self.prefix}Wz"]
        if mask is None:
            def f(z, s, shift):
                return (z @ Wz + shift) * self.gate(P, s)
        else:
            def f(z, s, shift):
                return ((z * mask) @ Wz + shift) * mask * self.gate(P, s)
        return f

    def trace_fn(self, P: dict, mask: np.ndarray | None = None):
        diag = ad.diag_part(P[f"{self.prefix}Wz"])
        base = diag.sum() if mask is None else diag.tape.const(mask) @ diag

        def tr(z, s, ctx):
            return self.gate(P, s) * base
        return tr


# tape-level building blocks -------------------------------------------------------

def tape_exact_trace(field: FlowField, P: dict, s: float) -> Value:
    return field.gate(P, s) * ad.diag_part(P[f"{field.prefix}Wz"]).sum()


def tape_encode(field: FlowField, P: dict, x: Value, h: Value, mask=None,
                spec: IntegrationSpec = FLOW_SPEC):
    """Integrate data ``x`` (N, D) from s1 to s0.

    Returns ``(z, delta_logdet)`` where delta_logdet (N,) is the integral of the
    trace from s1 to s0, the term added to the base log-density.
    """
    tape = x.tape
    n = x.shape[0]
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(x.shape)
    shift = field.shift(P, h)
    z, ell = integrate_augmented(field.vector_field(P, m), field.trace_fn(P, m), x,
                                 tape.const(np.zeros(n)), spec.reversed(), shift)
    return z, -ell


def tape_decode(field: FlowField, P: dict, z: Value, h: Value, mask=None,
                spec: IntegrationSpec = FLOW_SPEC) -> Value:
    m = None if mask is None else np.asarray(mask, dtype=np.float64).reshape(z.shape)
    return integrate(field.vector_field(P, m), z, spec, field.shift(P, h))


def gaussian_logpdf_full(z: Value, mu: Value, L: Value) -> Value:
    """Row-wise log N(z; mu, L L^T) for lower-triangular L (N, D, D)."""
    d = z.shape[1]
    u = ad.solve_tril(L, z - mu)
    logdiag = ad.diag_part(L).log().sum(axis=1)
    return (u * u).sum(axis=1) * -0.5 - logdiag - 0.5 * d * LOG_2PI


def gaussian_logpdf_diag(z: Value, mu: Value, var: Value, mask=None) -> Value:
    """Row-wise sum over (observed) dims of univariate normal log-densities."""
    r = z - mu
    per_dim = (r * r / var + var.log()) * -0.5 - 0.5 * LOG_2PI
    if mask is not None:
        per_dim = per_dim * np.asarray(mask, dtype=np.float64)
    return per_dim.sum(axis=1)


def tape_log_likelihood(head: BaseHead, field: FlowField | None, P: dict, x: Value,
                        h: Value, mask=None, spec: IntegrationSpec = FLOW_SPEC) -> Value:
    """Per-row log p(x | h) (N,). ``mask`` selects the masked mode; ``field``
    None drops the flow (plain Gaussian head)."""
    if field is None:
        z, dlog = x, None
    else:
        z, dlog = tape_encode(field, P, x, h, mask, spec)
    mu, cov = head.forward(P, h)
    if head.full_cov:
        if mask is not None and not np.all(np.asarray(mask) == 1):
            raise ValueError("full covariance requires fully observed rows")
        base = gaussian_logpdf_full(z, mu, cov)
    else:
        base = gaussian_logpdf_diag(z, mu, cov, mask)
    return base if dlog is None else base + dlog


# numpy-facing operations -----------------------------------------------------------

def _setup(head: BaseHead | None, field: FlowField | None):
    tape = Tape(record=False)
    params = {}
    if head is not None:
        params.update(head.params)
    if field is not None:
        params.update(field.params)
    return tape, tape.params_from(params)


def _rows(a) -> np.ndarray:
    return np.atleast_2d(np.asarray(a, dtype=np.float64))


def base_params(head: BaseHead, h):
    """Base mean and covariance factor (full) or variances (diagonal) for each row of h."""
    tape, P = _setup(head, None)
    mu, cov = head.forward(P, tape.const(_rows(h)))
    return mu.data, cov.data


def exact_trace(field: FlowField, s: float) -> float:
    tape, P = _setup(None, field)
    return float(tape_exact_trace(field, P, s).data)


def encode(field: FlowField, x, h, mask=None, spec: IntegrationSpec = FLOW_SPEC):
    tape, P = _setup(None, field)
    z, dlog = tape_encode(field, P, tape.const(_rows(x)), tape.const(_rows(h)), mask, spec)
    return z.data, dlog.data


def decode(field: FlowField, z, h, mask=None, spec: IntegrationSpec = FLOW_SPEC) -> np.ndarray:
    tape, P = _setup(None, field)
    return tape_decode(field, P, tape.const(_rows(z)), tape.const(_rows(h)), mask, spec).data


def log_likelihood_syn(head: BaseHead, field: FlowField | None, x, h_pre,
                       spec: IntegrationSpec = FLOW_SPEC) -> np.ndarray:
    tape, P = _setup(head, field)
    ll = tape_log_likelihood(head, field, P, tape.const(_rows(x)), tape.const(_rows(h_pre)),
                             None, spec)
    return ll.data


def log_likelihood_asyn(head: BaseHead, field: FlowField | None, x, m, h_pre,
                        spec: IntegrationSpec = FLOW_SPEC) -> np.ndarray:
    m = _rows(m)
    if np.any(m.sum(axis=1) == 0):
        raise ValueError("every row needs at least one observed variable")
    if head.full_cov:
        raise ValueError("masked likelihood needs a per-dimension (diagonal) head")
    tape, P = _setup(head, field)
    x = _rows(x) * m
    ll = tape_log_likelihood(head, field, P, tape.const(x), tape.const(_rows(h_pre)), m, spec)
    return ll.data


def draw_base(mu: np.ndarray, cov: np.ndarray, n: int, full_cov: bool,
              rng: np.random.Generator) -> np.ndarray:
    """n base draws per row: returns (rows, n, D)."""
    rows, d = mu.shape
    eps = rng.standard_normal((rows, n, d))
    if full_cov:
        return mu[:, None, :] + np.einsum("rij,rnj->rni", cov, eps)
    return mu[:, None, :] + np.sqrt(cov)[:, None, :] * eps


def sample(head: BaseHead, field: FlowField | None, h_pre, n: int, mode: str = "syn",
           spec: IntegrationSpec = FLOW_SPEC, rng: np.random.Generator | None = None,
           return_base: bool = False):
    """Draw ``n`` forecasts per row of ``h_pre``: returns (rows, n, D), or (n, D)
    for a single conditioning vector."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    h = _rows(h_pre)
    single = np.ndim(h_pre) == 1
    mu, cov = base_params(head, h)
    full = head.full_cov and mode == "syn"
    z = draw_base(mu, cov, n, full, rng)
    x = z
    if field is not None:
        rows, _, d = z.shape
        hh = np.repeat(h, n, axis=0)
        x = decode(field, z.reshape(rows * n, d), hh, None, spec).reshape(rows, n, d)
    if single:
        x, z = x[0], z[0]
    return (x, z) if return_base else x
