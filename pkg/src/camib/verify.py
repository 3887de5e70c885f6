"""Closed-form attention/alignment derivatives and a harness that checks them.

Every analytic formula is compared against two independent numeric routes:
reverse-mode autograd and central finite differences. A formula bug and an
autodiff bug therefore cannot hide behind each other.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import torch

from .attention import AttentionParams, attention_scores
from .disentangle import entropy
from .numeric import DTYPE, RngStream, as_tensor, finite_diff_grad, grad, max_errors, softmax_rows

IDENTITY_TOL = 1e-10
NORMALIZATION_TOL = 1e-10


def _check_row(alpha: torch.Tensor) -> None:
    if alpha.dim() != 1:
        raise ValueError("expected a single attention row")
    if bool((alpha < 0).any()) or abs(float(alpha.sum()) - 1.0) > NORMALIZATION_TOL:
        raise ValueError("attention row must be non-negative and sum to 1")


def _check_vhat(alpha, values, v_hat) -> None:
    _check_row(alpha)
    residual = float((alpha @ values - v_hat).abs().max())
    if residual > 1e-10:
        raise ValueError(f"v_hat is not the alpha-weighted value average (residual {residual:.2e})")


def softmax_jacobian(alpha_row) -> torch.Tensor:
    """J[m, j] = d alpha_m / d s_j = alpha_m (delta_mj - alpha_j)."""
    alpha = as_tensor(alpha_row)
    _check_row(alpha)
    return torch.diag(alpha) - torch.outer(alpha, alpha)


def dvhat_ds(alpha, values, v_hat) -> torch.Tensor:
    """Row j is d V_hat / d s_j = alpha_j (v_j - V_hat)."""
    alpha, values, v_hat = as_tensor(alpha), as_tensor(values), as_tensor(v_hat)
    _check_vhat(alpha, values, v_hat)
    return alpha.unsqueeze(1) * (values - v_hat)


def dl_ds(upstream, alpha, values, v_hat) -> torch.Tensor:
    """Entry j is alpha_j <dL/dV_hat, v_j - V_hat>."""
    upstream, alpha, values, v_hat = (as_tensor(t) for t in (upstream, alpha, values, v_hat))
    _check_vhat(alpha, values, v_hat)
    return alpha * ((values - v_hat) @ upstream)


def score_weight_gradients(z_i, z_j, params: AttentionParams):
    """Gradients of s_ij w.r.t. (W_Q, W_K, W_V): z_i k_j^T/sqrt(d), z_j q_i^T/sqrt(d), 0."""
    z_i, z_j = as_tensor(z_i), as_tensor(z_j)
    d = z_i.shape[0]
    with torch.no_grad():
        q_i = z_i @ params.W_Q
        k_j = z_j @ params.W_K
        scale = 1.0 / math.sqrt(d)
        return (
            torch.outer(z_i, k_j) * scale,
            torch.outer(z_j, q_i) * scale,
            torch.zeros(d, d, dtype=DTYPE),
        )


def kl_uniform_identity(p, K: int) -> tuple[float, float]:
    """Return (KL(p || uniform_K), ln K - H(p)) with 0 log 0 taken as 0."""
    p = as_tensor(p)
    if p.shape[-1] != K:
        raise ValueError("p must have K entries")
    if bool((p < 0).any()) or abs(float(p.sum()) - 1.0) > NORMALIZATION_TOL:
        raise ValueError("p must be a probability vector")
    nz = p > 0
    kl = float((p[nz] * (torch.log(p[nz]) + math.log(K))).sum())
    return kl, math.log(K) - float(entropy(p))


def mse_alignment_gradients(z_c, v):
    """Gradients of ||z_c - V||^2 (sum reduction): (d/dz_c, d/dV) = (2(z_c - V), -2(z_c - V))."""
    diff = as_tensor(z_c) - as_tensor(v)
    return 2.0 * diff, -2.0 * diff


@dataclass
class CheckResult:
    name: str
    instances: int
    tolerance: float
    max_abs_error: float = 0.0
    max_rel_error: float = 0.0
    routes: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def update(self, analytic, reference) -> None:
        a, r = max_errors(analytic, reference)
        self.max_abs_error = max(self.max_abs_error, a)
        self.max_rel_error = max(self.max_rel_error, r)


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)
    seed: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_text(self) -> str:
        lines = [f"gradient verification (seed={self.seed})"]
        for c in self.checks:
            lines.append(
                f"{'PASS' if c.passed else 'FAIL'}  {c.name:<22} n={c.instances:<5d} tol={c.tolerance:.1e}"
                f"  max_abs={c.max_abs_error:.3e}  max_rel={c.max_rel_error:.3e}  via={'+'.join(c.routes)}"
            )
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "passed": self.passed,
            "checks": [dict(asdict(c), passed=c.passed) for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def finite_diff_jacobian(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, step: float):
    """J[a, b] = d fn(x)_a / d x_b by central differences (fn output flattened)."""
    x = as_tensor(x).detach().clone()
    cols = []
    with torch.no_grad():
        for b in range(x.numel()):
            xp, xm = x.clone(), x.clone()
            xp.view(-1)[b] += step
            xm.view(-1)[b] -= step
            cols.append((fn(xp).reshape(-1) - fn(xm).reshape(-1)) / (2 * step))
    return torch.stack(cols, dim=1)


def _autograd_jacobian(fn, x) -> torch.Tensor:
    x = as_tensor(x).detach()
    out_dim = fn(x).numel()
    rows = []
    for a in range(out_dim):
        rows.append(grad(lambda p, a=a: fn(p["x"]).reshape(-1)[a], {"x": x})["x"].reshape(-1))
    return torch.stack(rows, dim=0)


@dataclass
class _Instance:
    z: torch.Tensor  # (M*L, d)
    params: AttentionParams
    i: int
    j: int
    rng: RngStream


def _random_instance(rng: RngStream) -> _Instance:
    M = int(rng.integers(1, 4))
    L = int(rng.integers(1, 5))
    d = int((2, 4, 8)[int(rng.integers(0, 3))])
    n = M * L
    z = rng.normal((n, d))
    params = AttentionParams(d, rng=rng.child("params"))
    with torch.no_grad():
        for w in (params.W_Q, params.W_K, params.W_V):
            w.mul_(math.sqrt(d))  # unit-scale entries so scores are O(1)
    return _Instance(z, params, int(rng.integers(0, n)), int(rng.integers(0, n)), rng)


CHECK_NAMES = (
    "softmax_jacobian",
    "softmax_column_sum",
    "dvhat_ds",
    "dl_ds",
    "ds_dWq",
    "ds_dWk",
    "ds_dWv",
    "mse_align_grad",
    "kl_uniform",
)


def verify_all(
    instances: int = 100,
    tol: float = 1e-4,
    seed: int = 0,
    step: float = 1e-5,
    mutate: Iterable[str] = (),
    checks: Iterable[str] | None = None,
) -> VerificationReport:
    """Run every derivative check over randomized attention instances.

    ``mutate`` names checks whose analytic formula is deliberately sign-flipped,
    to confirm the suite notices. Failures are recorded, never raised.
    """
    mutate = set(mutate)
    wanted = list(checks) if checks is not None else list(CHECK_NAMES)
    unknown = (mutate | set(wanted)) - set(CHECK_NAMES)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    sign = {name: (-1.0 if name in mutate else 1.0) for name in CHECK_NAMES}
    master = RngStream(seed)
    report = VerificationReport(seed=seed)

    for name in wanted:
        is_identity = name in ("kl_uniform", "softmax_column_sum")
        result = CheckResult(
            name,
            instances,
            IDENTITY_TOL if is_identity else tol,
            routes=("algebra",) if is_identity else ("autograd", "finite_diff"),
        )
        stream = master.child(name)
        for k in range(instances):
            inst = _random_instance(stream.child(k))
            _RUNNERS[name](inst, result, sign[name], step)
        report.checks.append(result)
    return report


def _row_fns(inst: _Instance):
    with torch.no_grad():
        scores = attention_scores(inst.z, inst.params)
        values = inst.z @ inst.params.W_V
    s_row = scores[inst.i]

    def alpha_of(s):
        return softmax_rows(s.unsqueeze(0)).squeeze(0)

    def vhat_of(s):
        return alpha_of(s) @ values

    return s_row, values, alpha_of, vhat_of


def _run_softmax_jacobian(inst, result, sign, step):
    s_row, _, alpha_of, _ = _row_fns(inst)
    analytic = sign * softmax_jacobian(alpha_of(s_row))
    result.update(analytic, _autograd_jacobian(alpha_of, s_row))
    result.update(analytic, finite_diff_jacobian(alpha_of, s_row, step))


def _run_softmax_column_sum(inst, result, sign, step):
    s_row, _, alpha_of, _ = _row_fns(inst)
    J = sign * softmax_jacobian(alpha_of(s_row))
    # sum over m of d alpha_m / d s_j vanishes; compare against zero on an O(1) scale
    result.max_abs_error = max(result.max_abs_error, float(J.sum(dim=0).abs().max()))
    result.max_rel_error = max(result.max_rel_error, float(J.sum(dim=0).abs().max()))


def _run_dvhat_ds(inst, result, sign, step):
    s_row, values, alpha_of, vhat_of = _row_fns(inst)
    alpha = alpha_of(s_row)
    analytic = sign * dvhat_ds(alpha, values, alpha @ values)  # n x d
    result.update(analytic, _autograd_jacobian(vhat_of, s_row).T)
    result.update(analytic, finite_diff_jacobian(vhat_of, s_row, step).T)


def _run_dl_ds(inst, result, sign, step):
    s_row, values, alpha_of, vhat_of = _row_fns(inst)
    upstream = inst.rng.child("upstream").normal((values.shape[1],))
    alpha = alpha_of(s_row)
    analytic = sign * dl_ds(upstream, alpha, values, alpha @ values)

    def objective(p):
        return vhat_of(p["s"]) @ upstream

    result.update(analytic, grad(objective, {"s": s_row})["s"])
    result.update(analytic, finite_diff_grad(objective, {"s": s_row}, step)["s"])


def _score_objective(inst):
    def objective(p):
        scores = attention_scores(inst.z, AttentionParamsView(p))
        return scores[inst.i, inst.j]

    return objective


class AttentionParamsView:
    """Duck-typed stand-in for AttentionParams over a dict of raw tensors."""

    def __init__(self, p):
        self.W_Q, self.W_K, self.W_V = p["W_Q"], p["W_K"], p["W_V"]
        self.d = self.W_Q.shape[0]


def _run_weight_grad(which: str):
    index = {"ds_dWq": 0, "ds_dWk": 1, "ds_dWv": 2}[which]
    key = ("W_Q", "W_K", "W_V")[index]

    def run(inst, result, sign, step):
        analytic = sign * score_weight_gradients(inst.z[inst.i], inst.z[inst.j], inst.params)[index]
        params = {k: getattr(inst.params, k).detach() for k in ("W_Q", "W_K", "W_V")}
        objective = _score_objective(inst)
        result.update(analytic, grad(objective, params)[key])
        result.update(analytic, finite_diff_grad(objective, params, step)[key])

    return run


def _run_mse_align(inst, result, sign, step):
    rng = inst.rng.child("mse")
    shape = (int(rng.integers(1, 5)), inst.z.shape[1])
    z_c, v = rng.normal(shape), rng.normal(shape)
    g_zc, g_v = mse_alignment_gradients(z_c, v)
    g_zc, g_v = sign * g_zc, sign * g_v

    def objective(p):
        return ((p["z_c"] - p["v"]) ** 2).sum()

    params = {"z_c": z_c, "v": v}
    for ref in (grad(objective, params), finite_diff_grad(objective, params, step)):
        result.update(g_zc, ref["z_c"])
        result.update(g_v, ref["v"])


def _run_kl_uniform(inst, result, sign, step):
    rng = inst.rng.child("dirichlet")
    K = int(rng.integers(2, 9))
    p = torch.from_numpy(rng.numpy().dirichlet([0.5] * K))
    p = p / p.sum()
    kl, rhs = kl_uniform_identity(p, K)
    err = abs(sign * kl - rhs)
    result.max_abs_error = max(result.max_abs_error, err)
    result.max_rel_error = max(result.max_rel_error, err)


_RUNNERS = {
    "softmax_jacobian": _run_softmax_jacobian,
    "softmax_column_sum": _run_softmax_column_sum,
    "dvhat_ds": _run_dvhat_ds,
    "dl_ds": _run_dl_ds,
    "ds_dWq": _run_weight_grad("ds_dWq"),
    "ds_dWk": _run_weight_grad("ds_dWk"),
    "ds_dWv": _run_weight_grad("ds_dWv"),
    "mse_align_grad": _run_mse_align,
    "kl_uniform": _run_kl_uniform,
}
