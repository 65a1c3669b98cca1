"""Finite-difference gradient checker.

Central differences per coordinate against tape gradients, in double
precision. The relative-error denominator is max(|analytic|, |numeric|,
1e-8) so near-zero gradients do not inflate the score.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_rel_err:.3e}"


def _forward_value(f, inputs):
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check requires f to return a scalar tensor")
    return float(out.data.reshape(()))


def grad_check(f, inputs, eps=1e-5, tol=1e-6):
    """Compare tape gradients of scalar f(*inputs) with central differences.

    Inputs must be float64 tensors with requires_grad=True; their data is
    perturbed in place during the sweep and restored afterwards.
    """
    inputs = list(inputs)
    for t in inputs:
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise ContractError("grad_check inputs must be requires_grad tensors")
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires double precision inputs")
        if not np.isfinite(t.data).all():
            raise ContractError("grad_check inputs must be finite")

    v1 = _forward_value(f, inputs)
    v2 = _forward_value(f, inputs)
    if v1 != v2:
        raise ContractError("f is not deterministic: repeated evaluations differ")

    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = f(*inputs)
        tape.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    max_rel = 0.0
    per_input = []
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _forward_value(f, inputs)
            flat[i] = orig - eps
            fm = _forward_value(f, inputs)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        af = a.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(af), np.abs(num)), 1e-8)
        rel = float(np.max(np.abs(af - num) / denom)) if flat.size else 0.0
        per_input.append(rel)
        max_rel = max(max_rel, rel)
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel <= tol, per_input=per_input)
