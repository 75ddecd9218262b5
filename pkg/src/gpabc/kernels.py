"""Covariance kernels over scalar time, with analytic input derivatives.

Besides plain evaluation k(t, t'), the derivative Gaussian process needs the
covariance between a derivative observation and a function value (dk/dt) and
between two derivative observations (d2k/dt dt').  Both are supplied in
closed form for the squared-exponential and arcsine MLP families, together
with the kernel-matrix gradients used by the marginal-likelihood optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

SE = "se"
MLP = "mlp"

FAMILIES = (SE, MLP)

# keep asin arguments away from +-1, where the MLP derivative formulas blow up
_Z_CLAMP = 1.0 - 1e-12
_TWO_OVER_PI = 2.0 / np.pi


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of one covariance family, stored in natural space.

    The SE family uses ``variance`` (signal variance, state units squared)
    and ``lengthscale_sq`` (time squared).  The MLP family uses ``variance``,
    ``weight_variance`` (1/time^2) and ``bias_variance`` (dimensionless).
    ``bias_variance`` may be zero; every other entry must be strictly
    positive.
    """

    family: str
    variance: float
    lengthscale_sq: float | None = None
    weight_variance: float | None = None
    bias_variance: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if not (np.isfinite(self.variance) and self.variance > 0):
            raise ValueError(f"variance must be finite and > 0, got {self.variance}")
        if self.family == SE:
            ls2 = self.lengthscale_sq
            if ls2 is None or not (np.isfinite(ls2) and ls2 > 0):
                raise ValueError(f"SE lengthscale_sq must be finite and > 0, got {ls2}")
        else:
            wv, bv = self.weight_variance, self.bias_variance
            if wv is None or not (np.isfinite(wv) and wv > 0):
                raise ValueError(f"MLP weight_variance must be finite and > 0, got {wv}")
            if bv is None or not (np.isfinite(bv) and bv >= 0):
                raise ValueError(f"MLP bias_variance must be finite and >= 0, got {bv}")

    @classmethod
    def se(cls, variance, lengthscale_sq):
        return cls(family=SE, variance=float(variance), lengthscale_sq=float(lengthscale_sq))

    @classmethod
    def mlp(cls, variance, weight_variance, bias_variance):
        return cls(
            family=MLP,
            variance=float(variance),
            weight_variance=float(weight_variance),
            bias_variance=float(bias_variance),
        )

    def param_names(self):
        if self.family == SE:
            return ("variance", "lengthscale_sq")
        return ("variance", "weight_variance", "bias_variance")

    def params(self):
        return np.array([getattr(self, n) for n in self.param_names()])

    def log_params(self):
        return np.log(self.params())

    @classmethod
    def from_log_params(cls, family, log_params):
        p = np.exp(np.asarray(log_params, dtype=float))
        if family == SE:
            return cls.se(p[0], p[1])
        return cls.mlp(p[0], p[1], p[2])

    def with_variance(self, variance):
        return replace(self, variance=float(variance))


def _check_times(*arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("kernel inputs must be finite")
        out.append(a)
    return out


# ---------------------------------------------------------------------------
# squared exponential: k = s2 * exp(-0.5 (t - t')^2 / l2)
# ---------------------------------------------------------------------------

def _se_eval(spec, t, tp):
    r = t - tp
    return spec.variance * np.exp(-0.5 * r * r / spec.lengthscale_sq)


def _se_d1(spec, t, tp):
    # d/dt k = -((t - t') / l2) k
    return -((t - tp) / spec.lengthscale_sq) * _se_eval(spec, t, tp)


def _se_dmix(spec, t, tp):
    # d2/dt dt' k = (1/l2 - (t - t')^2 / l2^2) k
    l2 = spec.lengthscale_sq
    r = t - tp
    return (1.0 / l2 - r * r / (l2 * l2)) * _se_eval(spec, t, tp)


# ---------------------------------------------------------------------------
# arcsine MLP: k = s2 * (2/pi) * asin(Z),
#   Z = (p t t' + b) / sqrt((p t^2 + b + 1)(p t'^2 + b + 1))
# ---------------------------------------------------------------------------

def _mlp_parts(spec, t, tp):
    p, b = spec.weight_variance, spec.bias_variance
    u2 = p * t * t + b + 1.0
    v2 = p * tp * tp + b + 1.0
    num = p * t * tp + b
    z = np.clip(num / np.sqrt(u2 * v2), -_Z_CLAMP, _Z_CLAMP)
    return p, num, u2, v2, z


def _mlp_eval(spec, t, tp):
    _, _, _, _, z = _mlp_parts(spec, t, tp)
    return spec.variance * _TWO_OVER_PI * np.arcsin(z)


def _mlp_dz_dt(p, num, u2, v2, t, tp):
    # quotient rule on Z = num / sqrt(u2 v2); only u2 and num depend on t
    return (p * tp - num * p * t / u2) / np.sqrt(u2 * v2)


def _mlp_d1(spec, t, tp):
    p, num, u2, v2, z = _mlp_parts(spec, t, tp)
    dz = _mlp_dz_dt(p, num, u2, v2, t, tp)
    return spec.variance * _TWO_OVER_PI * dz / np.sqrt(1.0 - z * z)


def _mlp_dmix(spec, t, tp):
    p, num, u2, v2, z = _mlp_parts(spec, t, tp)
    q = 1.0 / np.sqrt(u2 * v2)
    dz_dt = (p * tp - num * p * t / u2) * q
    dz_dtp = (p * t - num * p * tp / v2) * q
    d2z = p * q * (1.0 - p * t * t / u2 - p * tp * tp / v2 + num * p * t * tp / (u2 * v2))
    one_minus = 1.0 - z * z
    return spec.variance * _TWO_OVER_PI * (
        z * dz_dt * dz_dtp / one_minus ** 1.5 + d2z / np.sqrt(one_minus)
    )


_EVAL = {SE: _se_eval, MLP: _mlp_eval}
_D1 = {SE: _se_d1, MLP: _mlp_d1}
_DMIX = {SE: _se_dmix, MLP: _mlp_dmix}

GRAM_MODES = ("plain", "d_left", "d_mixed")
_MODE_FUNCS = {"plain": _EVAL, "d_left": _D1, "d_mixed": _DMIX}


def kernel_eval(spec, t, t_prime):
    """Covariance k(t, t'); symmetric in its arguments."""
    t, tp = _check_times(t, t_prime)
    return _EVAL[spec.family](spec, t, tp)


def kernel_deriv_first(spec, t, t_prime):
    """Derivative dk/dt with respect to the first argument."""
    t, tp = _check_times(t, t_prime)
    return _D1[spec.family](spec, t, tp)


def kernel_deriv_mixed(spec, t, t_prime):
    """Mixed second derivative d2k / dt dt'; symmetric in (t, t')."""
    t, tp = _check_times(t, t_prime)
    return _DMIX[spec.family](spec, t, tp)


def gram(spec, times_a, times_b, mode="plain"):
    """Matrix with entry (i, j) given by the scalar kernel operation on
    (times_a[i], times_b[j]).

    ``mode`` selects plain evaluation, the first derivative taken in the
    row (left) argument, or the mixed second derivative.  ``plain`` and
    ``d_mixed`` on identical grids are symmetric positive semidefinite.
    """
    if mode not in GRAM_MODES:
        raise ValueError(f"unknown gram mode {mode!r}; expected one of {GRAM_MODES}")
    ta, tb = _check_times(times_a, times_b)
    ta, tb = np.atleast_1d(ta), np.atleast_1d(tb)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("gram grids must be non-empty")
    func = _MODE_FUNCS[mode][spec.family]
    return func(spec, ta[:, None], tb[None, :])


def gram_with_log_grads(spec, times):
    """Training-grid kernel matrix plus its gradients with respect to the
    log-hyperparameters, keyed by parameter name.  Used by the marginal
    likelihood optimizer."""
    (t,) = _check_times(times)
    t = np.atleast_1d(t)
    ta, tb = t[:, None], t[None, :]
    if spec.family == SE:
        k = _se_eval(spec, ta, tb)
        r2 = (ta - tb) ** 2
        return k, {
            "variance": k,
            "lengthscale_sq": k * (r2 / (2.0 * spec.lengthscale_sq)),
        }
    p, num, u2, v2, z = _mlp_parts(spec, ta, tb)
    b = spec.bias_variance
    k = spec.variance * _TWO_OVER_PI * np.arcsin(z)
    q = 1.0 / np.sqrt(u2 * v2)
    scale = spec.variance * _TWO_OVER_PI / np.sqrt(1.0 - z * z)
    dz_dp = q * (ta * tb - 0.5 * num * (ta * ta / u2 + tb * tb / v2))
    dz_db = q * (1.0 - 0.5 * num * (1.0 / u2 + 1.0 / v2))
    return k, {
        "variance": k,
        "weight_variance": scale * dz_dp * p,
        "bias_variance": scale * dz_db * b,
    }
