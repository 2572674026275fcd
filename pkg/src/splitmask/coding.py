"""Secret coding schemes and the encode/decode algebra.

Orientation used throughout: the augmented data matrix is
``Z = [x_1 .. x_K | r_1 .. r_M]`` (one tensor per slot) and encoding ``j`` is
``sum_k A[k, j] * Z[k]``. Rows ``0..K-1`` of ``A`` weight the inputs, rows
``K..P-1`` weight the noises. Because the products are bilinear, worker results
satisfy ``Ybar = Y_aug @ A`` (slot-wise), so ``Y_aug = Ybar @ A^-1``.

For weight gradients, worker ``j`` computes ``Eq_j = <sum_i B[j, i] delta_i, encoding_j>``
and ``sum_j gamma_j Eq_j`` collapses to ``sum_i <delta_i, x_i>`` whenever
``B^T diag(gamma) A^T = [I_K | 0]``, i.e. ``B = diag(gamma)^-1 A^-1[:, :K]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import IncompleteBatchError, IntegrityNotEnabledError, SchemeGenerationError, ShapeError
from .serialize import dumps17

DEFAULT_TAU = {"f64": 1e-6, "f32": 1e-3}
EPS_FLOOR = 1e-30
MAX_COND = 1e6
# extension columns must touch every base encoding with at least this weight,
# otherwise a fault on that encoding would barely move the prediction
EXT_COEFF_FLOOR = 0.1


@dataclass(frozen=True)
class IntegrityVerdict:
    passed: bool
    max_residual: float
    offending_index: Optional[int]
    tau: float

    def __post_init__(self):
        if self.passed != (self.max_residual < self.tau):
            raise ValueError("verdict must pass exactly when max_residual < tau")


@dataclass(frozen=True, eq=False)
class CodingScheme:
    K: int
    M: int
    A: np.ndarray          # (P, P), column j = coefficients of encoding j
    B: np.ndarray          # (P, K), row j = gradient mix sent with encoding j
    gamma: np.ndarray      # (P,), secret decoding weights
    A_ext: np.ndarray      # (P, E), integrity extension encodings
    seed: int = 0
    orthogonal: bool = False
    # second decoding used by backward verification: P encoding indices drawn
    # from the P + 1 available (base plus first extension), with their own mix
    check_subset: tuple = ()
    B_check: Optional[np.ndarray] = None
    gamma_check: Optional[np.ndarray] = None
    A_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = self.K + self.M
        if self.A.shape != (P, P) or self.B.shape != (P, self.K) or self.gamma.shape != (P,):
            raise ShapeError("scheme matrices do not match K and M")
        if self.A_ext.ndim != 2 or self.A_ext.shape[0] != P:
            raise ShapeError(f"A_ext must be ({P}, E)")
        for name in ("A", "B", "gamma", "A_ext", "B_check", "gamma_check"):
            arr = getattr(self, name)
            if arr is not None:
                object.__setattr__(self, name, np.array(arr, dtype=np.float64))
        object.__setattr__(self, "A_inv", np.linalg.inv(self.A))
        for name in ("A", "B", "gamma", "A_ext", "A_inv", "B_check", "gamma_check"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def P(self):
        return self.K + self.M

    @property
    def E(self):
        return self.A_ext.shape[1]

    @property
    def A1(self):
        return self.A[:self.K]

    @property
    def A2(self):
        return self.A[self.K:]

    @property
    def scheme_id(self):
        return f"{self.seed & 0xFFFFFFFFFFFFFFFF:016x}"

    def full_matrix(self):
        """``[A | A_ext]``: coefficient columns of every encoding, base then extension."""
        return np.hstack([self.A, self.A_ext])

    def ext_coefficients(self):
        """Each extension encoding expressed in the basis of the base encodings."""
        return self.A_inv @ self.A_ext

    def constraint_residual(self):
        return constraint_residual(self.A, self.B, self.gamma, self.K)

    def to_dict(self):
        d = {"K": self.K, "M": self.M, "E": self.E, "seed": self.seed,
             "A": self.A, "B": self.B, "Gamma": self.gamma, "A_ext": self.A_ext}
        if self.check_subset:
            d.update(check_subset=list(self.check_subset), B_check=self.B_check,
                     Gamma_check=self.gamma_check)
        return d

    def to_json(self):
        """Debug export with 17-significant-digit numbers; never sent to workers."""
        return dumps17(self.to_dict())

    @classmethod
    def from_matrices(cls, K, M, A, gamma=None, A_ext=None, seed=0, check_drop=None):
        """Scheme with a caller-chosen ``A``; ``B`` is derived so the decode constraint holds."""
        A = np.asarray(A, dtype=np.float64)
        P = K + M
        gamma = np.ones(P) if gamma is None else np.asarray(gamma, dtype=np.float64)
        A_ext = np.zeros((P, 0)) if A_ext is None else np.asarray(A_ext, dtype=np.float64).reshape(P, -1)
        B = derive_B(A, gamma, K)
        check = {}
        if A_ext.shape[1]:
            check = _check_decoding(A, A_ext[:, 0], K, np.ones(P),
                                    int(np.argmax(np.abs(np.linalg.solve(A, A_ext[:, 0]))))
                                    if check_drop is None else check_drop)
        return cls(K, M, A, B, gamma, A_ext, seed, False, **check)


def constraint_residual(A, B, gamma, K):
    """``max |B^T diag(gamma) A^T - [I_K | 0]|``."""
    P = A.shape[0]
    target = np.eye(K, P)
    return float(np.abs(B.T @ np.diag(gamma) @ A.T - target).max())


def derive_B(A, gamma, K):
    return np.linalg.inv(A)[:, :K] / gamma[:, None]


def _draw_gamma(rng, P):
    return rng.uniform(0.5, 2.0, P) * rng.choice([-1.0, 1.0], P)


def _check_decoding(A, a_ext, K, gamma_check, drop):
    P = A.shape[0]
    subset = tuple(j for j in range(P) if j != drop) + (P,)
    cols = np.hstack([A, a_ext[:, None]])[:, subset]
    return {"check_subset": subset, "B_check": derive_B(cols, gamma_check, K),
            "gamma_check": np.asarray(gamma_check, dtype=np.float64)}


def _orthogonal(rng, P):
    q, r = np.linalg.qr(rng.standard_normal((P, P)))
    return q * np.sign(np.diag(r))


def gen_scheme(K, M=1, E=0, C_min=0.1, seed=0, *, orthogonal=True, max_retries=1000):
    """Draw a fresh secret scheme for one virtual batch.

    ``A`` is the sign-fixed Q factor of a Gaussian matrix. With ``M == 1`` it
    stays orthogonal and draws with a noise weight below ``C_min`` are
    rejected; with ``M > 1`` the noise block is scaled up until every column
    has norm ``>= C_min``. Gamma entries are uniform on ``±[0.5, 2]`` and ``B``
    is solved from the decode constraint. Extension columns are unit-norm
    Gaussian draws whose noise part also clears ``C_min``.
    """
    if K < 1 or M < 1 or E < 0:
        raise ValueError("need K >= 1, M >= 1, E >= 0")
    if C_min < 0:
        raise ValueError("C_min must be >= 0")
    P = K + M
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        if orthogonal:
            A = _orthogonal(rng, P)
        else:
            A = rng.standard_normal((P, P))
        if M == 1:
            if np.abs(A[K]).min() < C_min:
                continue
        else:
            norms = np.linalg.norm(A[K:], axis=0)
            if norms.min() == 0:
                continue
            A[K:] *= max(1.0, C_min / norms.min())
        if not orthogonal or M > 1:
            if np.linalg.cond(A) > MAX_COND:
                continue
        gamma = _draw_gamma(rng, P)
        A_ext = np.zeros((P, E))
        ok = True
        for e in range(E):
            for _ in range(max_retries):
                col = rng.standard_normal(P)
                col /= np.linalg.norm(col)
                if (np.linalg.norm(col[K:]) >= C_min
                        and np.abs(np.linalg.solve(A, col)).min() >= EXT_COEFF_FLOOR):
                    A_ext[:, e] = col
                    break
            else:
                ok = False
        if not ok:
            continue
        check = {}
        if E:
            check = _check_decoding(A, A_ext[:, 0], K, _draw_gamma(rng, P), int(rng.integers(P)))
        scheme = CodingScheme(K, M, A, derive_B(A, gamma, K), gamma, A_ext, int(seed),
                              bool(orthogonal and M == 1), **check)
        return scheme
    raise SchemeGenerationError(f"no usable scheme for K={K}, M={M}, C_min={C_min} "
                                f"after {max_retries} draws")


def identity_scheme(K, M=1, E=0, seed=0):
    """``A = I`` (no mixing); only useful to isolate the protocol plumbing in tests."""
    P = K + M
    A_ext = None
    if E:
        rng = np.random.default_rng(seed)
        A_ext = rng.standard_normal((P, E))
        A_ext /= np.linalg.norm(A_ext, axis=0)
    return CodingScheme.from_matrices(K, M, np.eye(P), A_ext=A_ext, seed=seed)


# --------------------------------------------------------------------------
# batches


@dataclass
class VirtualBatch:
    inputs: list
    noises: list

    def __post_init__(self):
        if not self.inputs or not self.noises:
            raise ShapeError("a virtual batch needs K >= 1 inputs and M >= 1 noises")
        shape = np.shape(self.inputs[0])
        if any(np.shape(t) != shape for t in list(self.inputs) + list(self.noises)):
            raise ShapeError("all tensors in a virtual batch must share one shape")

    @property
    def K(self):
        return len(self.inputs)

    @property
    def M(self):
        return len(self.noises)


@dataclass
class EncodedBatch:
    encoded: list
    scheme_id: str


def draw_noise(shape, M, sigma2, rng, mean=0.0, dtype=np.float64):
    """``M`` noise tensors with i.i.d. Normal(mean, sigma2) entries."""
    std = np.sqrt(sigma2)
    return [(mean + std * rng.standard_normal(shape)).astype(dtype) for _ in range(M)]


def _combine(tensors, coeffs):
    """``sum_k coeffs[k] * tensors[k]`` accumulated in ascending ``k``."""
    out = None
    for t, c in zip(tensors, coeffs):
        term = c * t
        out = term if out is None else out + term
    return out


def encode(batch: VirtualBatch, scheme: CodingScheme) -> EncodedBatch:
    if batch.K != scheme.K or batch.M != scheme.M:
        raise ShapeError(f"batch has K={batch.K}, M={batch.M}; scheme expects K={scheme.K}, M={scheme.M}")
    Z = [np.asarray(t) for t in list(batch.inputs) + list(batch.noises)]
    dtype = np.result_type(*Z)
    cols = scheme.full_matrix().astype(dtype)
    encoded = [_combine(Z, cols[:, j]) for j in range(cols.shape[1])]
    return EncodedBatch(encoded, scheme.scheme_id)


def _require(results, n, what):
    if len(results) < n or any(r is None for r in results[:n]):
        missing = [j for j in range(n) if j >= len(results) or results[j] is None]
        raise IncompleteBatchError(f"missing {what} for encoding indices {missing}")


def decode_augmented(Ybar: Sequence, scheme: CodingScheme):
    """All ``P`` decoded slots, ``[<W,x_1> .. <W,x_K>, <W,r_1> .. <W,r_M>]``."""
    P = scheme.P
    _require(Ybar, P, "result")
    dtype = np.result_type(*Ybar[:P])
    A_inv = scheme.A_inv.astype(dtype)
    return [_combine(Ybar[:P], A_inv[:, k]) for k in range(P)]


def decode_forward(Ybar: Sequence, scheme: CodingScheme):
    """Recover the ``K`` per-input outputs; the noise images are discarded."""
    return decode_augmented(Ybar, scheme)[:scheme.K]


def grad_coefficients(scheme: CodingScheme):
    return scheme.B, scheme.gamma


def combine_gradients(deltas: Sequence, B):
    """Rows of ``sum_i B[j, i] * delta_i``, one mixed gradient per encoding."""
    deltas = [np.asarray(d) for d in deltas]
    if len(deltas) != B.shape[1]:
        raise ShapeError(f"{len(deltas)} gradients for a scheme with K={B.shape[1]}")
    Bc = B.astype(np.result_type(*deltas))
    return [_combine(deltas, Bc[j]) for j in range(B.shape[0])]


def decode_grad(eqs: Sequence, scheme: CodingScheme):
    """``sum_j gamma_j Eq_j`` = the SUM over inputs of the weight gradients."""
    P = scheme.P
    _require(eqs, P, "gradient equation")
    g = scheme.gamma.astype(np.result_type(*eqs[:P]))
    return _combine(eqs[:P], g)


def _inf(a):
    return float(np.max(np.abs(a))) if np.size(a) else 0.0


def verify_forward(Ybar_full: Sequence, scheme: CodingScheme, tau=DEFAULT_TAU["f64"]) -> IntegrityVerdict:
    """Check each extension result against its prediction from the decoded slots."""
    if scheme.E == 0:
        raise IntegrityNotEnabledError("scheme has no extension columns")
    P, E = scheme.P, scheme.E
    _require(Ybar_full, P + E, "result")
    Y_aug = decode_augmented(Ybar_full, scheme)
    ext = scheme.A_ext.astype(np.result_type(*Ybar_full[:P + E]))
    worst, worst_idx = 0.0, None
    for e in range(E):
        predicted = _combine(Y_aug, ext[:, e])
        observed = Ybar_full[P + e]
        res = _inf(predicted - observed) / (_inf(observed) + EPS_FLOOR)
        if worst_idx is None or res > worst:
            worst, worst_idx = res, P + e
    passed = worst < tau
    return IntegrityVerdict(passed, worst, None if passed else worst_idx, tau)


def check_grad_coefficients(scheme: CodingScheme):
    """``(subset, B_check, gamma_check)`` for the second, independent gradient decoding."""
    if scheme.E == 0:
        raise IntegrityNotEnabledError("scheme has no extension columns")
    return scheme.check_subset, scheme.B_check, scheme.gamma_check


def decode_grad_check(check_eqs: Sequence, scheme: CodingScheme):
    _, _, gamma2 = check_grad_coefficients(scheme)
    _require(check_eqs, scheme.P, "check equation")
    g = gamma2.astype(np.result_type(*check_eqs[:scheme.P]))
    return _combine(check_eqs[:scheme.P], g)


def verify_grad(eqs: Sequence, scheme: CodingScheme, tau=DEFAULT_TAU["f64"]) -> IntegrityVerdict:
    """Decode the weight gradient twice and compare.

    ``eqs`` holds the ``P`` primary equations (encodings ``0..P-1``) followed by
    the ``P`` check equations, ordered as ``scheme.check_subset``. A single
    corrupted equation enters exactly one of the two decodings with a nonzero
    weight, so it shows up as a mismatch.
    """
    if scheme.E == 0:
        raise IntegrityNotEnabledError("scheme has no extension columns")
    P = scheme.P
    _require(eqs, 2 * P, "gradient equation")
    g1 = decode_grad(eqs[:P], scheme)
    g2 = decode_grad_check(eqs[P:2 * P], scheme)
    # Normalise by the magnitude the sums were accumulated at, not by the
    # (much smaller) decoded gradient: the masked equations carry the noise.
    scale = max(sum(abs(g) * _inf(e) for g, e in zip(scheme.gamma, eqs[:P])),
                sum(abs(g) * _inf(e) for g, e in zip(scheme.gamma_check, eqs[P:2 * P])))
    res = _inf(g1 - g2) / (scale + EPS_FLOOR)
    return IntegrityVerdict(bool(res < tau), float(res), None, tau)
