"""
Structured linear degradation operators.

Every operator maps an input array of ``input_shape`` (images are
(H, W, C) float64) to an output array of ``output_shape`` and provides its
adjoint, the kernel solve ``(c*A*A^T + sigma2*I)^-1 r`` and, where the
structure allows it, SVD factors in implicit form.

SVD factors use flat spectral vectors: ``v_adjoint(x)`` has N entries whose
first M pair with ``singular_values`` and ``u_adjoint(y)`` has M entries, so
``A x = u_apply(singular_values * v_adjoint(x)[:M])``. DFT-based factors are
complex; consumers take the real part of image-space results.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import numpy as np
import scipy.fft
import scipy.linalg
from scipy.sparse.linalg import LinearOperator as ScipyLinearOperator
from scipy.sparse.linalg import cg

from .checksum import calculate_checksum
from .errors import (
    CapabilityError,
    ConvergenceError,
    DomainError,
    FormatError,
    ShapeMismatchError,
    SingularSystemError,
)
from .io import make_rng


logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]

DEFAULT_SOLVE_TOL = 1e-8


class SolveMethod(Enum):
    """How kernel_solve inverts (c*A*A^T + sigma2*I)."""
    AUTO = "auto"
    DIRECT = "direct"
    ITERATIVE = "iterative"


@dataclass(frozen=True)
class SvdFactors:
    """Implicit SVD A = U diag(singular_values) V^H."""
    singular_values: np.ndarray
    u_apply: Callable[[np.ndarray], np.ndarray]
    u_adjoint: Callable[[np.ndarray], np.ndarray]
    v_apply: Callable[[np.ndarray], np.ndarray]
    v_adjoint: Callable[[np.ndarray], np.ndarray]
    implicit_dft: bool = False

    @property
    def rank_dim(self) -> int:
        return int(self.singular_values.size)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Apply A through the factors."""
        coef = self.v_adjoint(x)[: self.rank_dim]
        return np.real(self.u_apply(self.singular_values * coef))


# ---------------------------------------------------------------------------
# Descriptors
# ---------------------------------------------------------------------------

# values kept verbatim: file paths and hex digests
_TEXT_PARAMS = frozenset({"kernel", "kernel_xxh64"})


def _parse_value(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


@dataclass(frozen=True)
class OperatorDescriptor:
    """Kind plus parameters, enough to rebuild an operator exactly.

    Text form: ``kind[:key=value,...]``, e.g. ``cs:ratio=0.05,block=32,seed=7``.
    """
    kind: str
    params: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "OperatorDescriptor":
        text = text.strip()
        if not text:
            raise DomainError("empty operator descriptor")
        kind, _, rest = text.partition(":")
        params: Dict[str, Any] = {}
        for item in filter(None, (part.strip() for part in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep or not key.strip():
                raise DomainError(f"bad operator parameter '{item}' in '{text}'")
            key, value = key.strip(), value.strip()
            params[key] = value if key in _TEXT_PARAMS else _parse_value(value)
        kind = kind.strip().lower()
        if kind not in OPERATOR_KINDS:
            raise DomainError(f"unknown operator kind '{kind}'; choose from {sorted(OPERATOR_KINDS)}")
        return cls(kind=kind, params=params)

    def format(self) -> str:
        simple = {k: v for k, v in self.params.items() if not isinstance(v, (list, tuple))}
        if not simple:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={v}" for k, v in simple.items())

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OperatorDescriptor":
        try:
            return cls(kind=str(data["kind"]), params=dict(data.get("params", {})))
        except (KeyError, TypeError) as e:
            raise FormatError(f"invalid operator descriptor record: {data!r}") from e


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------

class LinearOperator(ABC):
    """
    Abstract linear operator A: R^N -> R^M.

    Subclasses implement ``_apply`` and ``_adjoint`` on correctly shaped
    arrays; operators with closed-form kernel solves override
    ``_solve_exact`` and set ``exact_kernel_solve``.
    """

    has_svd: bool = False
    exact_kernel_solve: bool = False

    def __init__(self, input_shape: Shape, output_shape: Shape):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.output_shape = tuple(int(d) for d in output_shape)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.output_shape))

    @property
    def descriptor(self) -> OperatorDescriptor:
        return OperatorDescriptor(kind=self.kind, params=self._params())

    @property
    @abstractmethod
    def kind(self) -> str:
        ...

    def _params(self) -> Dict[str, Any]:
        return {}

    def __repr__(self) -> str:
        shapes = f"{self.input_shape}->{self.output_shape}"
        return f"{type(self).__name__}({self.descriptor.format()}, {shapes})"

    # -- shape handling -----------------------------------------------------

    @staticmethod
    def _conform(x: np.ndarray, shape: Shape, what: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape == shape:
            return x
        if x.ndim == 1 and x.size == int(np.prod(shape)):
            return x.reshape(shape)
        raise ShapeMismatchError(what, shape, x.shape)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Compute A x."""
        return self._apply(self._conform(x, self.input_shape, f"{self.kind} apply"))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """Compute A^T y."""
        return self._adjoint(self._conform(y, self.output_shape, f"{self.kind} adjoint"))

    def gram(self, v: np.ndarray) -> np.ndarray:
        """Compute A A^T v in measurement space."""
        return self.apply(self.adjoint(v))

    @abstractmethod
    def _apply(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        ...

    # -- kernel solve -------------------------------------------------------

    def kernel_solve(
        self,
        c: float,
        sigma2: float,
        r: np.ndarray,
        method: Union[str, SolveMethod] = SolveMethod.AUTO,
        tol: float = DEFAULT_SOLVE_TOL,
        maxiter: Optional[int] = None,
    ) -> np.ndarray:
        """
        Solve (c*A*A^T + sigma2*I) v = r.

        Args:
            c: Nonnegative scale of A A^T
            sigma2: Nonnegative diagonal shift
            r: Right-hand side in measurement space
            method: 'auto' (closed form when available), 'direct' or 'iterative'
            tol: Relative residual tolerance of the iterative path
            maxiter: Iteration cap of the iterative path (default 10*M)

        Returns:
            v with the shape of r

        Raises:
            DomainError: If c or sigma2 is negative
            SingularSystemError: If c = sigma2 = 0 or the closed form divides by zero
            ConvergenceError: If conjugate gradients stalls
            CapabilityError: If 'direct' is requested without a closed form
        """
        if c < 0 or sigma2 < 0:
            raise DomainError(f"kernel_solve needs c >= 0 and sigma2 >= 0, got c={c}, sigma2={sigma2}")
        if c == 0 and sigma2 == 0:
            raise SingularSystemError("kernel system is zero (c = sigma2 = 0)")

        r = self._conform(r, self.output_shape, f"{self.kind} kernel_solve")
        if c == 0:
            return r / sigma2

        method = SolveMethod(method)
        if method is SolveMethod.AUTO:
            method = SolveMethod.DIRECT if self.exact_kernel_solve else SolveMethod.ITERATIVE
        if method is SolveMethod.DIRECT:
            if not self.exact_kernel_solve:
                raise CapabilityError(f"{self.kind} operator has no closed-form kernel solve")
            return self._solve_exact(float(c), float(sigma2), r)
        return self._solve_iterative(float(c), float(sigma2), r, tol, maxiter)

    def _solve_exact(self, c: float, sigma2: float, r: np.ndarray) -> np.ndarray:
        raise CapabilityError(f"{self.kind} operator has no closed-form kernel solve")

    def _solve_iterative(
        self, c: float, sigma2: float, r: np.ndarray, tol: float, maxiter: Optional[int]
    ) -> np.ndarray:
        m = self.output_dim
        shape = self.output_shape
        maxiter = 10 * m if maxiter is None else maxiter

        def matvec(v: np.ndarray) -> np.ndarray:
            v = np.asarray(v).reshape(shape)
            return (c * self.gram(v) + sigma2 * v).ravel()

        system = ScipyLinearOperator((m, m), matvec=matvec, dtype=np.float64)
        rhs = r.ravel()
        iterations = 0

        def count(_xk: np.ndarray) -> None:
            nonlocal iterations
            iterations += 1

        v, info = cg(system, rhs, rtol=tol, atol=0.0, maxiter=maxiter, callback=count)
        residual = float(np.linalg.norm(matvec(v) - rhs))
        scale = float(np.linalg.norm(rhs)) or 1.0
        if info != 0 or not np.all(np.isfinite(v)):
            raise ConvergenceError(
                f"conjugate gradients did not converge for {self.kind} "
                f"(info={info}, iterations={iterations}, relative residual={residual / scale:.3e})",
                iterations=iterations,
                residual=residual / scale,
            )
        logger.debug(f"CG kernel solve on {self.kind}: {iterations} iterations, "
                     f"relative residual {residual / scale:.2e}")
        return v.reshape(shape)

    # -- SVD / dense ----------------------------------------------------------

    def svd_factors(self) -> SvdFactors:
        """Return implicit SVD factors or raise CapabilityError."""
        raise CapabilityError(f"{self.kind} operator does not expose SVD factors")

    def to_dense(self) -> np.ndarray:
        """Materialize A as an (M, N) matrix by probing basis vectors."""
        n = self.input_dim
        dense = np.empty((self.output_dim, n), dtype=np.float64)
        basis = np.zeros(n)
        for j in range(n):
            basis[j] = 1.0
            dense[:, j] = self.apply(basis.reshape(self.input_shape)).ravel()
            basis[j] = 0.0
        return dense


def _image_shape(shape: Shape) -> Tuple[int, int, int]:
    if len(shape) != 3 or min(shape) < 1:
        raise DomainError(f"image operators need an (H, W, C) shape, got {shape}")
    return int(shape[0]), int(shape[1]), int(shape[2])


def _flat_identity_factors(shape: Shape, values: np.ndarray) -> SvdFactors:
    def to_flat(a: np.ndarray) -> np.ndarray:
        return np.asarray(a).ravel()

    def to_shape(a: np.ndarray) -> np.ndarray:
        return np.asarray(a).reshape(shape)

    return SvdFactors(values, u_apply=to_shape, u_adjoint=to_flat, v_apply=to_shape, v_adjoint=to_flat)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

class IdentityOperator(LinearOperator):
    """A = I (denoising)."""

    has_svd = True
    exact_kernel_solve = True
    kind = "identity"

    def __init__(self, shape: Shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()

    def _solve_exact(self, c, sigma2, r):
        return r / (c + sigma2)

    def svd_factors(self):
        return _flat_identity_factors(self.input_shape, np.ones(self.input_dim))


class MaskOperator(LinearOperator):
    """Pixel selection (inpainting); the mask is shared by all channels."""

    has_svd = True
    exact_kernel_solve = True
    kind = "mask"

    def __init__(self, shape: Shape, keep: np.ndarray, params: Optional[Dict[str, Any]] = None):
        H, W, C = _image_shape(shape)
        keep = np.asarray(keep, dtype=bool)
        if keep.shape == (H, W):
            keep = np.broadcast_to(keep[:, :, None], (H, W, C))
        if keep.shape != (H, W, C):
            raise ShapeMismatchError("mask", (H, W, C), keep.shape)
        count = int(keep.sum())
        if count == 0:
            raise DomainError("mask keeps no pixels")
        super().__init__((H, W, C), (count,))
        self.keep = np.array(keep)
        self.keep.setflags(write=False)
        self._param_record = dict(params or {})

    @classmethod
    def random(cls, shape: Shape, keep: float = 0.5, seed: int = 0) -> "MaskOperator":
        """Keep round(keep*H*W) pixel positions chosen by a seeded permutation."""
        H, W, _ = _image_shape(shape)
        if not 0.0 < keep <= 1.0:
            raise DomainError(f"mask keep fraction must be in (0, 1], got {keep}")
        count = max(1, int(round(keep * H * W)))
        order = make_rng(seed).permutation(H * W)
        flat = np.zeros(H * W, dtype=bool)
        flat[order[:count]] = True
        return cls(shape, flat.reshape(H, W), params={"keep": keep, "seed": int(seed)})

    def _params(self):
        return dict(self._param_record)

    def _apply(self, x):
        return x[self.keep]

    def _adjoint(self, y):
        out = np.zeros(self.input_shape)
        out[self.keep] = y
        return out

    def _solve_exact(self, c, sigma2, r):
        return r / (c + sigma2)

    def svd_factors(self):
        keep = self.keep
        m = self.output_dim
        shape = self.input_shape

        def v_adjoint(x):
            x = np.asarray(x).reshape(shape)
            return np.concatenate([x[keep], x[~keep]])

        def v_apply(z):
            z = np.asarray(z)
            out = np.zeros(shape, dtype=z.dtype)
            out[keep] = z[:m]
            out[~keep] = z[m:]
            return out

        return SvdFactors(
            np.ones(m),
            u_apply=lambda s: np.asarray(s).reshape(self.output_shape),
            u_adjoint=lambda r: np.asarray(r).ravel(),
            v_apply=v_apply,
            v_adjoint=v_adjoint,
        )


class BlockCSOperator(LinearOperator):
    """
    Block-wise compressive sensing with orthonormal rows.

    Each channel is cut into ``block x block`` tiles; every tile is measured
    by the same matrix made of the first m = round(ratio * block^2) rows of
    an orthogonal matrix obtained by QR of a seeded standard-normal matrix.
    Output shape is (C, H/block, W/block, m).
    """

    has_svd = True
    exact_kernel_solve = True
    kind = "cs"

    def __init__(self, shape: Shape, ratio: float, block: int = 32, seed: int = 0):
        H, W, C = _image_shape(shape)
        if not 0.0 < ratio <= 1.0:
            raise DomainError(f"cs ratio must be in (0, 1], got {ratio}")
        if block < 1 or H % block or W % block:
            raise DomainError(f"image {H}x{W} is not divisible into {block}x{block} blocks")
        n = block * block
        m = max(1, int(round(ratio * n)))

        gaussian = make_rng(seed).standard_normal((n, n))
        q, r = np.linalg.qr(gaussian)
        # fix the QR sign ambiguity so the basis depends only on the seed
        q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
        basis = q.T.copy()
        basis.setflags(write=False)

        self.ratio = float(ratio)
        self.block = int(block)
        self.seed = int(seed)
        self.basis = basis
        self.rows = basis[:m]
        self.n = n
        self.m = m
        super().__init__((H, W, C), (C, H // block, W // block, m))

    def _params(self):
        return {"ratio": self.ratio, "block": self.block, "seed": self.seed}

    def _to_blocks(self, x):
        H, W, C = self.input_shape
        b = self.block
        tiles = x.reshape(H // b, b, W // b, b, C).transpose(4, 0, 2, 1, 3)
        return tiles.reshape(C, H // b, W // b, b * b)

    def _from_blocks(self, blocks):
        H, W, C = self.input_shape
        b = self.block
        return blocks.reshape(C, H // b, W // b, b, b).transpose(1, 3, 2, 4, 0).reshape(H, W, C)

    def _apply(self, x):
        return self._to_blocks(x) @ self.rows.T

    def _adjoint(self, y):
        return self._from_blocks(y @ self.rows)

    def _solve_exact(self, c, sigma2, r):
        return r / (c + sigma2)

    def svd_factors(self):
        m = self.m
        lead = self.output_shape

        def v_adjoint(x):
            coef = self._to_blocks(np.asarray(x).reshape(self.input_shape)) @ self.basis.T
            return np.concatenate([coef[..., :m].ravel(), coef[..., m:].ravel()])

        def v_apply(z):
            z = np.asarray(z)
            head = z[: self.output_dim].reshape(lead)
            tail = z[self.output_dim:].reshape(lead[:-1] + (self.n - m,))
            coef = np.concatenate([head, tail], axis=-1)
            return self._from_blocks(coef @ self.basis)

        return SvdFactors(
            np.ones(self.output_dim),
            u_apply=lambda s: np.asarray(s).reshape(lead),
            u_adjoint=lambda r: np.asarray(r).ravel(),
            v_apply=v_apply,
            v_adjoint=v_adjoint,
        )


class AvgPoolOperator(LinearOperator):
    """Average pooling by an integer factor s (SVD-capable downsampler)."""

    has_svd = True
    exact_kernel_solve = True
    kind = "avgpool"

    def __init__(self, shape: Shape, factor: int = 4):
        H, W, C = _image_shape(shape)
        if factor < 1 or H % factor or W % factor:
            raise DomainError(f"image {H}x{W} is not divisible by pooling factor {factor}")
        self.factor = int(factor)
        super().__init__((H, W, C), (H // factor, W // factor, C))

    def _params(self):
        return {"factor": self.factor}

    def _to_blocks(self, x):
        H, W, C = self.input_shape
        s = self.factor
        cells = x.reshape(H // s, s, W // s, s, C).transpose(0, 2, 4, 1, 3)
        return cells.reshape(H // s, W // s, C, s * s)

    def _from_blocks(self, blocks):
        H, W, C = self.input_shape
        s = self.factor
        return blocks.reshape(H // s, W // s, C, s, s).transpose(0, 3, 1, 4, 2).reshape(H, W, C)

    def _apply(self, x):
        return self._to_blocks(x).mean(axis=-1)

    def _adjoint(self, y):
        n = self.factor ** 2
        return self._from_blocks(np.repeat(y[..., None] / n, n, axis=-1))

    def _solve_exact(self, c, sigma2, r):
        return r / (c / self.factor ** 2 + sigma2)

    def svd_factors(self):
        # first Helmert row is the normalized block indicator, so sigma = 1/s
        helmert = scipy.linalg.helmert(self.factor ** 2, full=True)
        lead = self.output_shape
        m = self.output_dim

        def v_adjoint(x):
            coef = self._to_blocks(np.asarray(x).reshape(self.input_shape)) @ helmert.T
            return np.concatenate([coef[..., 0].ravel(), coef[..., 1:].ravel()])

        def v_apply(z):
            z = np.asarray(z)
            head = z[:m].reshape(lead + (1,))
            tail = z[m:].reshape(lead + (helmert.shape[0] - 1,))
            return self._from_blocks(np.concatenate([head, tail], axis=-1) @ helmert)

        return SvdFactors(
            np.full(m, 1.0 / self.factor),
            u_apply=lambda s: np.asarray(s).reshape(lead),
            u_adjoint=lambda r: np.asarray(r).ravel(),
            v_apply=v_apply,
            v_adjoint=v_adjoint,
        )


class CircularBlurOperator(LinearOperator):
    """
    Periodic convolution with a fixed kernel, applied per channel.

    The kernel is normalized to sum 1 and centered on pixel (0, 0), so the
    operator is diagonal in the 2-D DFT basis.
    """

    has_svd = True
    exact_kernel_solve = True

    def __init__(self, shape: Shape, kernel: np.ndarray, kind: str = "blur",
                 params: Optional[Dict[str, Any]] = None):
        H, W, C = _image_shape(shape)
        kernel = np.asarray(kernel, dtype=np.float64)
        if kernel.ndim != 2 or kernel.size == 0:
            raise DomainError(f"blur kernel must be a non-empty 2-D array, got shape {kernel.shape}")
        kh, kw = kernel.shape
        if kh > H or kw > W:
            raise DomainError(f"kernel {kh}x{kw} larger than image {H}x{W}")
        total = kernel.sum()
        if not np.isfinite(total) or total <= 0:
            raise DomainError("blur kernel must have a positive finite sum")
        kernel = kernel / total

        padded = np.zeros((H, W))
        padded[:kh, :kw] = kernel
        padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        self.kernel = kernel
        self.transfer = scipy.fft.fft2(padded)
        self._kind = kind
        self._param_record = dict(params or {})
        super().__init__((H, W, C), (H, W, C))

    @property
    def kind(self):
        return self._kind

    def _params(self):
        return dict(self._param_record)

    def _filter(self, x, response):
        spectrum = scipy.fft.fft2(x, axes=(0, 1)) * response[:, :, None]
        return np.real(scipy.fft.ifft2(spectrum, axes=(0, 1)))

    def _apply(self, x):
        return self._filter(x, self.transfer)

    def _adjoint(self, y):
        return self._filter(y, np.conj(self.transfer))

    def _solve_exact(self, c, sigma2, r):
        denom = c * np.abs(self.transfer) ** 2 + sigma2
        if np.any(denom == 0):
            raise SingularSystemError(f"{self.kind} kernel has zeros in its spectrum and sigma2 = 0")
        return self._filter(r, 1.0 / denom)

    def svd_factors(self):
        shape = self.input_shape
        magnitude = np.abs(self.transfer)
        phase = np.where(magnitude > 0, self.transfer / np.where(magnitude > 0, magnitude, 1.0), 1.0)
        phase3 = phase[:, :, None]
        values = np.broadcast_to(magnitude[:, :, None], shape).ravel().copy()

        def v_adjoint(x):
            return scipy.fft.fft2(np.asarray(x).reshape(shape), axes=(0, 1), norm="ortho").ravel()

        def v_apply(z):
            return scipy.fft.ifft2(np.asarray(z).reshape(shape), axes=(0, 1), norm="ortho")

        def u_apply(s):
            return scipy.fft.ifft2(phase3 * np.asarray(s).reshape(shape), axes=(0, 1), norm="ortho")

        def u_adjoint(r):
            spectrum = scipy.fft.fft2(np.asarray(r).reshape(shape), axes=(0, 1), norm="ortho")
            return (np.conj(phase3) * spectrum).ravel()

        return SvdFactors(values, u_apply=u_apply, u_adjoint=u_adjoint, v_apply=v_apply,
                          v_adjoint=v_adjoint, implicit_dft=True)


def gaussian_kernel(size: int = 5, std: float = 10.0) -> np.ndarray:
    """Separable normalized Gaussian kernel of odd or even size."""
    if size < 1 or std <= 0:
        raise DomainError(f"gaussian kernel needs size >= 1 and std > 0, got size={size}, std={std}")
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    profile = np.exp(-(offsets ** 2) / (2.0 * std ** 2))
    kernel = np.outer(profile, profile)
    return kernel / kernel.sum()


def load_kernel_file(path: Union[str, Path]) -> np.ndarray:
    """
    Read a plain-text kernel: first line "K_H K_W", then K_H rows of K_W reals.

    Raises:
        FormatError: If the header or any row is malformed
    """
    path = Path(path)
    lines = [line for line in path.read_text().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"{path}: empty kernel file")
    try:
        kh, kw = (int(v) for v in lines[0].split())
    except ValueError as e:
        raise FormatError(f"{path}: header must be 'K_H K_W', got '{lines[0]}'") from e
    if kh < 1 or kw < 1:
        raise FormatError(f"{path}: kernel dimensions must be positive")
    rows = lines[1:]
    if len(rows) != kh:
        raise FormatError(f"{path}: expected {kh} kernel rows, found {len(rows)}")
    try:
        values = [[float(v) for v in row.split()] for row in rows]
    except ValueError as e:
        raise FormatError(f"{path}: non-numeric kernel entry") from e
    if any(len(row) != kw for row in values):
        raise FormatError(f"{path}: every kernel row needs {kw} values")
    return np.array(values, dtype=np.float64)


def _keys_cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = (x <= 1)
    far = (x > 1) & (x < 2)
    out = np.zeros_like(x)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def bicubic_matrix(size: int, factor: int) -> np.ndarray:
    """
    (size/factor, size) antialiased bicubic downsampling matrix, periodic.

    Output sample i sits at input coordinate (i + 0.5) * factor - 0.5; the
    Keys kernel is stretched by ``factor`` and each row normalized to sum 1.
    """
    out_size = size // factor
    matrix = np.zeros((out_size, size))
    reach = 2 * factor
    for i in range(out_size):
        center = (i + 0.5) * factor - 0.5
        taps = np.arange(math.floor(center - reach), math.ceil(center + reach) + 1)
        weights = _keys_cubic((taps - center) / factor)
        np.add.at(matrix[i], taps % size, weights)
        matrix[i] /= matrix[i].sum()
    return matrix


class BicubicOperator(LinearOperator):
    """Separable bicubic downsampling (no SVD; kernel solves use CG)."""

    kind = "bicubic"

    def __init__(self, shape: Shape, factor: int = 4):
        H, W, C = _image_shape(shape)
        if factor < 1 or H % factor or W % factor:
            raise DomainError(f"image {H}x{W} is not divisible by scale factor {factor}")
        self.factor = int(factor)
        self.rows_matrix = bicubic_matrix(H, factor)
        self.cols_matrix = bicubic_matrix(W, factor)
        super().__init__((H, W, C), (H // factor, W // factor, C))

    def _params(self):
        return {"factor": self.factor}

    def _apply(self, x):
        return np.einsum("ih,hwc,jw->ijc", self.rows_matrix, x, self.cols_matrix)

    def _adjoint(self, y):
        return np.einsum("ih,ijc,jw->hwc", self.rows_matrix, y, self.cols_matrix)


class DenseOperator(LinearOperator):
    """Explicit matrix operator, used by the analytic lab and as an oracle."""

    exact_kernel_solve = True
    kind = "dense"

    def __init__(self, matrix: np.ndarray, input_shape: Optional[Shape] = None,
                 params: Optional[Dict[str, Any]] = None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DomainError(f"dense operator needs a 2-D matrix, got shape {matrix.shape}")
        m, n = matrix.shape
        input_shape = (n,) if input_shape is None else tuple(input_shape)
        if int(np.prod(input_shape)) != n:
            raise ShapeMismatchError("dense input", (n,), input_shape)
        self.matrix = matrix
        self.has_svd = m <= n
        self._param_record = dict(params or {})
        super().__init__(input_shape, (m,))

    @classmethod
    def random(cls, rows: int, input_shape: Shape, seed: int = 0) -> "DenseOperator":
        """Seeded standard-normal matrix scaled by 1/sqrt(N)."""
        n = int(np.prod(input_shape))
        matrix = make_rng(seed).standard_normal((rows, n)) / math.sqrt(n)
        return cls(matrix, input_shape, params={"rows": int(rows), "seed": int(seed)})

    def _params(self):
        return dict(self._param_record)

    def _apply(self, x):
        return self.matrix @ x.ravel()

    def _adjoint(self, y):
        return (self.matrix.T @ y).reshape(self.input_shape)

    def _solve_exact(self, c, sigma2, r):
        system = c * (self.matrix @ self.matrix.T) + sigma2 * np.eye(self.output_dim)
        try:
            return scipy.linalg.solve(system, r, assume_a="pos")
        except np.linalg.LinAlgError as e:
            raise SingularSystemError(f"dense kernel system is not positive definite: {e}") from e

    def svd_factors(self):
        if not self.has_svd:
            raise CapabilityError("dense operator with more rows than columns has no SVD factors here")
        u, s, vt = np.linalg.svd(self.matrix, full_matrices=True)
        shape = self.input_shape
        return SvdFactors(
            s,
            u_apply=lambda z: u @ np.asarray(z),
            u_adjoint=lambda r: u.T @ np.asarray(r),
            v_apply=lambda z: (vt.T @ np.asarray(z)).reshape(shape),
            v_adjoint=lambda x: vt @ np.asarray(x).ravel(),
        )

    def to_dense(self):
        return self.matrix.copy()


# ---------------------------------------------------------------------------
# Construction from descriptors
# ---------------------------------------------------------------------------

OPERATOR_KINDS = {
    "identity", "mask", "cs", "gaussian_blur", "motion_blur", "avgpool", "bicubic", "dense",
}


def _require(params: Dict[str, Any], key: str, default: Any = None) -> Any:
    if key in params:
        return params[key]
    if default is None:
        raise DomainError(f"operator parameter '{key}' is required")
    return default


def build_operator(
    descriptor: Union[str, OperatorDescriptor, Dict[str, Any]],
    image_shape: Shape,
    base_dir: Optional[Path] = None,
) -> LinearOperator:
    """
    Reconstruct an operator from its descriptor and the image shape.

    Args:
        descriptor: Text form, OperatorDescriptor or its dict record
        image_shape: (H, W, C) of the unknown image
        base_dir: Directory for resolving relative kernel paths

    Returns:
        LinearOperator whose ``descriptor`` carries every parameter used
    """
    if isinstance(descriptor, str):
        descriptor = OperatorDescriptor.parse(descriptor)
    elif isinstance(descriptor, dict):
        descriptor = OperatorDescriptor.from_dict(descriptor)
    p = descriptor.params
    kind = descriptor.kind
    shape = tuple(int(d) for d in image_shape)

    if kind == "identity":
        return IdentityOperator(shape)
    if kind == "mask":
        return MaskOperator.random(shape, keep=float(_require(p, "keep", 0.5)),
                                   seed=int(_require(p, "seed", 0)))
    if kind == "cs":
        return BlockCSOperator(shape, ratio=float(_require(p, "ratio")),
                               block=int(_require(p, "block", 32)), seed=int(_require(p, "seed", 0)))
    if kind == "gaussian_blur":
        size = int(_require(p, "size", 5))
        std = float(_require(p, "std", 10.0))
        return CircularBlurOperator(shape, gaussian_kernel(size, std), kind=kind,
                                    params={"size": size, "std": std})
    if kind == "motion_blur":
        return _build_motion_blur(p, shape, base_dir)
    if kind == "avgpool":
        return AvgPoolOperator(shape, factor=int(_require(p, "factor", 4)))
    if kind == "bicubic":
        return BicubicOperator(shape, factor=int(_require(p, "factor", 4)))
    if kind == "dense":
        return DenseOperator.random(int(_require(p, "rows")), shape, seed=int(_require(p, "seed", 0)))
    raise DomainError(f"unknown operator kind '{kind}'")


def _build_motion_blur(
    params: Dict[str, Any], shape: Shape, base_dir: Optional[Path]
) -> LinearOperator:
    record: Dict[str, Any] = {}
    if "kernel_values" in params:
        kernel = np.asarray(params["kernel_values"], dtype=np.float64)
        for key in ("kernel", "kernel_xxh64"):
            if key in params:
                record[key] = params[key]
    else:
        kernel_path = Path(str(_require(params, "kernel")))
        if base_dir is not None and not kernel_path.is_absolute():
            kernel_path = Path(base_dir) / kernel_path
        kernel = load_kernel_file(kernel_path)
        digest = calculate_checksum(kernel_path)
        expected = params.get("kernel_xxh64")
        if expected and expected != digest:
            raise FormatError(f"kernel file {kernel_path} changed (xxh64 {digest} != {expected})")
        record = {"kernel": str(kernel_path), "kernel_xxh64": digest}
    record["kernel_values"] = kernel.tolist()
    return CircularBlurOperator(shape, kernel, kind="motion_blur", params=record)
