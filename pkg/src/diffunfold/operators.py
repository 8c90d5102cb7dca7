"""Linear forward models ``y = A x + e`` with exact adjoints.

All operators accept leading batch axes in front of ``input_shape`` (and
``output_shape`` for the adjoint).  Images are channel-first ``(C, H, W)``;
complex MRI images use a two-channel ``(re, im)`` layout and k-space data a
trailing ``(re, im)`` axis, so every map is real-linear and its adjoint is
the transpose with respect to the real inner product.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import Rng, as_real_view, from_real_view

__all__ = [
    "LinearOperator", "IdentityOperator", "DenseOperator", "BlurOperator",
    "SuperResOperator", "InpaintOperator", "MRIOperator", "Measurement", "MaskSpec",
    "CoilMaps", "apply", "adjoint", "data_fidelity_gradient", "measure",
    "make_gaussian_blur", "make_superres", "make_inpainting", "make_mri", "make_mask",
    "make_coil_maps", "estimate_normal_norm", "operator_to_blob", "operator_from_blob",
    "save_operator", "load_operator", "OperatorFormatError",
]

CENTER_FRACTION = 0.08


class OperatorFormatError(ValueError):
    """Raised for malformed or corrupted operator blobs."""


def _check_trailing(x: np.ndarray, shape: tuple[int, ...], what: str) -> None:
    n = len(shape)
    if x.ndim < n or tuple(x.shape[x.ndim - n:]) != tuple(shape):
        raise ValueError(f"{what}: expected trailing shape {shape}, got {x.shape}")


class LinearOperator:
    kind = "abstract"

    def __init__(self, input_shape, output_shape):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.output_shape = tuple(int(s) for s in output_shape)

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x)
        _check_trailing(x, self.input_shape, f"{self.kind}.apply")
        return self._apply(x)

    def adjoint(self, u) -> np.ndarray:
        u = np.asarray(u)
        _check_trailing(u, self.output_shape, f"{self.kind}.adjoint")
        return self._adjoint(u)

    def normal(self, x) -> np.ndarray:
        """``A^T A x``."""
        x = np.asarray(x)
        _check_trailing(x, self.input_shape, f"{self.kind}.normal")
        return self._normal(x)

    def _normal(self, x):
        return self._adjoint(self._apply(x))

    def output_support(self) -> np.ndarray | None:
        """Boolean mask (broadcastable to ``output_shape``) of entries A can reach."""
        return None

    # -- serialization hooks
    def _meta(self) -> dict:
        return {"input_shape": list(self.input_shape), "output_shape": list(self.output_shape)}

    def _arrays(self) -> dict[str, np.ndarray]:
        return {}

    @cached_property
    def op_id(self) -> str:
        return f"{self.kind}-{hashlib.sha1(operator_to_blob(self)).hexdigest()[:16]}"

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.input_shape} -> {self.output_shape})"


class IdentityOperator(LinearOperator):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return x.copy()

    _adjoint = _apply
    _normal = _apply


class DenseOperator(LinearOperator):
    """Explicit matrix acting on length-n inputs; ``input_shape`` may give the
    inputs an image layout (flattened in C order)."""

    kind = "dense"

    def __init__(self, matrix, input_shape=None):
        m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        shape = (m.shape[1],) if input_shape is None else tuple(int(s) for s in input_shape)
        if int(np.prod(shape)) != m.shape[1]:
            raise ValueError(f"input shape {shape} does not match a matrix with {m.shape[1]} columns")
        super().__init__(shape, (m.shape[0],))
        self.matrix = m

    def _apply(self, x):
        flat = x.reshape(x.shape[:x.ndim - len(self.input_shape)] + (-1,))
        return flat @ self.matrix.T.astype(x.dtype, copy=False)

    def _adjoint(self, u):
        out = u @ self.matrix.astype(u.dtype, copy=False)
        return out.reshape(u.shape[:-1] + self.input_shape)

    def _arrays(self):
        return {"matrix": self.matrix}


class BlurOperator(LinearOperator):
    """Circular convolution with a centred kernel, diagonal in the 2-D DFT."""

    kind = "blur"

    def __init__(self, kernel, shape, params: dict | None = None):
        shape = tuple(shape)
        super().__init__(shape, shape)
        kernel = np.asarray(kernel, dtype=np.float64)
        h, w = shape[-2:]
        kh, kw = kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("blur kernel extents must be odd")
        if kh > h or kw > w:
            raise ValueError(f"kernel {kernel.shape} larger than image {shape}")
        self.kernel = kernel
        self.params = dict(params or {})
        pad = np.zeros((h, w))
        pad[:kh, :kw] = kernel
        pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
        self._rspec = np.fft.rfft2(pad)

    @property
    def spectrum(self) -> np.ndarray:
        """Full (H, W) eigenvalues of the operator on the DFT basis."""
        h, w = self.input_shape[-2:]
        kh, kw = self.kernel.shape
        pad = np.zeros((h, w))
        pad[:kh, :kw] = self.kernel
        return np.fft.fft2(np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1)))

    def _filter(self, x, spec):
        s = self.input_shape[-2:]
        out = np.fft.irfft2(np.fft.rfft2(x) * spec, s=s)
        return out.astype(x.dtype, copy=False)

    def _apply(self, x):
        return self._filter(x, self._rspec)

    def _adjoint(self, u):
        return self._filter(u, np.conj(self._rspec))

    def _normal(self, x):
        return self._filter(x, np.abs(self._rspec) ** 2)

    def _meta(self):
        return {**super()._meta(), "params": self.params}

    def _arrays(self):
        return {"kernel": self.kernel}


class SuperResOperator(LinearOperator):
    """Non-overlapping ``factor x factor`` block averaging."""

    kind = "superres"

    def __init__(self, factor: int, shape):
        shape = tuple(shape)
        factor = int(factor)
        if factor < 1 or shape[-1] % factor or shape[-2] % factor:
            raise ValueError(f"factor {factor} does not divide image extents {shape[-2:]}")
        out = (*shape[:-2], shape[-2] // factor, shape[-1] // factor)
        super().__init__(shape, out)
        self.factor = factor

    def _apply(self, x):
        f = self.factor
        *lead, h, w = x.shape
        return x.reshape(*lead, h // f, f, w // f, f).mean(axis=(-3, -1))

    def _adjoint(self, u):
        f = self.factor
        return np.repeat(np.repeat(u, f, axis=-2), f, axis=-1) / (f * f)

    def _meta(self):
        return {**super()._meta(), "factor": self.factor}


class InpaintOperator(LinearOperator):
    """Diagonal 0/1 mask; the output keeps the image layout with zeros at drops."""

    kind = "inpaint"

    def __init__(self, mask, shape, spec: "MaskSpec | None" = None):
        shape = tuple(shape)
        super().__init__(shape, shape)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape[-2:]:
            raise ValueError(f"mask shape {mask.shape} does not match image {shape}")
        self.mask = mask
        self.spec = spec
        self._m = mask.astype(np.float64)

    @property
    def kept_fraction(self) -> float:
        return float(self.mask.mean())

    def _apply(self, x):
        return x * self._m.astype(x.dtype, copy=False)

    _adjoint = _apply
    _normal = _apply

    def output_support(self):
        return self.mask

    def _meta(self):
        meta = super()._meta()
        if self.spec is not None:
            meta["spec"] = self.spec.to_dict()
        return meta

    def _arrays(self):
        return {"mask": self.mask.astype(np.uint8)}


@dataclass(frozen=True)
class CoilMaps:
    maps: np.ndarray  # complex (n_coils, H, W)

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


class MRIOperator(LinearOperator):
    """``A = M F S``: coil sensitivities, unitary centred 2-D FFT, k-space mask.

    Input ``(2, H, W)`` real (re, im channels); output ``(n_coils, H, W, 2)``.
    """

    kind = "mri"

    def __init__(self, coils: CoilMaps, mask, spec: "MaskSpec | None" = None):
        maps = np.asarray(coils.maps, dtype=np.complex128)
        nc, h, w = maps.shape
        super().__init__((2, h, w), (nc, h, w, 2))
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ValueError(f"k-space mask {mask.shape} does not match image ({h}, {w})")
        self.coils = CoilMaps(maps)
        self.mask = mask
        self.spec = spec

    @property
    def sampling_fraction(self) -> float:
        return float(self.mask.mean())

    def _apply(self, x):
        cdt = np.complex64 if x.dtype == np.float32 else np.complex128
        z = (x[..., 0, :, :] + 1j * x[..., 1, :, :]).astype(cdt)
        coil = self.coils.maps.astype(cdt) * z[..., None, :, :]
        k = np.fft.fftshift(np.fft.fft2(coil, norm="ortho"), axes=(-2, -1))
        k = k * self.mask
        return as_real_view(k.astype(cdt))

    def _adjoint(self, u):
        k = from_real_view(u) * self.mask
        img = np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho")
        z = (np.conj(self.coils.maps).astype(img.dtype) * img).sum(axis=-3)
        out = np.stack([z.real, z.imag], axis=-3)
        return out.astype(u.dtype, copy=False)

    def output_support(self):
        return np.broadcast_to(self.mask[None, :, :, None], self.output_shape)

    def _meta(self):
        meta = super()._meta()
        if self.spec is not None:
            meta["spec"] = self.spec.to_dict()
        return meta

    def _arrays(self):
        return {"coils_re": self.coils.maps.real.copy(), "coils_im": self.coils.maps.imag.copy(),
                "mask": self.mask.astype(np.uint8)}


# -- free functions -----------------------------------------------------------

def apply(op: LinearOperator, x) -> np.ndarray:
    return op.apply(x)


def adjoint(op: LinearOperator, u) -> np.ndarray:
    return op.adjoint(u)


@dataclass
class Measurement:
    y: np.ndarray
    sigma_y: float
    operator_id: str


def data_fidelity_gradient(op: LinearOperator, x, meas: Measurement) -> np.ndarray:
    """Gradient of ``0.5 * ||A x - y||^2``, i.e. ``A^T (A x - y)``."""
    y = np.asarray(meas.y)
    _check_trailing(y, op.output_shape, "data_fidelity_gradient: y")
    return op.adjoint(op.apply(x) - y)


def measure(op: LinearOperator, x, sigma_y: float, rng: Rng) -> Measurement:
    """``y = A x + sigma_y * n``; noise is confined to the operator's support."""
    if sigma_y < 0:
        raise ValueError(f"sigma_y must be non-negative, got {sigma_y}")
    x = np.asarray(x)
    y = op.apply(x)
    if sigma_y > 0:
        noise = rng.normal(y.shape).astype(y.dtype, copy=False)
        support = op.output_support()
        if support is not None:
            noise = noise * support
        y = y + sigma_y * noise
    return Measurement(y=y, sigma_y=float(sigma_y), operator_id=op.op_id)


def estimate_normal_norm(op: LinearOperator, n_iter: int = 50, seed: int = 0) -> float:
    """Power-iteration estimate of ``||A^T A||_2``."""
    v = Rng(seed).normal(op.input_shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(n_iter):
        w = op.normal(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


# -- factories ----------------------------------------------------------------

def make_gaussian_blur(size: int, sigma1: float, sigma2: float, angle: float = 0.0, *,
                       shape) -> BlurOperator:
    """(An)isotropic Gaussian blur; ``angle`` rotates the ``sigma1`` axis (radians)."""
    size = int(size)
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError("blur sigmas must be positive")
    r = np.arange(size) - size // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * (u / sigma1) ** 2 - 0.5 * (v / sigma2) ** 2)
    k /= k.sum()
    params = {"size": size, "sigma1": float(sigma1), "sigma2": float(sigma2), "angle": float(angle)}
    return BlurOperator(k, shape, params)


def make_superres(factor: int, *, shape) -> SuperResOperator:
    return SuperResOperator(factor, shape)


@dataclass(frozen=True)
class MaskSpec:
    """Sampling-mask recipe.  ``acceleration`` applies to MRI patterns,
    ``drop_p`` to the dust pattern."""

    pattern: str
    acceleration: float = 1.0
    drop_p: float = 0.0
    seed: int = 0

    PATTERNS = ("uniform1d", "gaussian1d", "gaussian2d", "dust")

    def __post_init__(self):
        if self.pattern not in self.PATTERNS:
            raise ValueError(f"unknown mask pattern {self.pattern!r}")
        if self.pattern == "dust" and not 0.0 <= self.drop_p < 1.0:
            raise ValueError(f"drop probability must lie in [0, 1), got {self.drop_p}")
        if self.pattern != "dust" and self.acceleration < 1.0:
            raise ValueError(f"acceleration must be >= 1, got {self.acceleration}")

    @property
    def target_fraction(self) -> float:
        return self.drop_p if self.pattern == "dust" else 1.0 / self.acceleration

    def to_dict(self) -> dict:
        return {"pattern": self.pattern, "acceleration": self.acceleration,
                "drop_p": self.drop_p, "seed": int(self.seed)}


def _center_band(w: int) -> np.ndarray:
    width = max(1, int(round(CENTER_FRACTION * w)))
    start = w // 2 - width // 2
    cols = np.zeros(w, dtype=bool)
    cols[start:start + width] = True
    return cols


def _dilate3(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                out |= np.roll(mask, (dy, dx), axis=(0, 1))
    return out


def make_mask(spec: MaskSpec, shape) -> np.ndarray:
    """Boolean (H, W) keep-mask built deterministically from ``spec.seed``.

    dust: i.i.d. seeds at rate ``1 - (1 - p)**(1/9)`` whose periodic 3x3
    dilation is dropped, so the expected dropped fraction is exactly p.
    uniform1d: every ``acceleration``-th column plus the centre band.
    gaussian1d / gaussian2d: centre-weighted draws without replacement until
    ``1/acceleration`` of the columns / points are kept (1-D always keeps
    the centre band).
    """
    h, w = int(shape[-2]), int(shape[-1])
    rng = Rng(spec.seed)
    if spec.pattern == "dust":
        if spec.drop_p == 0:
            return np.ones((h, w), dtype=bool)
        seed_rate = 1.0 - (1.0 - spec.drop_p) ** (1.0 / 9.0)
        seeds = rng.uniform(size=(h, w)) < seed_rate
        return ~_dilate3(seeds)
    if spec.pattern == "uniform1d":
        step = max(1, int(round(spec.acceleration)))
        cols = (np.arange(w) % step == 0) | _center_band(w)
        return np.broadcast_to(cols, (h, w)).copy()
    if spec.pattern == "gaussian1d":
        cols = _center_band(w)
        target = max(int(round(w / spec.acceleration)), int(cols.sum()))
        free = np.flatnonzero(~cols)
        dens = np.exp(-0.5 * ((free - w / 2) / (w / 5)) ** 2)
        extra = rng.choice(free.size, size=target - int(cols.sum()), replace=False, p=dens / dens.sum())
        cols[free[extra]] = True
        return np.broadcast_to(cols, (h, w)).copy()
    # gaussian2d
    target = max(1, int(round(h * w / spec.acceleration)))
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dens = np.exp(-0.5 * (((yy - h / 2) / (h / 5)) ** 2 + ((xx - w / 2) / (w / 5)) ** 2)).ravel()
    pick = rng.choice(h * w, size=target, replace=False, p=dens / dens.sum())
    m = np.zeros(h * w, dtype=bool)
    m[pick] = True
    return m.reshape(h, w)


def make_inpainting(drop_p: float, shape, rng: Rng) -> InpaintOperator:
    if not 0.0 <= drop_p < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {drop_p}")
    spec = MaskSpec("dust", drop_p=float(drop_p), seed=rng.spawn_seed())
    return InpaintOperator(make_mask(spec, shape), shape, spec)


def make_coil_maps(shape, n_coils: int, rng: Rng, flat: bool = False) -> CoilMaps:
    """Smooth sensitivities: Gaussian magnitude around a ring of coil centres
    times a bilinear-polynomial phase, normalised so sum_c |S_c|^2 = 1."""
    if n_coils < 1:
        raise ValueError(f"n_coils must be >= 1, got {n_coils}")
    h, w = int(shape[-2]), int(shape[-1])
    if flat:
        return CoilMaps(np.full((n_coils, h, w), 1.0 / np.sqrt(n_coils), dtype=np.complex128))
    yn, xn = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    maps = np.empty((n_coils, h, w), dtype=np.complex128)
    for c in range(n_coils):
        a = 2 * np.pi * c / n_coils
        cy, cx = 1.2 * np.sin(a), 1.2 * np.cos(a)
        mag = np.exp(-((yn - cy) ** 2 + (xn - cx) ** 2) / (2 * 0.8 ** 2))
        p = rng.uniform(-np.pi / 2, np.pi / 2, size=4)
        phase = p[0] + p[1] * xn + p[2] * yn + p[3] * xn * yn
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    return CoilMaps(maps)


def make_mri(image_shape, n_coils: int, mask: MaskSpec, rng: Rng, flat_coils: bool = False) -> MRIOperator:
    if n_coils < 1:
        raise ValueError(f"n_coils must be >= 1, got {n_coils}")
    h, w = int(image_shape[-2]), int(image_shape[-1])
    coils = make_coil_maps((h, w), n_coils, rng, flat=flat_coils)
    return MRIOperator(coils, make_mask(mask, (h, w)), mask)


# -- blob I/O -----------------------------------------------------------------

_MAGIC = b"DUOP"
_VERSION = 1
_KIND_TAGS = {"identity": 0, "dense": 1, "blur": 2, "superres": 3, "inpaint": 4, "mri": 5}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u1")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("uint8"): 1}


def operator_to_blob(op: LinearOperator) -> bytes:
    """DUOP container: magic, u16 version, u8 kind tag, JSON metadata,
    little-endian arrays, trailing CRC32."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HB", _VERSION, _KIND_TAGS[op.kind]))
    meta = json.dumps(op._meta(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    arrays = op._arrays()
    buf.write(struct.pack("<H", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        arr = arr.astype(np.float64 if arr.dtype.kind == "f" else np.uint8)
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes(order="C")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def operator_from_blob(blob: bytes) -> LinearOperator:
    if len(blob) < 15 or blob[:4] != _MAGIC:
        raise OperatorFormatError("not a DUOP operator blob")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise OperatorFormatError("operator blob checksum mismatch")
    version, tag = struct.unpack_from("<HB", body, 4)
    if version != _VERSION:
        raise OperatorFormatError(f"unsupported operator blob version {version}")
    if tag not in _TAG_KINDS:
        raise OperatorFormatError(f"unknown operator kind tag {tag}")
    pos = 7
    (mlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    meta = json.loads(body[pos:pos + mlen].decode())
    pos += mlen
    (n,) = struct.unpack_from("<H", body, pos)
    pos += 2
    arrays = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nl].decode()
        pos += nl
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape)) * dt.itemsize or pos + nbytes > len(body):
            raise OperatorFormatError(f"array {name!r} has inconsistent length")
        arrays[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    kind = _TAG_KINDS[tag]
    in_shape = tuple(meta["input_shape"])
    spec = MaskSpec(**meta["spec"]) if "spec" in meta else None
    if kind == "identity":
        return IdentityOperator(in_shape)
    if kind == "dense":
        return DenseOperator(arrays["matrix"], in_shape)
    if kind == "blur":
        return BlurOperator(arrays["kernel"], in_shape, meta.get("params"))
    if kind == "superres":
        return SuperResOperator(meta["factor"], in_shape)
    if kind == "inpaint":
        return InpaintOperator(arrays["mask"].astype(bool), in_shape, spec)
    maps = arrays["coils_re"] + 1j * arrays["coils_im"]
    return MRIOperator(CoilMaps(maps), arrays["mask"].astype(bool), spec)


def save_operator(path, op: LinearOperator) -> None:
    with open(path, "wb") as f:
        f.write(operator_to_blob(op))


def load_operator(path) -> LinearOperator:
    with open(path, "rb") as f:
        return operator_from_blob(f.read())
