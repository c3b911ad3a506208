"""Channel sets: synthesis, file I/O, estimation-error perturbation, features.

Antenna flattening is row-major over the RIS grid: the element in row ``h``
and column ``w`` (both zero-based) has index ``n = W_ris * h + w``. The
featurizer and :func:`ris_muxer.precoding.phase_vector` use the same order.

The synthetic scenario stands in for a ray-traced one. It keeps the two
properties the phase optimizer relies on: the BS-RIS channel has rank >= 2
(line of sight plus one specular reflection), and channels of neighbouring
RIS elements are strongly correlated (planar wavefronts).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import numerics
from .seeding import make_rng

SPEED_OF_LIGHT = 299_792_458.0
FORMAT_VERSION = 1


class ChannelError(ValueError):
    pass


class ChannelFormatError(ChannelError):
    """Malformed channel file. Carries the byte offset and the field involved."""

    def __init__(self, message: str, offset: int, field: str):
        self.offset = offset
        self.field = field
        super().__init__(f"{message} (byte offset {offset}, field {field!r})")


@dataclass(frozen=True)
class ChannelSet:
    """One sample: ``H`` (N x M, BS->RIS), ``G`` (U x N, RIS->users), ``D`` (U x M, direct)."""

    H: np.ndarray
    G: np.ndarray
    D: np.ndarray
    ris_shape: tuple[int, int]

    def __post_init__(self):
        h_ris, w_ris = self.ris_shape
        n, m = self.H.shape
        u = self.G.shape[0]
        if n != h_ris * w_ris:
            raise ChannelError(f"H has {n} rows but the RIS grid {self.ris_shape} has {h_ris * w_ris} elements")
        if self.G.shape != (u, n) or self.D.shape != (u, m):
            raise ChannelError(f"inconsistent shapes H{self.H.shape} G{self.G.shape} D{self.D.shape}")

    @property
    def users(self) -> int:
        return self.G.shape[0]

    @property
    def bs_antennas(self) -> int:
        return self.H.shape[1]

    @property
    def ris_elements(self) -> int:
        return self.H.shape[0]


@dataclass
class ChannelDataset:
    """Samples sharing one BS-RIS channel ``H``.

    ``G`` is stacked as (S, U, N) and ``D`` as (S, U, M); ``splits`` holds a
    tag per sample ("train" or "test").
    """

    H: np.ndarray
    G: np.ndarray
    D: np.ndarray
    ris_shape: tuple[int, int]
    splits: np.ndarray = field(default=None)

    def __post_init__(self):
        self.H = numerics.as_complex(self.H)
        self.G = numerics.as_complex(self.G)
        self.D = numerics.as_complex(self.D)
        self.ris_shape = (int(self.ris_shape[0]), int(self.ris_shape[1]))
        s = self.G.shape[0]
        if self.splits is None:
            self.splits = np.array(["train"] * s)
        self.splits = np.asarray(self.splits, dtype=str)
        n, m = self.H.shape
        if self.ris_shape[0] * self.ris_shape[1] != n:
            raise ChannelError(f"H has {n} rows but RIS grid is {self.ris_shape}")
        if self.G.ndim != 3 or self.G.shape[2] != n or self.D.shape != (s, self.G.shape[1], m):
            raise ChannelError(f"inconsistent shapes H{self.H.shape} G{self.G.shape} D{self.D.shape}")
        if self.splits.shape != (s,):
            raise ChannelError("one split tag per sample is required")

    def __len__(self) -> int:
        return self.G.shape[0]

    def __getitem__(self, i: int) -> ChannelSet:
        return ChannelSet(self.H, self.G[i], self.D[i], self.ris_shape)

    def __iter__(self) -> Iterator[ChannelSet]:
        return (self[i] for i in range(len(self)))

    @property
    def users(self) -> int:
        return self.G.shape[1]

    @property
    def bs_antennas(self) -> int:
        return self.H.shape[1]

    def subset(self, index) -> "ChannelDataset":
        index = np.asarray(index)
        return ChannelDataset(self.H, self.G[index], self.D[index], self.ris_shape, self.splits[index])

    def split(self, tag: str) -> "ChannelDataset":
        idx = np.flatnonzero(self.splits == tag)
        if idx.size == 0:
            raise ChannelError(f"dataset has no samples tagged {tag!r}")
        return self.subset(idx)

    def equals(self, other: "ChannelDataset") -> bool:
        return (
            self.ris_shape == other.ris_shape
            and np.array_equal(self.H, other.H)
            and np.array_equal(self.G, other.G)
            and np.array_equal(self.D, other.D)
            and np.array_equal(self.splits, other.splits)
        )


Vec3 = tuple[float, float, float]


class ChannelSpec(BaseModel):
    """Synthetic scenario. Positions in metres, spacings in wavelengths."""

    model_config = ConfigDict(extra="forbid")

    users: int = Field(2, ge=1)
    bs_antennas: int = Field(9, ge=1)
    ris_shape: tuple[int, int] = (16, 16)
    carrier_hz: float = Field(5.8e9, gt=0)
    bs_spacing: float = Field(0.5, gt=0)
    ris_spacing: float = Field(0.25, gt=0)
    bs_position: Vec3 = (0.0, 0.0, 10.0)
    ris_position: Vec3 = (30.0, 15.0, 10.0)
    # mirror image of the BS in the wall behind it; gives the second H path
    bs_image_position: Vec3 = (0.0, -20.0, 10.0)
    reflection_gain: float = Field(0.6, gt=0)
    direct_reflector: Vec3 = (45.0, -5.0, 5.0)
    direct_fraction: float = Field(1e-2, ge=0)
    diffuse_fraction: float = Field(0.0, ge=0)
    user_area: tuple[tuple[float, float], tuple[float, float]] = ((20.0, 40.0), (-5.0, 10.0))
    user_height: float = 1.5
    min_user_distance: float = Field(2.0, ge=0)
    n_train: int = Field(5000, ge=0)
    n_test: int = Field(1024, ge=0)

    @field_validator("ris_shape")
    @classmethod
    def _positive_grid(cls, v):
        if v[0] < 1 or v[1] < 1:
            raise ValueError("RIS grid dimensions must be >= 1")
        return v

    @model_validator(mode="after")
    def _check(self):
        side = int(round(np.sqrt(self.bs_antennas)))
        if side * side != self.bs_antennas:
            raise ValueError(f"bs_antennas={self.bs_antennas} is not a square number; the BS array is sqrt(M) x sqrt(M)")
        if self.n_train + self.n_test < 1:
            raise ValueError("sample count must be >= 1")
        return self

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def bs_element_offsets(spec: ChannelSpec) -> np.ndarray:
    """(M, 3) offsets of the BS array, a square grid in the y-z plane."""
    side = int(round(np.sqrt(spec.bs_antennas)))
    d = spec.bs_spacing * spec.wavelength
    idx = np.arange(side) - (side - 1) / 2
    yy, zz = np.meshgrid(idx, idx, indexing="ij")
    off = np.zeros((spec.bs_antennas, 3))
    off[:, 1] = yy.reshape(-1) * d
    off[:, 2] = zz.reshape(-1) * d
    return off


def ris_element_offsets(spec: ChannelSpec) -> np.ndarray:
    """(N, 3) offsets of the RIS elements in the x-z plane, row-major (row = height)."""
    h_ris, w_ris = spec.ris_shape
    d = spec.ris_spacing * spec.wavelength
    rows = np.arange(h_ris) - (h_ris - 1) / 2
    cols = np.arange(w_ris) - (w_ris - 1) / 2
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    off = np.zeros((h_ris * w_ris, 3))
    off[:, 0] = cc.reshape(-1) * d
    off[:, 2] = -rr.reshape(-1) * d
    return off


def _path_gain(distance, wavelength):
    return wavelength / (4.0 * np.pi * distance) * np.exp(-2j * np.pi * distance / wavelength)


def _planar_path(src, dst, src_offsets, dst_offsets, wavelength, depart_dir=None):
    """Rank-one planar-wavefront channel (len(dst_offsets) x len(src_offsets))."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    dist = np.linalg.norm(dst - src)
    k = 2.0 * np.pi / wavelength
    arrive = _unit(dst - src)
    depart = arrive if depart_dir is None else _unit(np.asarray(depart_dir, float))
    a_dst = np.exp(-1j * k * (dst_offsets @ arrive))
    a_src = np.exp(1j * k * (src_offsets @ depart))
    return _path_gain(dist, wavelength) * np.outer(a_dst, a_src)


def bs_ris_channel(spec: ChannelSpec) -> np.ndarray:
    """Line of sight plus one specular reflection off the wall behind the BS."""
    lam = spec.wavelength
    bs_off = bs_element_offsets(spec)
    ris_off = ris_element_offsets(spec)
    los = _planar_path(spec.bs_position, spec.ris_position, bs_off, ris_off, lam)
    image = np.asarray(spec.bs_image_position, float)
    bs = np.asarray(spec.bs_position, float)
    # departure direction at the real BS is the image ray mirrored across the wall
    wall_normal = _unit(bs - image)
    ray = _unit(np.asarray(spec.ris_position, float) - image)
    depart = ray - 2.0 * (ray @ wall_normal) * wall_normal
    refl = _planar_path(image, spec.ris_position, bs_off, ris_off, lam, depart_dir=depart)
    return los + spec.reflection_gain * refl


def _draw_users(spec: ChannelSpec, rng: np.random.Generator) -> np.ndarray:
    (x0, x1), (y0, y1) = spec.user_area
    for _ in range(10_000):
        pos = np.column_stack([
            rng.uniform(x0, x1, spec.users),
            rng.uniform(y0, y1, spec.users),
            np.full(spec.users, spec.user_height),
        ])
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.linalg.norm(diff, axis=-1)
        off_diag = ~np.eye(spec.users, dtype=bool)
        if spec.users == 1 or dist[off_diag].min() >= spec.min_user_distance:
            return pos
    raise ChannelError("could not place users with the requested minimum separation")


def synthesize_dataset(spec: ChannelSpec, seed: int) -> ChannelDataset:
    lam = spec.wavelength
    k = 2.0 * np.pi / lam
    ris = np.asarray(spec.ris_position, float)
    bs = np.asarray(spec.bs_position, float)
    refl = np.asarray(spec.direct_reflector, float)
    ris_off = ris_element_offsets(spec)
    bs_off = bs_element_offsets(spec)
    H = bs_ris_channel(spec)

    count = spec.n_train + spec.n_test
    U, N, M = spec.users, H.shape[0], spec.bs_antennas
    G = np.empty((count, U, N), dtype=np.complex128)
    D = np.empty((count, U, M), dtype=np.complex128)
    rng = make_rng(seed, "synthesize")
    a_bs_refl = np.exp(1j * k * (bs_off @ _unit(refl - bs)))
    d_bs_refl = np.linalg.norm(refl - bs)
    for s in range(count):
        users = _draw_users(spec, rng)
        for u in range(U):
            to_user = users[u] - ris
            dist = np.linalg.norm(to_user)
            steer = np.exp(1j * k * (ris_off @ _unit(to_user)))
            g = _path_gain(dist, lam) * steer
            if spec.diffuse_fraction > 0:
                scale = np.sqrt(spec.diffuse_fraction / 2.0) * lam / (4.0 * np.pi * dist)
                g = g + scale * (rng.standard_normal(N) + 1j * rng.standard_normal(N))
            G[s, u] = g
            d_total = d_bs_refl + np.linalg.norm(users[u] - refl)
            D[s, u] = _path_gain(d_total, lam) * a_bs_refl
    if spec.direct_fraction > 0:
        # reference: mean per-entry power of the cascaded channel G Phi H under
        # uniformly random phases, i.e. N * E|g|^2 * E|h|^2
        ref = N * np.mean(np.abs(G) ** 2) * np.mean(np.abs(H) ** 2)
        D *= np.sqrt(spec.direct_fraction * ref / np.mean(np.abs(D) ** 2))
    else:
        D[:] = 0.0
    splits = np.array(["train"] * spec.n_train + ["test"] * spec.n_test)
    return ChannelDataset(H, G, D, spec.ris_shape, splits)


# -- file format ------------------------------------------------------------
#
# JSON lines, UTF-8:
#   line 1: {"format_version": 1, "U":.., "M":.., "N":.., "W_ris":.., "H_ris":.., "sample_count":..}
#   line 2: {"H": [[re, im], ...]}                       N*M pairs, row-major
#   then one line per sample:
#           {"split": "train", "G": [[re, im], ...], "D": [[re, im], ...]}
# Floats are written with repr(), which round-trips doubles exactly.

_HEADER_KEYS = ("format_version", "U", "M", "N", "W_ris", "H_ris", "sample_count")


def _pairs(a: np.ndarray) -> list:
    flat = a.reshape(-1)
    return [[float(z.real), float(z.imag)] for z in flat]


def save_dataset(ds: ChannelDataset, path) -> None:
    h_ris, w_ris = ds.ris_shape
    header = {
        "format_version": FORMAT_VERSION,
        "U": ds.users,
        "M": ds.bs_antennas,
        "N": ds.H.shape[0],
        "W_ris": w_ris,
        "H_ris": h_ris,
        "sample_count": len(ds),
    }
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        fh.write(json.dumps({"H": _pairs(ds.H)}) + "\n")
        for s in range(len(ds)):
            rec = {"split": str(ds.splits[s]), "G": _pairs(ds.G[s]), "D": _pairs(ds.D[s])}
            fh.write(json.dumps(rec) + "\n")


def _decode_matrix(obj, key, shape, offset) -> np.ndarray:
    if key not in obj:
        raise ChannelFormatError("missing matrix", offset, key)
    arr = obj[key]
    size = shape[0] * shape[1]
    if not isinstance(arr, list) or len(arr) != size:
        raise ChannelFormatError(f"expected {size} [re, im] pairs", offset, key)
    try:
        a = np.array(arr, dtype=np.float64)
    except (TypeError, ValueError):
        raise ChannelFormatError("entries must be numeric [re, im] pairs", offset, key) from None
    if a.shape != (size, 2):
        raise ChannelFormatError("entries must be [re, im] pairs", offset, key)
    if not np.all(np.isfinite(a)):
        raise ChannelFormatError("non-finite entry", offset, key)
    return (a[:, 0] + 1j * a[:, 1]).reshape(shape)


def load_dataset(path) -> ChannelDataset:
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    offsets = np.cumsum([0] + [len(x) + 1 for x in lines]).tolist()

    def parse(i: int, field: str):
        if i >= len(lines) or not lines[i].strip():
            raise ChannelFormatError("unexpected end of file", min(offsets[i] if i < len(offsets) else len(raw), len(raw)), field)
        try:
            obj = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise ChannelFormatError(f"invalid JSON: {exc.msg}", offsets[i] + exc.pos, field) from None
        except UnicodeDecodeError:
            raise ChannelFormatError("invalid UTF-8", offsets[i], field) from None
        if not isinstance(obj, dict):
            raise ChannelFormatError("expected a JSON object", offsets[i], field)
        return obj

    header = parse(0, "header")
    for key in _HEADER_KEYS:
        if key not in header or not isinstance(header[key], int) or isinstance(header[key], bool):
            raise ChannelFormatError("missing or non-integer header entry", offsets[0], key)
    if header["format_version"] != FORMAT_VERSION:
        raise ChannelFormatError(f"unsupported format version {header['format_version']}", offsets[0], "format_version")
    U, M, N = header["U"], header["M"], header["N"]
    h_ris, w_ris, count = header["H_ris"], header["W_ris"], header["sample_count"]
    if N != h_ris * w_ris or min(U, M, N) < 1 or count < 0:
        raise ChannelFormatError("header dimensions are inconsistent", offsets[0], "N")

    H = _decode_matrix(parse(1, "H"), "H", (N, M), offsets[1])
    G = np.empty((count, U, N), dtype=np.complex128)
    D = np.empty((count, U, M), dtype=np.complex128)
    splits = []
    for s in range(count):
        rec = parse(2 + s, "G")
        G[s] = _decode_matrix(rec, "G", (U, N), offsets[2 + s])
        D[s] = _decode_matrix(rec, "D", (U, M), offsets[2 + s])
        tag = rec.get("split", "train")
        if not isinstance(tag, str):
            raise ChannelFormatError("split must be a string", offsets[2 + s], "split")
        splits.append(tag)
    tail = b"\n".join(lines[2 + count:]).strip()
    if tail:
        raise ChannelFormatError("trailing data after the last sample", offsets[2 + count], "sample_count")
    return ChannelDataset(H, G, D, (h_ris, w_ris), np.array(splits, dtype=str))


# -- estimation error -------------------------------------------------------

def _cn_noise(rng: np.random.Generator, shape, std) -> np.ndarray:
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def perturb_arrays(G, D, gamma: float, rng: np.random.Generator, H=None):
    """Add CN(0, (gamma * mean|entry|)^2) error to each matrix of a stack.

    ``G`` and ``D`` may carry a leading sample axis; the scale is computed
    per matrix. ``H`` is only touched when given.
    """
    if gamma < 0:
        raise ChannelError("gamma must be >= 0")
    G = numerics.as_complex(G)
    D = numerics.as_complex(D)
    if gamma == 0:
        return G.copy(), D.copy(), None if H is None else numerics.as_complex(H).copy()
    sg = gamma * np.mean(np.abs(G), axis=(-2, -1), keepdims=True)
    sd = gamma * np.mean(np.abs(D), axis=(-2, -1), keepdims=True)
    G2 = G + _cn_noise(rng, G.shape, sg)
    D2 = D + _cn_noise(rng, D.shape, sd)
    H2 = None
    if H is not None:
        H = numerics.as_complex(H)
        H2 = H + _cn_noise(rng, H.shape, gamma * np.mean(np.abs(H)))
    return G2, D2, H2


def perturb(ds: ChannelDataset, gamma: float, seed: int, include_h: bool = False) -> ChannelDataset:
    rng = make_rng(seed, "perturb")
    G, D, H = perturb_arrays(ds.G, ds.D, gamma, rng, ds.H if include_h else None)
    return ChannelDataset(ds.H.copy() if H is None else H, G, D, ds.ris_shape, ds.splits.copy())


# -- features ---------------------------------------------------------------

def _amp_phase(z: np.ndarray):
    amp = np.abs(z)
    ph = np.angle(z)
    ph = np.where(amp == 0.0, 0.0, ph)
    ph = np.where(ph >= np.pi, ph - 2.0 * np.pi, ph)
    return amp, ph


def equivalent_direct(D, H) -> np.ndarray:
    """``J = D H^+`` (works on a stack of ``D``)."""
    return numerics.as_complex(D) @ numerics.pseudoinverse(H)


def build_features_batch(G, D, H, ris_shape) -> np.ndarray:
    """Feature tensor (S, 4U, H_ris, W_ris) for stacked ``G`` (S,U,N), ``D`` (S,U,M)."""
    G = numerics.as_complex(G)
    J = equivalent_direct(D, H)
    s, u, n = G.shape
    out = np.empty((s, 4 * u, n), dtype=np.float64)
    ga, gp = _amp_phase(G)
    ja, jp = _amp_phase(J)
    out[:, 0:2 * u:2] = ga
    out[:, 1:2 * u:2] = gp
    out[:, 2 * u::2] = ja
    out[:, 2 * u + 1::2] = jp
    return out.reshape(s, 4 * u, ris_shape[0], ris_shape[1])


def build_features(cs: ChannelSet) -> np.ndarray:
    return build_features_batch(cs.G[None], cs.D[None], cs.H, cs.ris_shape)[0]


def features_to_channels(features: np.ndarray, users: int):
    """Inverse of the amplitude/phase encoding: returns (G, J), each (U, N)."""
    f = features.reshape(4 * users, -1)
    G = f[0:2 * users:2] * np.exp(1j * f[1:2 * users:2])
    J = f[2 * users::2] * np.exp(1j * f[2 * users + 1::2])
    return G, J


def equivalent_channel_check(cs: ChannelSet, psi) -> float:
    """Relative residual ``||(G Phi + J) H - (G Phi H + D)||_F / ||G Phi H + D||_F``."""
    if numerics.rank(cs.H) < cs.bs_antennas:
        raise ChannelError("H is rank deficient; the equivalent form needs full column rank")
    phi = np.exp(1j * np.asarray(psi, float).reshape(-1))
    J = equivalent_direct(cs.D, cs.H)
    gphi = cs.G * phi[None, :]
    ref = gphi @ cs.H + cs.D
    alt = (gphi + J) @ cs.H
    den = np.linalg.norm(ref)
    if den == 0.0:
        return float(np.linalg.norm(alt))
    return float(np.linalg.norm(alt - ref) / den)


def random_channel_set(rng: np.random.Generator, users: int, bs_antennas: int, ris_shape: Sequence[int],
                       direct_scale: float = 1.0) -> ChannelSet:
    """i.i.d. CN(0, 1) channels; used for property tests and small probes."""
    n = ris_shape[0] * ris_shape[1]

    def cn(*shape):
        return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)

    return ChannelSet(cn(n, bs_antennas), cn(users, n), direct_scale * cn(users, bs_antennas),
                      (int(ris_shape[0]), int(ris_shape[1])))
