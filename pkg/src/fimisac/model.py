"""Scenario model: system constants, morphable array geometry, steering vectors,
user channels, SINR evaluation, and random scenario generation.

Angles are measured from the array axis (the x axis), so ``theta = pi/2`` is
broadside.  Each array element sits at ``(x_n, y_n)`` where ``x_n = d_x (n-1)``
is fixed and ``y_n`` is the reconfigurable transverse displacement limited to
``[y_min, y_max]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi

#: Half field of view used when drawing user path angles (rad).
USER_ANGLE_SPAN = math.pi / 3.0

#: User distance range in meters.
USER_DISTANCE_RANGE = (30.0, 80.0)


def dbm_to_watt(p_dbm: float) -> float:
    """Convert a dBm power level to watts."""
    return 10.0 ** ((p_dbm - 30.0) / 10.0)


def watt_to_dbm(p_watt: float) -> float:
    """Convert watts to dBm."""
    return 10.0 * math.log10(p_watt) + 30.0


def path_gain_amplitude(distance: float) -> float:
    """Amplitude of the distance-law path gain.

    The power gain is ``1e-3 * d**-2.2``; the returned amplitude is its
    square root.
    """
    return math.sqrt(1e-3 * distance ** -2.2)


def default_angle_std(n_tx: int, theta_bar: float) -> float:
    """Default prior standard deviation ``0.4 * 0.886 / (N_t cos(theta_bar))``."""
    return 0.4 * 0.886 / (n_tx * math.cos(theta_bar))


@dataclass(frozen=True)
class TargetPrior:
    """Gaussian prior on a target angle.

    Attributes
    ----------
    mean : float
        Prior mean angle in radians.
    std : float
        Prior standard deviation in radians (must be positive).
    """

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0.0:
            raise ValueError(f"prior std must be positive, got {self.std}")


def _default_reflection(distance: float = 50.0) -> complex:
    # |alpha_r|^2 follows the same distance law as user paths; zero phase.
    return complex(path_gain_amplitude(distance), 0.0)


@dataclass(frozen=True)
class SystemConfig:
    """All scenario constants for one ISAC setup.

    Derived quantities: ``wavenumber = 2 pi / wavelength`` and
    ``sinr_min = 2**rate_min - 1``.
    """

    n_tx: int = 8
    n_rx: int = 8
    n_users: int = 2
    block_len: int = 128
    wavelength: float = 0.01
    d_x: float = 0.005
    y_min: float = 0.0
    y_max: float = 0.02
    p_max: float = dbm_to_watt(26.0)
    noise_rx: float = dbm_to_watt(-80.0)
    noise_user: float = dbm_to_watt(-80.0)
    rate_min: float = 4.0
    alpha_r: complex = field(default_factory=_default_reflection)
    quad_order: int = 5
    seed: int = 0
    derivative_convention: str = "exact"
    targets: tuple[TargetPrior, ...] = ()

    def __post_init__(self):
        problems = config_problems(self)
        if problems:
            raise ValueError("; ".join(problems))
        if not self.targets:
            prior = TargetPrior(math.pi / 4.0,
                                default_angle_std(self.n_tx, math.pi / 4.0))
            object.__setattr__(self, "targets", (prior,))

    @property
    def wavenumber(self) -> float:
        """Wavenumber ``2 pi / wavelength`` (rad/m)."""
        return TWO_PI / self.wavelength

    @property
    def sinr_min(self) -> float:
        """SINR threshold ``2**rate_min - 1``."""
        return 2.0 ** self.rate_min - 1.0

    @property
    def morph_range(self) -> float:
        """Allowed transverse deformation span ``y_max - y_min`` (m)."""
        return self.y_max - self.y_min


def config_problems(config) -> list[str]:
    """Check the invariants of a :class:`SystemConfig`; return diagnostics."""
    problems = []
    if config.n_tx < 1:
        problems.append(f"n_tx must be >= 1, got {config.n_tx}")
    if config.n_rx < config.n_tx:
        problems.append(
            f"n_rx ({config.n_rx}) must be >= n_tx ({config.n_tx})")
    if config.n_users < 0:
        problems.append(f"n_users must be >= 0, got {config.n_users}")
    if config.block_len <= config.n_tx:
        problems.append(
            f"block_len ({config.block_len}) must exceed n_tx ({config.n_tx})")
    if not config.wavelength > 0.0:
        problems.append(f"wavelength must be positive, got {config.wavelength}")
    if not config.d_x > 0.0:
        problems.append(f"d_x must be positive, got {config.d_x}")
    if config.y_min > config.y_max:
        problems.append(
            f"y_min ({config.y_min}) must not exceed y_max ({config.y_max})")
    if not config.p_max > 0.0:
        problems.append(f"p_max must be positive, got {config.p_max}")
    if not config.noise_rx > 0.0:
        problems.append(f"noise_rx must be positive, got {config.noise_rx}")
    if not config.noise_user > 0.0:
        problems.append(f"noise_user must be positive, got {config.noise_user}")
    if config.rate_min < 0.0:
        problems.append(f"rate_min must be >= 0, got {config.rate_min}")
    if not 1 <= config.quad_order <= 50:
        problems.append(
            f"quad_order must be in [1, 50], got {config.quad_order}")
    if config.seed < 0:
        problems.append(f"seed must be >= 0, got {config.seed}")
    if config.derivative_convention not in ("exact", "flat"):
        problems.append(
            f"derivative_convention must be 'exact' or 'flat', "
            f"got {config.derivative_convention!r}")
    return problems


@dataclass(frozen=True)
class SurfaceShape:
    """Per-element transverse displacement vector of a morphable array."""

    y: np.ndarray

    def __post_init__(self):
        arr = np.array(self.y, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "y", arr)

    @classmethod
    def flat(cls, n: int, value: float = 0.0) -> "SurfaceShape":
        return cls(np.full(n, value))

    def __len__(self) -> int:
        return self.y.size


def shape_in_box(shape: SurfaceShape, y_min: float, y_max: float,
                 tol: float = 1e-12) -> bool:
    return bool(np.all(shape.y >= y_min - tol) and np.all(shape.y <= y_max + tol))


@dataclass(frozen=True)
class ArrayGeometry:
    """Element coordinates of a linear morphable array.

    ``x`` is the fixed ``d_x (n-1)`` grid; ``shape`` holds the transverse
    displacements; ``wavenumber`` is carried so steering vectors can be
    evaluated from the geometry alone.
    """

    x: np.ndarray
    shape: SurfaceShape
    wavenumber: float

    def __post_init__(self):
        arr = np.array(self.x, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "x", arr)
        if arr.size != len(self.shape):
            raise ValueError("x and shape length mismatch")
        if arr.size > 1:
            steps = np.diff(arr)
            if not np.all(steps > 0) or not np.allclose(steps, steps[0]):
                raise ValueError("x must be strictly increasing with constant step")

    @property
    def y(self) -> np.ndarray:
        return self.shape.y

    @property
    def size(self) -> int:
        return self.x.size


def linear_geometry(n: int, d_x: float, wavenumber: float,
                    shape: SurfaceShape | None = None) -> ArrayGeometry:
    """Linear array with ``x_n = d_x (n-1)`` and the given (default flat) shape."""
    if shape is None:
        shape = SurfaceShape.flat(n)
    return ArrayGeometry(d_x * np.arange(n), shape, wavenumber)


def tx_geometry(config: SystemConfig,
                shape: SurfaceShape | None = None) -> ArrayGeometry:
    if shape is None:
        shape = SurfaceShape.flat(config.n_tx, config.y_min)
    return linear_geometry(config.n_tx, config.d_x, config.wavenumber, shape)


def rx_geometry(config: SystemConfig,
                shape: SurfaceShape | None = None) -> ArrayGeometry:
    if shape is None:
        shape = SurfaceShape.flat(config.n_rx, config.y_min)
    return linear_geometry(config.n_rx, config.d_x, config.wavenumber, shape)


def steering(geom: ArrayGeometry, theta) -> np.ndarray:
    """Steering vector(s) ``exp(j delta (x cos(theta) + y sin(theta)))``.

    Parameters
    ----------
    geom : ArrayGeometry
    theta : float or array_like
        Angle(s) in radians.

    Returns
    -------
    ndarray
        ``(N,)`` for scalar ``theta``; ``(N, M)`` for an ``M``-vector of angles.
    """
    th = np.asarray(theta, dtype=float)
    phase = geom.wavenumber * (np.multiply.outer(geom.x, np.cos(th))
                               + np.multiply.outer(geom.y, np.sin(th)))
    return np.exp(1j * phase)


def steering_derivative(geom: ArrayGeometry, theta,
                        convention: str = "exact") -> np.ndarray:
    """Angle derivative of :func:`steering`.

    With ``convention='exact'`` entry ``n`` is
    ``j delta (-x_n sin(theta) + y_n cos(theta))`` times the steering entry.
    ``convention='flat'`` reproduces the flat-surface form
    ``-j delta x_n sin(theta) exp(j delta x_n cos(theta))``, which ignores the
    transverse displacements entirely.
    """
    th = np.asarray(theta, dtype=float)
    if convention == "exact":
        factor = geom.wavenumber * (np.multiply.outer(-geom.x, np.sin(th))
                                    + np.multiply.outer(geom.y, np.cos(th)))
        return 1j * factor * steering(geom, theta)
    if convention == "flat":
        phase = geom.wavenumber * np.multiply.outer(geom.x, np.cos(th))
        factor = geom.wavenumber * np.multiply.outer(-geom.x, np.sin(th))
        return 1j * factor * np.exp(1j * phase)
    raise ValueError(f"unknown derivative convention {convention!r}")


@dataclass(frozen=True)
class UserChannel:
    """Multipath downlink channel description for one user."""

    gains: np.ndarray
    angles: np.ndarray
    distance: float

    def __post_init__(self):
        g = np.array(self.gains, dtype=complex)
        a = np.array(self.angles, dtype=float)
        if g.size != a.size or g.size < 1:
            raise ValueError("gains and angles must have equal positive length")
        g.flags.writeable = False
        a.flags.writeable = False
        object.__setattr__(self, "gains", g)
        object.__setattr__(self, "angles", a)

    @property
    def n_paths(self) -> int:
        return self.gains.size


def channel_realize(user: UserChannel, tx_geom: ArrayGeometry) -> np.ndarray:
    """Realized channel ``h = sum_l gain_l a(y_t, theta_l)`` (length ``N_t``)."""
    return steering(tx_geom, user.angles) @ user.gains


@dataclass(frozen=True)
class BeamformerSet:
    """Dual-function beamformer: ``n_users`` communication columns followed by
    the sensing columns."""

    W: np.ndarray
    n_users: int

    def __post_init__(self):
        w = np.array(self.W, dtype=complex)
        if w.ndim != 2 or w.shape[1] < self.n_users:
            raise ValueError("beamformer must be N_t x (K + N_r) with K columns first")
        w.flags.writeable = False
        object.__setattr__(self, "W", w)

    @property
    def comm(self) -> np.ndarray:
        return self.W[:, :self.n_users]

    @property
    def sensing(self) -> np.ndarray:
        return self.W[:, self.n_users:]

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.W) ** 2))


def sinr(beams: BeamformerSet, h_k: np.ndarray, k: int,
         noise_power: float) -> float:
    """SINR of user ``k`` (0-based): ``|h^H w_k|^2`` over interference from all
    other columns plus noise."""
    if not 0 <= k < beams.n_users:
        raise IndexError(
            f"user index {k} out of range for {beams.n_users} users")
    proj = np.abs(h_k.conj() @ beams.W) ** 2
    return float(proj[k] / (proj.sum() - proj[k] + noise_power))


def all_sinrs(beams: BeamformerSet, channels, noise_power: float) -> np.ndarray:
    """SINR of every user given the realized channel list."""
    return np.array([sinr(beams, h, k, noise_power)
                     for k, h in enumerate(channels)])


def generate_scenario(config: SystemConfig, seed: int | None = None):
    """Draw ``K`` single-path users and return them with the configured targets.

    Each user comes from an independent child stream keyed by
    ``(seed, user index)``, so the first users of a larger-K scenario with the
    same seed coincide with the smaller-K scenario.  Distances are uniform in
    [30, 80] m, path angles uniform in [-pi/3, pi/3], gain amplitude follows
    :func:`path_gain_amplitude` with a uniformly random phase.
    """
    if seed is None:
        seed = config.seed
    users = []
    for k in range(config.n_users):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), k]))
        distance = rng.uniform(*USER_DISTANCE_RANGE)
        angle = rng.uniform(-USER_ANGLE_SPAN, USER_ANGLE_SPAN)
        phase = rng.uniform(0.0, TWO_PI)
        gain = path_gain_amplitude(distance) * np.exp(1j * phase)
        users.append(UserChannel(np.array([gain]), np.array([angle]), distance))
    return users, list(config.targets)


def with_sweep_value(config: SystemConfig, name: str, value) -> SystemConfig:
    """Return a copy of ``config`` with one swept quantity replaced.

    Supported names: ``R_th`` (bps/Hz), ``P_max_dBm``, ``K``, ``morph_range``
    (meters, keeps ``y_min``).
    """
    if name == "R_th":
        return replace(config, rate_min=float(value))
    if name == "P_max_dBm":
        return replace(config, p_max=dbm_to_watt(float(value)))
    if name == "K":
        return replace(config, n_users=int(value))
    if name == "morph_range":
        return replace(config, y_max=config.y_min + float(value))
    raise ValueError(f"unknown sweep variable {name!r}")
