"""Glucose-insulin ODE model (simplified UVA/Padova variant) plus CGM sensor layer.

The model has nine states integrated with fixed-step explicit Euler (dt = 1 min
by default) and three inputs: a carbohydrate rate, an insulin infusion rate and
a constant basal component baked into the insulin raster.

Units used throughout (grams and insulin units are converted at the scenario
boundary, see `scenario.rasterize`):

    G, IG          mg/dL       plasma / interstitial glucose
    Isc1, Isc2, Ip uU/mL       insulin compartment concentrations
    Qsto1..Qgut    mg/kg       carbohydrate masses per body weight
    X              1/min       insulin action
    CHO input      mg/(kg*min)
    insulin input  uU/(kg*min)
    VI'            mL/kg       insulin distribution volume (VI * 1000)

All functions here are pure; nothing mutates shared state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import IntegrationError, ValidationError

STATE_NAMES = ("G", "Isc1", "Isc2", "Ip", "Qsto1", "Qsto2", "Qgut", "X", "IG")
THETA_NAMES = ("Gb", "SG", "p2", "ka2", "kd", "kempt", "SI", "kabs")

# numerical floors applied after every Euler step
GLUCOSE_FLOOR = 1.0  # mg/dL, for G and IG
STATE_FLOOR = 0.0

_G, _ISC1, _ISC2, _IP, _QSTO1, _QSTO2, _QGUT, _X, _IG = range(9)


@dataclass(frozen=True)
class PhysioParams:
    """The eight patient-specific parameters inferred by the pipeline."""

    Gb: float      # basal glucose, mg/dL
    SG: float      # fractional glucose effectiveness, 1/min
    p2: float      # insulin action decay rate, 1/min
    ka2: float     # plasma absorption rate, 1/min
    kd: float      # non-monomeric -> monomeric insulin rate, 1/min
    kempt: float   # gastric emptying rate, 1/min
    SI: float      # insulin sensitivity, mL/(uU*min)
    kabs: float    # intestinal absorption rate, 1/min

    def __post_init__(self) -> None:
        for name in THETA_NAMES:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValidationError(f"parameter {name} must be finite and > 0, got {v}")
        if not 40.0 <= self.Gb <= 300.0:
            raise ValidationError(f"Gb must lie in [40, 300] mg/dL, got {self.Gb}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in THETA_NAMES], dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "PhysioParams":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (8,):
            raise ValidationError(f"expected 8 parameters, got shape {arr.shape}")
        return cls(**dict(zip(THETA_NAMES, arr.tolist())))


@dataclass(frozen=True)
class PopulationConstants:
    """Model constants kept fixed at population level.

    `Ipb` (basal plasma insulin, uU/mL) is derived from `basal_rate / (ke * VI')`
    when not given explicitly, so that the basal infusion is an equilibrium.
    """

    VI: float = 0.126          # insulin distribution volume, L/kg
    ke: float = 0.127          # insulin clearance rate, 1/min
    beta: float = 8.0          # insulin appearance delay, min
    f: float = 0.9             # fraction of absorbed glucose
    VG: float = 1.45           # glucose distribution volume, dL/kg
    alpha: float = 7.0         # plasma-to-interstitium delay, min
    BW: float = 70.0           # body weight, kg
    basal_rate: float = 190.0  # basal insulin infusion, uU/(kg*min)
    Ipb: float = field(default=0.0)

    def __post_init__(self) -> None:
        for name in ("VI", "ke", "beta", "f", "VG", "alpha", "BW", "basal_rate"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0.0:
                raise ValidationError(f"constant {name} must be finite and > 0, got {v}")
        if self.f > 1.0:
            raise ValidationError(f"f must be <= 1, got {self.f}")
        if self.Ipb == 0.0:
            object.__setattr__(self, "Ipb", self.basal_rate / (self.ke * self.VI_ml))
        elif self.Ipb < 0.0:
            raise ValidationError(f"Ipb must be >= 0, got {self.Ipb}")

    @property
    def VI_ml(self) -> float:
        """Insulin distribution volume in mL/kg, the unit used by the ODEs."""
        return self.VI * 1000.0

    def to_dict(self) -> dict:
        return {
            "VI": self.VI, "ke": self.ke, "beta": self.beta, "f": self.f,
            "VG": self.VG, "alpha": self.alpha, "BW": self.BW,
            "basal_rate": self.basal_rate, "Ipb": self.Ipb,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationConstants":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class SensorModel:
    """CGM reading model: CGM(t) = (a0 + a1*t + a2*t^2) * IG(t) + b0 + noise."""

    a0: float = 1.0
    a1: float = 0.0
    a2: float = 0.0
    b0: float = 0.0
    noise_sd: float = 2.0  # mg/dL

    def __post_init__(self) -> None:
        if self.noise_sd < 0.0:
            raise ValidationError(f"noise_sd must be >= 0, got {self.noise_sd}")

    def to_dict(self) -> dict:
        return {"a0": self.a0, "a1": self.a1, "a2": self.a2,
                "b0": self.b0, "noise_sd": self.noise_sd}

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        return cls(**{k: float(v) for k, v in d.items()})

    def noiseless(self) -> "SensorModel":
        return replace(self, noise_sd=0.0)


@dataclass(frozen=True)
class RhoConfig:
    """Low-glucose amplification of insulin action.

    rho(G) = 1 for G >= threshold; below it the multiplier grows as
    1 + strength * log(threshold / G)^2, capped at `cap`. Continuous and
    monotone non-increasing in G on (0, threshold].
    """

    threshold: float = 120.0  # mg/dL
    strength: float = 2.0
    cap: float = 10.0


DEFAULT_RHO = RhoConfig()


def rho(G, config: RhoConfig = DEFAULT_RHO):
    """Insulin-action multiplier active under hypoglycemia. Accepts scalars or arrays."""
    G_arr = np.asarray(G, dtype=float)
    if np.any(G_arr <= 0.0):
        raise ValidationError("rho requires G > 0")
    safe = np.where(G_arr < config.threshold, G_arr, config.threshold)
    amplified = 1.0 + config.strength * np.log(config.threshold / safe) ** 2
    out = np.where(G_arr >= config.threshold, 1.0, np.minimum(amplified, config.cap))
    return float(out) if np.isscalar(G) or getattr(G, "ndim", 1) == 0 else out


@dataclass
class Trajectory:
    """States on a uniform time grid; `states[k]` is the state at t0 + k*dt."""

    dt: float
    states: np.ndarray  # (n_steps + 1, 9)
    t0: float = 0.0

    @property
    def t_min(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])

    @property
    def horizon_min(self) -> float:
        return self.dt * (self.states.shape[0] - 1)

    def state_at(self, t: float) -> np.ndarray:
        idx = (t - self.t0) / self.dt
        k = int(round(idx))
        if abs(idx - k) > 1e-9 or not 0 <= k < self.states.shape[0]:
            raise ValidationError(f"t={t} is not on the trajectory grid")
        return self.states[k]


@dataclass
class CgmTrace:
    t_min: np.ndarray
    values: np.ndarray


def validate_state(x: np.ndarray) -> np.ndarray:
    """Check the nine-state invariants (non-negative, glucose >= 1 mg/dL)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (9,):
        raise ValidationError(f"state must have 9 components, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("state contains non-finite values")
    if np.any(x < 0.0):
        bad = STATE_NAMES[int(np.argmin(x))]
        raise ValidationError(f"state component {bad} is negative")
    if x[_G] < GLUCOSE_FLOOR or x[_IG] < GLUCOSE_FLOOR:
        raise ValidationError("G and IG must be >= 1 mg/dL")
    return x


def _rho_into(G: np.ndarray, cfg: RhoConfig, out: np.ndarray) -> np.ndarray:
    """rho(G) written into `out`, assuming G > 0 (enforced by the state floor)."""
    np.minimum(G, cfg.threshold, out=out)
    np.divide(cfg.threshold, out, out=out)
    np.log(out, out=out)
    np.square(out, out=out)
    out *= cfg.strength
    out += 1.0
    np.minimum(out, cfg.cap, out=out)
    return out


def _derivatives_batch(x: np.ndarray, theta: np.ndarray, c: PopulationConstants,
                       cho_rate, insulin_rate_delayed, rho_cfg: RhoConfig,
                       dx: np.ndarray | None = None,
                       scratch: np.ndarray | None = None) -> np.ndarray:
    """Vectorized time derivatives for a (B, 9) state block and (B, 8) parameters."""
    Gb, SG, p2, ka2, kd, kempt, SI, kabs = (theta[:, j] for j in range(8))
    G = x[:, _G]
    Isc1 = x[:, _ISC1]
    Isc2 = x[:, _ISC2]
    Ip = x[:, _IP]
    Qsto1 = x[:, _QSTO1]
    Qsto2 = x[:, _QSTO2]
    Qgut = x[:, _QGUT]
    X = x[:, _X]
    IG = x[:, _IG]

    if dx is None:
        dx = np.empty_like(x)
    if scratch is None:
        scratch = np.empty_like(G)
    Ra = c.f * kabs * Qgut

    _rho_into(G, rho_cfg, scratch)
    dx[:, _G] = -scratch * X * G - SG * (G - Gb) + Ra / c.VG
    dx[:, _ISC1] = -kd * Isc1 + insulin_rate_delayed / c.VI_ml
    dx[:, _ISC2] = kd * Isc1 - ka2 * Isc2
    dx[:, _IP] = ka2 * Isc2 - c.ke * Ip
    dx[:, _QSTO1] = -kempt * Qsto1 + cho_rate
    dx[:, _QSTO2] = kempt * Qsto1 - kempt * Qsto2
    dx[:, _QGUT] = kempt * Qsto2 - kabs * Qgut
    dx[:, _X] = -p2 * X + p2 * SI * (Ip - c.Ipb)
    dx[:, _IG] = -(IG - G) / c.alpha
    return dx


def derivatives(x: np.ndarray, theta: PhysioParams, c: PopulationConstants,
                cho_rate: float, insulin_rate_delayed: float,
                rho_cfg: RhoConfig = DEFAULT_RHO) -> np.ndarray:
    """Nine time derivatives at state `x` under the given instantaneous inputs.

    `insulin_rate_delayed` must already be the infusion rate at t - beta.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (9,):
        raise ValidationError(f"state must have 9 components, got shape {x.shape}")
    out = _derivatives_batch(x[None, :], theta.as_array()[None, :], c,
                             float(cho_rate), float(insulin_rate_delayed), rho_cfg)
    return out[0]


def steady_state(theta: PhysioParams, c: PopulationConstants) -> np.ndarray:
    """Analytic fixed point under constant basal insulin and no carbohydrate input."""
    x = np.zeros(9)
    x[_G] = theta.Gb
    x[_IG] = theta.Gb
    x[_ISC1] = c.basal_rate / (theta.kd * c.VI_ml)
    x[_ISC2] = c.basal_rate / (theta.ka2 * c.VI_ml)
    x[_IP] = c.Ipb
    return x


def steady_state_batch(theta: np.ndarray, c: PopulationConstants) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    x = np.zeros((theta.shape[0], 9))
    x[:, _G] = theta[:, 0]
    x[:, _IG] = theta[:, 0]
    x[:, _ISC1] = c.basal_rate / (theta[:, 4] * c.VI_ml)
    x[:, _ISC2] = c.basal_rate / (theta[:, 3] * c.VI_ml)
    x[:, _IP] = c.Ipb
    return x


class BatchIntegrationResult:
    """Outcome of a vectorized integration: captured states plus failure records."""

    def __init__(self, captured: np.ndarray, capture_t: np.ndarray,
                 failures: list[tuple[int, int, str]], final: np.ndarray):
        self.captured = captured      # (B, n_capture, 9)
        self.capture_t = capture_t    # (n_capture,)
        self.failures = failures      # (row, step, state name) for first blow-up per row
        self.final = final            # (B, 9)

    @property
    def ok_mask(self) -> np.ndarray:
        bad = {row for row, _, _ in self.failures}
        return np.array([i not in bad for i in range(self.final.shape[0])])


def integrate_batch(x0: np.ndarray, theta: np.ndarray, c: PopulationConstants,
                    inputs: "RasterizedInputs", horizon_min: float,
                    capture_every_min: float | None = None,
                    rho_cfg: RhoConfig = DEFAULT_RHO) -> BatchIntegrationResult:
    """Euler-integrate B trajectories that share one input raster.

    Rows that blow up are frozen at NaN and reported in `failures`; the rest
    of the batch keeps integrating. Results are bitwise independent of the
    batch composition because every operation is elementwise per row.
    """
    from .scenario import RasterizedInputs  # local import to avoid a cycle

    if not isinstance(inputs, RasterizedInputs):
        raise ValidationError("inputs must be RasterizedInputs")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if x0.shape[0] != theta.shape[0]:
        raise ValidationError("x0 and theta batch sizes differ")
    dt = inputs.dt
    n_steps = horizon_min / dt
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise ValidationError(f"horizon {horizon_min} min is not a multiple of dt={dt}")
    n_steps = int(round(n_steps))
    beta_steps = c.beta / dt
    if abs(beta_steps - round(beta_steps)) > 1e-9:
        raise ValidationError(f"beta={c.beta} min is not a multiple of dt={dt}")
    beta_steps = int(round(beta_steps))
    if inputs.n_pre < beta_steps:
        raise ValidationError(
            f"input raster pre-roll ({inputs.n_pre * dt} min) shorter than beta ({c.beta} min)")
    if inputs.n_steps < n_steps:
        raise ValidationError("input raster does not cover the horizon")

    if capture_every_min is None:
        capture_stride = 1
    else:
        stride = capture_every_min / dt
        if abs(stride - round(stride)) > 1e-9:
            raise ValidationError("capture_every_min must be a multiple of dt")
        capture_stride = int(round(stride))
    capture_steps = np.arange(0, n_steps + 1, capture_stride)

    B = x0.shape[0]
    x = x0.copy()
    captured = np.empty((B, capture_steps.size, 9))
    failures: list[tuple[int, int, str]] = []
    dead = np.zeros(B, dtype=bool)
    dx = np.empty_like(x)
    scratch = np.empty(B)

    cap_idx = 0
    if capture_steps[0] == 0:
        captured[:, 0] = x
        cap_idx = 1

    cho = inputs.cho
    insulin = inputs.insulin
    n_pre = inputs.n_pre
    for k in range(n_steps):
        _derivatives_batch(x, theta, c, cho[n_pre + k], insulin[n_pre + k - beta_steps],
                           rho_cfg, dx=dx, scratch=scratch)
        dx *= dt
        x += dx
        # finiteness is checked before flooring so the floor cannot mask -inf
        if not np.isfinite(x).all():
            newly_dead = ~np.isfinite(x).all(axis=1) & ~dead
            for row in np.nonzero(newly_dead)[0]:
                comp = int(np.nonzero(~np.isfinite(x[row]))[0][0])
                failures.append((int(row), k + 1, STATE_NAMES[comp]))
            dead |= newly_dead
            x[dead] = np.nan
        np.maximum(x, STATE_FLOOR, out=x)
        np.maximum(x[:, _G], GLUCOSE_FLOOR, out=x[:, _G])
        np.maximum(x[:, _IG], GLUCOSE_FLOOR, out=x[:, _IG])

        if cap_idx < capture_steps.size and capture_steps[cap_idx] == k + 1:
            captured[:, cap_idx] = x
            cap_idx += 1

    return BatchIntegrationResult(captured, capture_steps * dt, failures, x)


def integrate(x0: np.ndarray, theta: PhysioParams, c: PopulationConstants,
              inputs: "RasterizedInputs", horizon_min: float,
              rho_cfg: RhoConfig = DEFAULT_RHO) -> Trajectory:
    """Integrate a single trajectory over [0, horizon_min] on the raster grid.

    Deterministic: identical inputs give a bit-identical Trajectory.
    Raises IntegrationError naming the step and state component on overflow.
    """
    x0 = validate_state(np.asarray(x0, dtype=float))
    res = integrate_batch(x0[None, :], theta.as_array()[None, :], c, inputs, horizon_min,
                          capture_every_min=None, rho_cfg=rho_cfg)
    if res.failures:
        _, step, comp = res.failures[0]
        raise IntegrationError(
            f"non-finite state at step {step} (t = {step * inputs.dt:g} min), component {comp}")
    return Trajectory(dt=inputs.dt, states=res.captured[0], t0=0.0)


def cgm_grid(horizon_min: float, sample_every_min: float = 5.0) -> np.ndarray:
    """Observation sampling instants: t = 0, 5, ..., horizon - 5 (264 for 22 h)."""
    n = horizon_min / sample_every_min
    if abs(n - round(n)) > 1e-9:
        raise ValidationError("horizon must be a multiple of the sampling interval")
    return sample_every_min * np.arange(int(round(n)))


def sensor_readings(ig: np.ndarray, t_min: np.ndarray, sensor: SensorModel,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply the calibration-drift polynomial and additive Gaussian noise."""
    gain = sensor.a0 + sensor.a1 * t_min + sensor.a2 * t_min ** 2
    out = gain * ig + sensor.b0
    if sensor.noise_sd > 0.0:
        if rng is None:
            raise ValidationError("a seeded rng is required when noise_sd > 0")
        out = out + rng.normal(0.0, sensor.noise_sd, size=out.shape)
    return out


def apply_sensor(traj: Trajectory, sensor: SensorModel, sample_every_min: float = 5.0,
                 rng_seed: int | None = 0) -> CgmTrace:
    """Sample interstitial glucose on the CGM grid and apply the sensor model.

    The grid starts at the window origin and excludes the endpoint, so a 22 h
    trajectory sampled every 5 min yields 264 readings.
    """
    stride = sample_every_min / traj.dt
    if abs(stride - round(stride)) > 1e-9:
        raise ValidationError("sample_every_min must be a multiple of the trajectory dt")
    t = cgm_grid(traj.horizon_min, sample_every_min)
    idx = np.round(t / traj.dt).astype(int)
    ig = traj.states[idx, _IG]
    rng = np.random.default_rng(rng_seed) if sensor.noise_sd > 0 else None
    return CgmTrace(t_min=t, values=sensor_readings(ig, t, sensor, rng))


def write_trace_csv(path, t_min: np.ndarray, values: np.ndarray) -> None:
    """CSV export with header `t_min,value`, LF endings, full float precision."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_min", "value"])
        for t, v in zip(t_min, values):
            writer.writerow([repr(float(t)), repr(float(v))])


def read_trace_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["t_min", "value"]:
            raise ValidationError(f"unexpected trace header {header}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    t = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    return t, v
