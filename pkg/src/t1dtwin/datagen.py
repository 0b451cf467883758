"""Prior over [theta, x0] and generation of the rejection-sampled training set.

Priors for the eight physiological parameters are truncated location-scale
families (log-normal for rates and sensitivities, normal for basal glucose),
all expressed internally as truncated normals in a transformed coordinate
(identity or log). The initial-state prior has no closed form: x0 is the
state of a 44 h run (the daily profile played twice from steady state) at a
uniformly drawn 5-min offset within the first 22 h.

Candidate draws use counter-based per-candidate RNG streams derived from the
master seed, so the accepted set does not depend on batch size.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, SamplingError, ValidationError
from .physiology import (
    PhysioParams,
    PopulationConstants,
    SensorModel,
    THETA_NAMES,
    cgm_grid,
    integrate_batch,
    sensor_readings,
    steady_state_batch,
)
from .scenario import Scenario, rasterize, tile_scenario

CGM_RANGE = (40.0, 400.0)   # mg/dL, rejection band for training observations
N_THETA = 8
N_STATE = 9
N_PARAMS = 17               # theta followed by x0
OBS_LEN = 264               # 22 h at 5 min

PARAM_NAMES = THETA_NAMES + (
    "G0", "Isc1_0", "Isc2_0", "Ip_0", "Qsto1_0", "Qsto2_0", "Qgut_0", "X_0", "IG_0")

DATASET_MAGIC = b"T1DDS1\n"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_of(obj) -> str:
    if isinstance(obj, bytes):
        return hashlib.sha256(obj).hexdigest()
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass(frozen=True)
class ParamPrior:
    """Independent truncated prior for one parameter.

    family "lognormal": loc/scale are the log-space mean and sd (loc is the
    log of the median); family "normal": loc/scale in natural units. `low`
    and `high` truncate the natural-unit support.
    """

    family: str
    loc: float
    scale: float
    low: float
    high: float

    def __post_init__(self) -> None:
        if self.family not in ("lognormal", "normal"):
            raise ValidationError(f"unknown prior family {self.family!r}")
        if self.scale < 0:
            raise ValidationError("prior scale must be >= 0")
        if self.low >= self.high:
            raise ValidationError("prior support is empty")
        if self.low <= 0 and self.family == "lognormal":
            raise ValidationError("lognormal support must be positive")

    # transformed coordinate: log for lognormal, identity for normal; in it
    # the prior is a truncated normal, which is what the samplers work with
    def transform(self, x):
        return np.log(x) if self.family == "lognormal" else np.asarray(x, dtype=float)

    def untransform(self, z):
        return np.exp(z) if self.family == "lognormal" else np.asarray(z, dtype=float)

    @property
    def bounds_transformed(self) -> tuple[float, float]:
        if self.family == "lognormal":
            return math.log(self.low), math.log(self.high)
        return self.low, self.high

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray | float:
        size = 1 if n is None else n
        if self.scale == 0.0:
            out = np.full(size, self.untransform(self.loc))
            return out[0] if n is None else out
        lo, hi = self.bounds_transformed
        out = np.empty(size)
        remaining = np.arange(size)
        while remaining.size:
            draw = rng.normal(self.loc, self.scale, remaining.size)
            good = (draw >= lo) & (draw <= hi)
            out[remaining[good]] = draw[good]
            remaining = remaining[~good]
        out = self.untransform(out)
        return float(out[0]) if n is None else out

    def logpdf_transformed(self, z) -> np.ndarray:
        """Unnormalized truncated-normal log density in the transformed coordinate."""
        z = np.asarray(z, dtype=float)
        lo, hi = self.bounds_transformed
        val = -0.5 * ((z - self.loc) / self.scale) ** 2 - math.log(self.scale)
        return np.where((z >= lo) & (z <= hi), val, -np.inf)

    def mean(self) -> float:
        """Mean of the untruncated base distribution (truncation is near-symmetric)."""
        if self.family == "lognormal":
            return math.exp(self.loc + 0.5 * self.scale ** 2)
        return self.loc

    def sd(self) -> float:
        if self.family == "lognormal":
            m = self.mean()
            return m * math.sqrt(math.exp(self.scale ** 2) - 1.0)
        return self.scale

    def to_dict(self) -> dict:
        return {"family": self.family, "loc": self.loc, "scale": self.scale,
                "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamPrior":
        return cls(family=str(d["family"]), loc=float(d["loc"]), scale=float(d["scale"]),
                   low=float(d["low"]), high=float(d["high"]))


@dataclass(frozen=True)
class PriorSpec:
    """Marginal priors for the eight physiological parameters, in canonical order."""

    params: tuple[ParamPrior, ...]

    def __post_init__(self) -> None:
        if len(self.params) != N_THETA:
            raise ValidationError(f"expected {N_THETA} parameter priors")
        for name, p in zip(THETA_NAMES, self.params):
            if p.low <= 0.0:
                raise ValidationError(f"{name} prior support must be strictly positive")
        gb = self.params[0]
        if gb.low < 40.0 or gb.high > 300.0:
            raise ValidationError("Gb prior support must stay inside [40, 300]")

    def __getitem__(self, i: int) -> ParamPrior:
        return self.params[i]

    def to_dict(self) -> dict:
        return {name: p.to_dict() for name, p in zip(THETA_NAMES, self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(tuple(ParamPrior.from_dict(d[name]) for name in THETA_NAMES))

    @classmethod
    def from_json(cls, path) -> "PriorSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def hash(self) -> str:
        return sha256_of(self.to_dict())

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        low = np.array([p.low for p in self.params])
        high = np.array([p.high for p in self.params])
        return low, high

    def means(self) -> np.ndarray:
        return np.array([p.mean() for p in self.params])

    def sds(self) -> np.ndarray:
        return np.array([p.sd() for p in self.params])


def default_prior() -> PriorSpec:
    """Shipped prior configuration (see priors/default.json)."""

    def ln(median, log_sd):
        return ParamPrior("lognormal", math.log(median), log_sd,
                          math.exp(math.log(median) - 3 * log_sd),
                          math.exp(math.log(median) + 3 * log_sd))

    return PriorSpec((
        ParamPrior("normal", 120.0, 15.0, 70.0, 180.0),  # Gb
        ln(0.02, 0.25),     # SG
        ln(0.012, 0.25),    # p2
        ln(0.014, 0.25),    # ka2
        ln(0.026, 0.25),    # kd
        ln(0.18, 0.30),     # kempt
        ln(6e-4, 0.35),     # SI
        ln(0.012, 0.30),    # kabs
    ))


def candidate_rng(master_seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for candidate `index`; independent of batching."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def sample_theta(prior: PriorSpec, rng: np.random.Generator) -> PhysioParams:
    """One independent draw per component, truncated to its support."""
    vals = [p.sample(rng) for p in prior.params]
    return PhysioParams(**dict(zip(THETA_NAMES, vals)))


def initial_state_base(scenario: Scenario) -> Scenario:
    """The 44 h input profile used to draw x0: the daily profile played twice."""
    return tile_scenario(scenario, 2)


def sample_initial_state(theta: PhysioParams, c: PopulationConstants, base: Scenario,
                         rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Simulate `base` from steady state and return the state at a random
    5-min offset within the first half of the run, plus the offset itself."""
    if base.horizon_min < 2640.0:
        raise ValidationError("initial-state base scenario must cover 44 h")
    inputs = rasterize(base, 1.0, 60.0, c.BW)
    res = integrate_batch(steady_state_batch(theta.as_array()[None, :], c),
                          theta.as_array()[None, :], c, inputs, base.horizon_min,
                          capture_every_min=5.0)
    if res.failures:
        _, step, comp = res.failures[0]
        raise IntegrationError(f"initial-state run failed at step {step}, component {comp}")
    offset_idx = int(rng.integers(0, 265))  # 0, 5, ..., 1320 min
    return res.captured[0, offset_idx].copy(), float(offset_idx * 5)


def simulate_observation(theta_hat: np.ndarray, c: PopulationConstants, scenario: Scenario,
                         sensor: SensorModel, rng: np.random.Generator | None) -> np.ndarray:
    """Simulate the CGM observation for one [theta, x0] vector (length 264)."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    if theta_hat.shape != (N_PARAMS,):
        raise ValidationError(f"expected a {N_PARAMS}-vector, got shape {theta_hat.shape}")
    if scenario.horizon_min != 1320.0:
        raise ValidationError("observation scenario must have a 22 h horizon")
    inputs = rasterize(scenario, 1.0, 60.0, c.BW)
    res = integrate_batch(theta_hat[None, N_THETA:], theta_hat[None, :N_THETA], c,
                          inputs, scenario.horizon_min, capture_every_min=5.0)
    if res.failures:
        _, step, comp = res.failures[0]
        raise IntegrationError(f"observation run failed at step {step}, component {comp}")
    ig = res.captured[0, :OBS_LEN, 8]
    t = cgm_grid(scenario.horizon_min)
    return sensor_readings(ig, t, sensor, rng)


@dataclass
class Dataset:
    thetas: np.ndarray         # (N, 17)
    observations: np.ndarray   # (N, 264)
    meta: dict

    def __post_init__(self) -> None:
        if self.thetas.ndim != 2 or self.thetas.shape[1] != N_PARAMS:
            raise ValidationError("thetas must be (N, 17)")
        if self.observations.shape != (self.thetas.shape[0], OBS_LEN):
            raise ValidationError("observations must be (N, 264)")
        if self.observations.size and (self.observations.min() < CGM_RANGE[0]
                                       or self.observations.max() > CGM_RANGE[1]):
            raise ValidationError(
                f"observations leave the physiologic band {CGM_RANGE}")

    def __len__(self) -> int:
        return self.thetas.shape[0]

    def to_bytes(self) -> bytes:
        meta_json = canonical_json(self.meta).encode()
        blob = bytearray()
        blob += DATASET_MAGIC
        blob += struct.pack("<Q", len(meta_json))
        blob += meta_json
        blob += np.ascontiguousarray(self.thetas, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(self.observations, dtype="<f8").tobytes()
        return bytes(blob)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(DATASET_MAGIC):
            raise ValidationError(f"{path} is not a dataset file (bad magic)")
        off = len(DATASET_MAGIC)
        (meta_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        meta = json.loads(data[off:off + meta_len].decode())
        off += meta_len
        n = int(meta["n"])
        thetas = np.frombuffer(data, dtype="<f8", count=n * N_PARAMS, offset=off)
        off += n * N_PARAMS * 8
        obs = np.frombuffer(data, dtype="<f8", count=n * OBS_LEN, offset=off)
        return cls(thetas.reshape(n, N_PARAMS).copy(),
                   obs.reshape(n, OBS_LEN).copy(), meta)

    def hash(self) -> str:
        return sha256_of(self.to_bytes())


def generate_dataset(n: int, prior: PriorSpec, c: PopulationConstants, scenario: Scenario,
                     sensor: SensorModel, seed: int, batch_size: int = 512,
                     acceptance_floor: float = 0.01, probe: int = 512,
                     progress=None) -> Dataset:
    """Draw (theta, x0, y) triples; keep those whose observation stays inside
    the physiologic CGM band until `n` are accepted.

    Deterministic for a given seed: candidates are processed in draw-index
    order with per-candidate RNG streams, so batch size cannot change the
    accepted set.
    """
    if n < 1:
        raise ValidationError("dataset size must be >= 1")
    base = initial_state_base(scenario)
    inputs44 = rasterize(base, 1.0, 60.0, c.BW)
    inputs22 = rasterize(scenario, 1.0, 60.0, c.BW)
    t_obs = cgm_grid(scenario.horizon_min)
    lo, hi = CGM_RANGE

    thetas = np.empty((n, N_PARAMS))
    observations = np.empty((n, OBS_LEN))
    accepted = 0
    n_valid = 0  # all in-range candidates, including ones past the n-th
    drawn = 0

    while accepted < n:
        b = batch_size
        rngs = [candidate_rng(seed, drawn + i) for i in range(b)]
        theta_b = np.empty((b, N_THETA))
        offsets = np.empty(b, dtype=int)
        for i, rng in enumerate(rngs):
            theta_b[i] = sample_theta(prior, rng).as_array()
            offsets[i] = rng.integers(0, 265)

        res44 = integrate_batch(steady_state_batch(theta_b, c), theta_b, c,
                                inputs44, base.horizon_min, capture_every_min=5.0)
        x0_b = res44.captured[np.arange(b), offsets]
        res22 = integrate_batch(x0_b, theta_b, c, inputs22, scenario.horizon_min,
                                capture_every_min=5.0)
        ig = res22.captured[:, :OBS_LEN, 8]
        y_b = np.empty_like(ig)
        for i, rng in enumerate(rngs):
            y_b[i] = sensor_readings(ig[i], t_obs, sensor,
                                     rng if sensor.noise_sd > 0 else None)

        finite = np.isfinite(y_b).all(axis=1)
        in_range = finite & (y_b.min(axis=1, initial=np.inf) >= lo) \
            & (y_b.max(axis=1, initial=-np.inf) <= hi)
        n_valid += int(in_range.sum())
        for i in np.nonzero(in_range)[0]:
            if accepted == n:
                break
            thetas[accepted, :N_THETA] = theta_b[i]
            thetas[accepted, N_THETA:] = x0_b[i]
            observations[accepted] = y_b[i]
            accepted += 1
        drawn += b

        if drawn >= probe and n_valid / drawn < acceptance_floor:
            raise SamplingError(
                f"acceptance rate {n_valid / drawn:.4f} after {drawn} draws is below "
                f"the floor {acceptance_floor}; check prior/scenario compatibility")
        if progress is not None:
            progress(accepted, drawn)

    meta = {
        "n": n,
        "seed": seed,
        "prior_hash": prior.hash(),
        "scenario_hash": sha256_of(scenario.to_dict()),
        "constants": c.to_dict(),
        "sensor": sensor.to_dict(),
        "n_drawn": drawn,
        "acceptance_rate": n_valid / drawn,
        "param_names": list(PARAM_NAMES),
    }
    return Dataset(thetas, observations, meta)


def state_support() -> tuple[np.ndarray, np.ndarray]:
    """Feasible box for the nine initial states (glucose floored at 1 mg/dL)."""
    low = np.zeros(N_STATE)
    low[0] = 1.0
    low[8] = 1.0
    high = np.full(N_STATE, np.inf)
    return low, high


def theta_hat_support(prior: PriorSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Support box for the full 17-vector plus a mask of which dimensions are
    enforced by resampling (the physiological parameters) rather than clipping
    (the initial states, whose feasible set is just the non-negative orthant)."""
    t_lo, t_hi = prior.support_box()
    s_lo, s_hi = state_support()
    low = np.concatenate([t_lo, s_lo])
    high = np.concatenate([t_hi, s_hi])
    reject_mask = np.zeros(N_PARAMS, dtype=bool)
    reject_mask[:N_THETA] = True
    return low, high, reject_mask
