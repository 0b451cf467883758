"""Amortized inference pipeline: dataset -> trained posterior -> samples.

A PosteriorModel is a trained flow stamped with the hashes of the prior,
scenario and dataset it was trained against; inference refuses to run against
a mismatched scenario when the caller supplies one. Checkpoints are
self-contained: `T1DNPE1\\n` magic, an 8-byte little-endian length, a JSON
header (architecture, standardizers, prior config, training config, seeds,
deterministic metrics) and the raw float64 weight blocks in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import (
    Dataset,
    PARAM_NAMES,
    PriorSpec,
    N_PARAMS,
    OBS_LEN,
    canonical_json,
    theta_hat_support,
)
from .errors import ProvenanceError, StateError, ValidationError
from .flow import (
    FlowModel,
    Standardizer,
    SupportPolicy,
    TrainConfig,
    TrainHistory,
    sample as flow_sample,
    train as flow_train,
)

CHECKPOINT_MAGIC = b"T1DNPE1\n"


@dataclass
class PosteriorModel:
    flow: FlowModel
    prior: PriorSpec
    prior_hash: str
    scenario_hash: str
    dataset_hash: str
    train_seed: int
    train_config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def support_policy(self) -> SupportPolicy:
        low, high, reject = theta_hat_support(self.prior)
        return SupportPolicy(low=low, high=high, reject_mask=reject)

    # ---- checkpoint serialization -----------------------------------------

    def to_bytes(self) -> bytes:
        weights = self.flow.parameters()
        header = {
            "format": "T1DNPE1",
            "d": self.flow.d,
            "ctx_dim": self.flow.ctx_dim,
            "n_blocks": self.flow.n_blocks,
            "hidden_sizes": list(self.flow.hidden_sizes),
            "flow_seed": self.flow.seed,
            "train_seed": self.train_seed,
            "param_names": list(PARAM_NAMES),
            "prior": self.prior.to_dict(),
            "prior_hash": self.prior_hash,
            "scenario_hash": self.scenario_hash,
            "dataset_hash": self.dataset_hash,
            "train_config": self.train_config,
            "metrics": self.metrics,
            "standardizer": {
                "theta_mean": self.flow.std_theta.mean.tolist(),
                "theta_sd": self.flow.std_theta.sd.tolist(),
                "y_mean": self.flow.std_y.mean.tolist(),
                "y_sd": self.flow.std_y.sd.tolist(),
            },
            "weight_shapes": [list(w.shape) for w in weights],
        }
        head = canonical_json(header).encode()
        blob = bytearray()
        blob += CHECKPOINT_MAGIC
        blob += struct.pack("<Q", len(head))
        blob += head
        for w in weights:
            blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        return bytes(blob)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "PosteriorModel":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValidationError("not a posterior checkpoint (bad magic)")
        off = len(CHECKPOINT_MAGIC)
        (head_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        header = json.loads(data[off:off + head_len].decode())
        off += head_len
        flow = FlowModel(header["d"], header["ctx_dim"], header["n_blocks"],
                         tuple(header["hidden_sizes"]), header["flow_seed"])
        arrays = []
        for shape in header["weight_shapes"]:
            size = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off)
            arrays.append(arr.reshape(shape).copy())
            off += size * 8
        flow.set_parameters(arrays)
        std = header["standardizer"]
        flow.std_theta = Standardizer(np.array(std["theta_mean"]), np.array(std["theta_sd"]))
        flow.std_y = Standardizer(np.array(std["y_mean"]), np.array(std["y_sd"]))
        return cls(flow=flow,
                   prior=PriorSpec.from_dict(header["prior"]),
                   prior_hash=header["prior_hash"],
                   scenario_hash=header["scenario_hash"],
                   dataset_hash=header["dataset_hash"],
                   train_seed=header["train_seed"],
                   train_config=header["train_config"],
                   metrics=header["metrics"])

    @classmethod
    def load(cls, path) -> "PosteriorModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def model_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


@dataclass
class PosteriorSamples:
    samples: np.ndarray       # (n, 17)
    observation_id: str
    model_id: str
    seed: int
    leakage_rate: float
    elapsed_s: float = float("nan")

    def __post_init__(self) -> None:
        if self.samples.ndim != 2:
            raise ValidationError("samples must be a 2-D matrix")

    def median(self) -> np.ndarray:
        return np.median(self.samples, axis=0)

    def percentile(self, q) -> np.ndarray:
        return np.percentile(self.samples, q, axis=0, method="linear")

    def summary(self) -> dict:
        med = self.median()
        lo = self.percentile(2.5)
        hi = self.percentile(97.5)
        return {name: {"median": float(med[j]), "q2.5": float(lo[j]),
                       "q97.5": float(hi[j])}
                for j, name in enumerate(PARAM_NAMES[:self.samples.shape[1]])}


def observation_id(y: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(y, dtype="<f8").tobytes()).hexdigest()[:16]


def train_npe(dataset: Dataset, cfg: TrainConfig | None = None,
              flow_cfg: dict | None = None, seed: int = 0,
              prior: PriorSpec | None = None) -> tuple[PosteriorModel, TrainHistory]:
    """Fit the conditional flow on a generated dataset and stamp provenance.

    `prior` must be the PriorSpec the dataset was generated from; its hash
    is checked against the dataset metadata.
    """
    if cfg is None:
        cfg = TrainConfig()
    flow_cfg = {"n_blocks": 5, "hidden_sizes": (50, 50), **(flow_cfg or {})}
    if prior is None:
        raise ValidationError("train_npe needs the PriorSpec the dataset came from")
    if prior.hash() != dataset.meta.get("prior_hash"):
        raise ProvenanceError("prior spec does not match the dataset's prior hash")

    model = FlowModel(N_PARAMS, OBS_LEN, flow_cfg["n_blocks"],
                      tuple(flow_cfg["hidden_sizes"]), seed=seed)
    rng = np.random.default_rng(seed)
    model, history = flow_train(model, dataset.thetas, dataset.observations, cfg, rng)
    post = PosteriorModel(
        flow=model,
        prior=prior,
        prior_hash=dataset.meta["prior_hash"],
        scenario_hash=dataset.meta["scenario_hash"],
        dataset_hash=dataset.hash(),
        train_seed=seed,
        train_config=cfg.to_dict(),
        metrics=history.metrics_dict(),
    )
    return post, history


def infer(model: PosteriorModel, y: np.ndarray, n: int = 1000, seed: int = 0,
          scenario_hash: str | None = None,
          range_margin: float = 20.0) -> PosteriorSamples:
    """Draw n posterior samples for one CGM observation.

    Never touches the simulator or the optimizer; wall-clock time depends
    only on n and the architecture. Refuses a scenario hash that does not
    match the one the model was trained for.
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (OBS_LEN,):
        raise ValidationError(f"observation must have length {OBS_LEN}, got {y.shape}")
    lo, hi = 40.0 - range_margin, 400.0 + range_margin
    if y.min() < lo or y.max() > hi:
        raise ValidationError(
            f"observation values outside the physiologic range [{lo}, {hi}] mg/dL")
    if scenario_hash is not None and scenario_hash != model.scenario_hash:
        raise ProvenanceError(
            "scenario hash does not match the model's training scenario")
    if model.flow.std_theta is None:
        raise StateError("posterior model has no fitted standardizers")

    t0 = time.monotonic()
    rng = np.random.default_rng(seed)
    draws, leakage = flow_sample(model.flow, y, n, rng,
                                 support=model.support_policy())
    elapsed = time.monotonic() - t0
    return PosteriorSamples(samples=draws, observation_id=observation_id(y),
                            model_id=model.model_id(), seed=seed,
                            leakage_rate=leakage, elapsed_s=elapsed)


def write_posterior_csv(path, samples: np.ndarray, names=None) -> None:
    """Posterior CSV: one named column per parameter, full float precision."""
    names = list(names if names is not None else PARAM_NAMES[:samples.shape[1]])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_posterior_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.array(rows)
