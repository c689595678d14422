"""Synthetic mobile-network series with recoverable generative drivers.

Three generators mirror the data kinds the model is trained on:

* base-station traffic: two diurnal harmonics plus trend and small noise,
* per-user app traffic: an on/off Markov burst process,
* downlink RSRP: log-distance path loss along a smooth random walk.

Every latent driver is written into the sample's environment feature, so a
trained model can be checked against the closed form.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

FORMAT_VERSION = 1

C1 = 8  # BsEnv width
C2 = 5  # AppEnv width: 4-way one-hot app type + user intensity
C3 = 4  # RsrpEnv width: log10 distance, tx power, tilt, terrain class

RSRP_MIN_DBM = -120.0
RSRP_MAX_DBM = -40.0

NORMALIZATION = {
    "bs_traffic": "clip [0, 1]",
    "app_traffic": "intensity * app mean, already in [0, 1]",
    "rsrp_dbm_range": [RSRP_MIN_DBM, RSRP_MAX_DBM],
    "rsrp_tx_power": {"offset_dbm": 40.0, "scale_db": 6.0},
    "rsrp_tilt_scale_deg": 10.0,
    "rsrp_terrain_scale": 3.0,
}


class DataKind(enum.IntEnum):
    BS_TRAFFIC = 0
    APP_TRAFFIC = 1
    RSRP = 2


@dataclass(frozen=True)
class EnvFeature:
    """Environment side information; subclasses fix the shape per data kind."""

    data: np.ndarray
    kind = None  # set by subclasses

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        self._check_shape(data)
        if not np.all(np.isfinite(data)):
            raise ValueError(f"{type(self).__name__} has non-finite entries")

    def _check_shape(self, data: np.ndarray) -> None:
        raise NotImplementedError

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class BsEnv(EnvFeature):
    """[base, a1, a2, phase1/2pi, phase2/2pi, noise_scale, trend, poi_mix]."""

    kind = DataKind.BS_TRAFFIC

    def _check_shape(self, data):
        if data.shape != (C1,):
            raise ValueError(f"BsEnv must have shape ({C1},), got {data.shape}")


@dataclass(frozen=True)
class AppEnv(EnvFeature):
    kind = DataKind.APP_TRAFFIC

    def _check_shape(self, data):
        if data.ndim != 2 or data.shape[1] != C2:
            raise ValueError(f"AppEnv must have shape (L, {C2}), got {data.shape}")
        if np.any(data[:, :4].sum(axis=1) > 1.0 + 1e-12):
            raise ValueError("AppEnv one-hot rows must sum to at most 1")


@dataclass(frozen=True)
class RsrpEnv(EnvFeature):
    kind = DataKind.RSRP

    def _check_shape(self, data):
        if data.ndim != 2 or data.shape[1] != C3:
            raise ValueError(f"RsrpEnv must have shape (L, {C3}), got {data.shape}")


ENV_TYPES = {DataKind.BS_TRAFFIC: BsEnv, DataKind.APP_TRAFFIC: AppEnv, DataKind.RSRP: RsrpEnv}


def make_env(kind: DataKind, data) -> EnvFeature:
    return ENV_TYPES[DataKind(kind)](np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class SeriesSample:
    kind: DataKind
    values: np.ndarray
    env: EnvFeature
    sample_id: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", DataKind(self.kind))
        if values.ndim != 1:
            raise ValueError("values must be a 1-D series")
        if np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
            raise ValueError("values must lie in [0, 1]")
        if self.env.kind != self.kind:
            raise ValueError(f"env {type(self.env).__name__} does not match kind {self.kind.name}")
        if self.env.data.ndim == 2 and self.env.data.shape[0] != len(values):
            raise ValueError("per-step env length differs from the series length")

    @property
    def L(self) -> int:
        return len(self.values)


def _check_args(n: int, L: int) -> None:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"n must be a positive integer, got {n!r}")
    if not isinstance(L, (int, np.integer)) or L < 8:
        raise ValueError(f"L must be an integer >= 8, got {L!r}")


# --------------------------------------------------------------------------
# Base-station traffic
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BsConfig:
    base: tuple[float, float] = (0.15, 0.55)
    a1: tuple[float, float] = (0.05, 0.25)
    a2_max: float = 0.10
    noise_scale: tuple[float, float] = (0.005, 0.02)
    trend: tuple[float, float] = (-0.1, 0.1)


def bs_mean_curve(env: np.ndarray, L: int) -> np.ndarray:
    """Noise-free, unclipped BS traffic curve for a BsEnv vector."""
    base, a1, a2, ph1, ph2, _, trend, _ = np.asarray(env, dtype=np.float64)
    t = np.arange(L, dtype=np.float64)
    return (
        base
        + a1 * np.sin(2 * np.pi * t / 24.0 + 2 * np.pi * ph1)
        + a2 * np.sin(2 * np.pi * t / 12.0 + 2 * np.pi * ph2)
        + trend * t / L
    )


def bs_series(env: np.ndarray, L: int, noise: np.ndarray | None = None) -> np.ndarray:
    """Closed form: clip01(mean curve + noise_scale * noise)."""
    curve = bs_mean_curve(env, L)
    if noise is not None:
        curve = curve + env[5] * noise
    return np.clip(curve, 0.0, 1.0)


def gen_bs_traffic(seed: int, n: int, L: int = 64, config: BsConfig = BsConfig()) -> list[SeriesSample]:
    _check_args(n, L)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        poi = rng.uniform(0.0, 1.0)
        env = np.array([
            rng.uniform(*config.base),
            rng.uniform(*config.a1),
            config.a2_max * poi,
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 1.0),
            rng.uniform(*config.noise_scale),
            rng.uniform(*config.trend),
            poi,
        ])
        values = bs_series(env, L, rng.standard_normal(L))
        out.append(SeriesSample(DataKind.BS_TRAFFIC, values, BsEnv(env), i))
    return out


# --------------------------------------------------------------------------
# App traffic
# --------------------------------------------------------------------------

APP_TYPE_MEANS = (0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class AppConfig:
    p_on: float = 0.15  # off -> on transition probability
    p_off: float = 0.25  # on -> off transition probability
    intensity: tuple[float, float] = (0.5, 1.0)

    @property
    def on_rate(self) -> float:
        if self.p_on == 0.0:
            return 0.0
        return self.p_on / (self.p_on + self.p_off)


def app_series(env: np.ndarray) -> np.ndarray:
    """Value at each step is intensity * mean of the active app type (0 when idle)."""
    env = np.asarray(env, dtype=np.float64)
    return env[:, :4] @ np.asarray(APP_TYPE_MEANS) * env[:, 4]


def gen_app_traffic(seed: int, n: int, L: int = 64, config: AppConfig = AppConfig()) -> list[SeriesSample]:
    _check_args(n, L)
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        intensity = rng.uniform(*config.intensity)
        env = np.zeros((L, C2))
        env[:, 4] = intensity
        on = rng.uniform() < config.on_rate
        app = int(rng.integers(4))
        for t in range(L):
            if on:
                env[t, app] = 1.0
            u = rng.uniform()
            if on:
                on = u >= config.p_off
            else:
                on = u < config.p_on
                if on:
                    app = int(rng.integers(4))
        out.append(SeriesSample(DataKind.APP_TRAFFIC, app_series(env), AppEnv(env), i))
    return out


# --------------------------------------------------------------------------
# RSRP
# --------------------------------------------------------------------------

# per terrain class: path-loss exponent and mean shadowing offset (dB)
TERRAIN_EXPONENT = (3.0, 3.5, 3.8, 4.2)
TERRAIN_SHADOW_DB = (0.0, -2.0, -4.0, -6.0)


@dataclass(frozen=True)
class RsrpConfig:
    pl0_db: float = 30.0
    tx_power_dbm: tuple[float, float] = (40.0, 46.0)
    tilt_deg: tuple[float, float] = (0.0, 10.0)
    tilt_db_per_deg: float = 0.5
    log10_distance: tuple[float, float] = (1.5, 3.1)  # ~30 m .. ~1.3 km
    walk_step: float = 0.03  # std of the smoothed log10-distance increment
    walk_smoothing: float = 0.8
    shadowing: bool = True


def rsrp_dbm(tx_power_dbm, pl0_db, exponent, distance_m, tilt_penalty_db=0.0, shadowing_db=0.0):
    """Log-distance link budget: P_tx - (PL0 + 10 n log10 d) - tilt penalty + shadowing."""
    return tx_power_dbm - (pl0_db + 10.0 * exponent * np.log10(distance_m)) - tilt_penalty_db + shadowing_db


def normalize_rsrp(dbm):
    clamped = np.clip(dbm, RSRP_MIN_DBM, RSRP_MAX_DBM)
    return (clamped - RSRP_MIN_DBM) / (RSRP_MAX_DBM - RSRP_MIN_DBM)


def rsrp_from_env(env: np.ndarray, config: RsrpConfig = RsrpConfig(), shadowing: bool = True) -> np.ndarray:
    """Recompute the normalized RSRP series from an RsrpEnv matrix.

    Shadowing here is only the deterministic terrain offset; the emitted
    samples carry no other randomness.
    """
    env = np.asarray(env, dtype=np.float64)
    terrain = np.rint(env[:, 3] * NORMALIZATION["rsrp_terrain_scale"]).astype(int)
    p_tx = env[:, 1] * NORMALIZATION["rsrp_tx_power"]["scale_db"] + NORMALIZATION["rsrp_tx_power"]["offset_dbm"]
    tilt = env[:, 2] * NORMALIZATION["rsrp_tilt_scale_deg"]
    exponent = np.asarray(TERRAIN_EXPONENT)[terrain]
    shadow = np.asarray(TERRAIN_SHADOW_DB)[terrain] if shadowing else 0.0
    dbm = rsrp_dbm(p_tx, config.pl0_db, exponent, 10.0 ** env[:, 0], config.tilt_db_per_deg * tilt, shadow)
    return normalize_rsrp(dbm)


def gen_rsrp(seed: int, n: int, L: int = 64, config: RsrpConfig = RsrpConfig()) -> list[SeriesSample]:
    _check_args(n, L)
    rng = np.random.default_rng(seed)
    lo, hi = config.log10_distance
    out = []
    for i in range(n):
        p_tx = rng.uniform(*config.tx_power_dbm)
        tilt = rng.uniform(*config.tilt_deg)
        terrain = int(rng.integers(len(TERRAIN_EXPONENT)))
        logd = np.empty(L)
        logd[0] = rng.uniform(lo, hi)
        velocity = 0.0
        for t in range(1, L):
            velocity = config.walk_smoothing * velocity + config.walk_step * rng.standard_normal()
            step = logd[t - 1] + velocity
            # reflect at the distance bounds
            if step < lo:
                step, velocity = 2 * lo - step, -velocity
            elif step > hi:
                step, velocity = 2 * hi - step, -velocity
            logd[t] = step
        env = np.empty((L, C3))
        env[:, 0] = logd
        env[:, 1] = (p_tx - NORMALIZATION["rsrp_tx_power"]["offset_dbm"]) / NORMALIZATION["rsrp_tx_power"]["scale_db"]
        env[:, 2] = tilt / NORMALIZATION["rsrp_tilt_scale_deg"]
        env[:, 3] = terrain / NORMALIZATION["rsrp_terrain_scale"]
        values = rsrp_from_env(env, config, shadowing=config.shadowing)
        out.append(SeriesSample(DataKind.RSRP, values, RsrpEnv(env), i))
    return out


GENERATORS = {
    DataKind.BS_TRAFFIC: gen_bs_traffic,
    DataKind.APP_TRAFFIC: gen_app_traffic,
    DataKind.RSRP: gen_rsrp,
}


def generate_corpus(seed: int, n_per_kind: int, L: int = 64) -> list[SeriesSample]:
    """All three kinds, each from its own derived seed; sample ids are unique."""
    samples = []
    for kind, gen in GENERATORS.items():
        sub_seed = int(np.random.SeedSequence([seed, int(kind)]).generate_state(1)[0])
        for s in gen(sub_seed, n_per_kind, L):
            samples.append(SeriesSample(s.kind, s.values, s.env, int(kind) * n_per_kind + s.sample_id))
    return samples


# --------------------------------------------------------------------------
# Dataset file: one JSON header line, then one JSON record per sample
# --------------------------------------------------------------------------


def dataset_header(L: int, config_hash: str = "") -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "L": L,
        "C1": C1,
        "C2": C2,
        "C3": C3,
        "normalization": NORMALIZATION,
        "config_hash": config_hash,
    }


def sample_to_record(sample: SeriesSample) -> dict:
    return {
        "sample_id": int(sample.sample_id),
        "kind": int(sample.kind),
        "values": sample.values.tolist(),
        "env": sample.env.data.ravel().tolist(),
        "env_shape": list(sample.env.shape),
    }


def record_to_sample(rec: dict) -> SeriesSample:
    env = np.asarray(rec["env"], dtype=np.float64).reshape(rec["env_shape"])
    return SeriesSample(DataKind(rec["kind"]), np.asarray(rec["values"]), make_env(rec["kind"], env), rec["sample_id"])


def write_dataset(path, samples: Iterable[SeriesSample], config_hash: str = "") -> None:
    samples = list(samples)
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    L = samples[0].L
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(dataset_header(L, config_hash), sort_keys=True) + "\n")
        for s in samples:
            if s.L != L:
                raise ValueError("all samples in a dataset must share L")
            fh.write(json.dumps(sample_to_record(s), sort_keys=True) + "\n")


def iter_dataset(path) -> Iterator[SeriesSample]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format {header.get('format_version')!r}")
        for line in fh:
            if line.strip():
                yield record_to_sample(json.loads(line))


def read_dataset(path) -> tuple[dict, list[SeriesSample]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    return header, list(iter_dataset(path))


def oracle_mean(env, L: int) -> float:
    """Noise-free mean level of a BS traffic series, used by conditioning checks."""
    data = env.data if isinstance(env, EnvFeature) else np.asarray(env, dtype=np.float64)
    return float(np.clip(bs_mean_curve(data, L), 0.0, 1.0).mean())


def split_seeds(seed: int) -> dict[str, int]:
    """Distinct, stable seeds for the train/val/test corpora."""
    states = np.random.SeedSequence(seed).spawn(3)
    return {name: int(s.generate_state(1)[0]) for name, s in zip(("train", "val", "test"), states)}

