"""
Configuration for the multi-UAV AoI simulator and learners
Defaults mirror the system parameters and QMIX hyperparameters;
any of them can be overridden from the environment or a dotenv-style file.
"""
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np
from dotenv import dotenv_values, load_dotenv

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Raised when a configuration value is missing, malformed or unphysical"""


# ===========================
# Runtime / Output
# ===========================
OUTPUT_ROOT = os.getenv("UAV_AOI_OUTPUT_ROOT", "runs")
VERBOSE = os.getenv("UAV_AOI_VERBOSE", "True").lower() in ("1", "true", "yes")
DEFAULT_CONFIG_FILE = os.getenv("UAV_AOI_CONFIG", "world.env")

# ===========================
# Network Layout
# ===========================
NUM_SNS = int(os.getenv("N", "15"))
NUM_UAVS = int(os.getenv("M", "3"))
AREA_SIDE = float(os.getenv("AREA_SIDE", "800"))
LAYOUT = os.getenv("LAYOUT", "bottom_top")  # bottom_top | loop
SN_LAYOUT_SEED = int(os.getenv("SN_LAYOUT_SEED", "2024"))

# ===========================
# Time
# ===========================
HORIZON = int(os.getenv("T", "100"))
SLOT_LEN = float(os.getenv("TAU0", "0.5"))

# ===========================
# UAV Kinematics & Energy
# ===========================
ALTITUDE = float(os.getenv("Z", "100"))
V_MAX = float(os.getenv("V_MAX", "20"))
DPHI_MAX = float(os.getenv("DPHI_MAX", str(math.pi / 3)))
D_SAFE = float(os.getenv("D_SAFE", "10"))
E_MAX = float(os.getenv("E_MAX", "2.4e4"))
ARRIVAL_TOL = float(os.getenv("ARRIVAL_TOL", "1e-6"))

# Rotor model
N_R = int(os.getenv("N_R", "4"))
SIGMA_BLADE = float(os.getenv("SIGMA_BLADE", "0.012"))
C_T = float(os.getenv("C_T", "0.302"))
RHO = float(os.getenv("RHO", "1.225"))
ROTOR_AREA = float(os.getenv("A", "0.0314"))
C_S = float(os.getenv("C_S", "0.0955"))
D_0 = float(os.getenv("D_0", "0.834"))
C_F = float(os.getenv("C_F", "0.131"))
S_FP = float(os.getenv("S_FP", "0.0151"))  # not in the parameter table; small-quadrotor value
UAV_MASS = float(os.getenv("W", "2"))
GRAVITY = float(os.getenv("G", "9.8"))

# ===========================
# Sensor Nodes
# ===========================
E_SN_MAX = float(os.getenv("E_SN_MAX", "5e-3"))
E_HAR = float(os.getenv("E_HAR", "0.42e-3"))
LAMBDA_N = float(os.getenv("LAMBDA_N", "0.9"))
P_C = float(os.getenv("P_C", "5e-3"))
INITIAL_AOI = int(os.getenv("INITIAL_AOI", "1"))

# ===========================
# Air-to-Ground Channel
# ===========================
SIGMA2_DBM = float(os.getenv("SIGMA2_DBM", "-110"))
XI_TH_DB = float(os.getenv("XI_TH_DB", "5"))
BETA0 = float(os.getenv("BETA0", "11.95"))
BETA1 = float(os.getenv("BETA1", "0.14"))
ETA_LOS_DB = float(os.getenv("ETA_LOS_DB", "1.6"))
ETA_NLOS_DB = float(os.getenv("ETA_NLOS_DB", "23"))
F_C = float(os.getenv("F_C", "2e9"))
LIGHT_SPEED = float(os.getenv("C", "3e8"))
VARSIGMA = float(os.getenv("VARSIGMA", "2.0"))  # path-loss exponent, free-space baseline

# ===========================
# Dec-POMDP
# ===========================
N1 = int(os.getenv("N1", "1"))
N2 = int(os.getenv("N2", "6"))
DELTA_MAX = int(os.getenv("DELTA_MAX", "0"))  # 0 -> use the horizon T
K_1 = float(os.getenv("K_1", "0"))            # 0 -> N * delta_max

# ===========================
# QMIX Hyperparameters
# ===========================
EPISODES = int(os.getenv("EP", "50000"))
REPLAY_CAPACITY = int(os.getenv("D", "1000"))
TARGET_SYNC_EVERY = int(os.getenv("O", "200"))
LEARNING_RATE = float(os.getenv("ALPHA", "0.0005"))
BATCH_SIZE = int(os.getenv("BATCH_SIZE", "32"))
EPS_START = float(os.getenv("EPS_START", "0.99"))
EPS_MIN = float(os.getenv("EPS_MIN", "0.01"))
EPS_DECREMENT = float(os.getenv("EPS_DECREMENT", "9.9e-6"))
RNN_HIDDEN = int(os.getenv("HIDDEN", "256"))
MIXER_HIDDEN = int(os.getenv("MIXER_HIDDEN", "256"))
HYPER_HIDDEN = int(os.getenv("HYPER_HIDDEN", "256"))  # width of the b2 hypernet, not in the table
WARMUP_EPISODES = int(os.getenv("WARMUP", "32"))
GRAD_CLIP = float(os.getenv("GRAD_CLIP", "10"))
USE_ACTION_MASK = os.getenv("USE_ACTION_MASK", "True").lower() in ("1", "true", "yes")
CHECKPOINT_EVERY = int(os.getenv("CHECKPOINT_EVERY", "500"))
COST_SCALE = float(os.getenv("COST_SCALE", "0"))  # 0 -> 1 / (N * delta_max); argmin-invariant

# Named RNG stream roles
ROLE_LAYOUT = 0
ROLE_ENV = 1
ROLE_POLICY = 2
ROLE_REPLAY = 3
ROLE_INIT = 4
ROLE_EVAL = 5


def db_to_linear(value_db):
    return 10.0 ** (value_db / 10.0)


def dbm_to_watt(value_dbm):
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class WorldConfig:
    """All physical and experiment constants of one scenario"""

    num_sns: int = NUM_SNS
    num_uavs: int = NUM_UAVS
    horizon: int = HORIZON
    slot_len: float = SLOT_LEN
    area_side: float = AREA_SIDE
    altitude: float = ALTITUDE
    v_max: float = V_MAX
    dphi_max: float = DPHI_MAX
    d_safe: float = D_SAFE
    e_max: float = E_MAX
    e_sn_max: float = E_SN_MAX
    e_har: float = E_HAR
    lambda_n: float = LAMBDA_N
    lambda_per_sn: tuple = ()
    p_c: float = P_C
    sigma2_dbm: float = SIGMA2_DBM
    xi_th_db: float = XI_TH_DB
    beta0: float = BETA0
    beta1: float = BETA1
    eta_los_db: float = ETA_LOS_DB
    eta_nlos_db: float = ETA_NLOS_DB
    f_c: float = F_C
    light_speed: float = LIGHT_SPEED
    path_loss_exp: float = VARSIGMA
    n_r: int = N_R
    sigma_blade: float = SIGMA_BLADE
    c_t: float = C_T
    rho: float = RHO
    rotor_area: float = ROTOR_AREA
    c_s: float = C_S
    d_0: float = D_0
    c_f: float = C_F
    s_fp: float = S_FP
    mass: float = UAV_MASS
    gravity: float = GRAVITY
    delta_max: int = DELTA_MAX
    collision_penalty: float = K_1
    n1: int = N1
    n2: int = N2
    layout: str = LAYOUT
    start_positions: tuple = ()
    stop_positions: tuple = ()
    initial_aoi: int = INITIAL_AOI
    sn_layout_seed: int = SN_LAYOUT_SEED
    arrival_tol: float = ARRIVAL_TOL

    def __post_init__(self):
        # Derived defaults are resolved once so the frozen object is self-contained
        if self.delta_max <= 0:
            object.__setattr__(self, "delta_max", int(self.horizon))
        if self.collision_penalty <= 0:
            object.__setattr__(self, "collision_penalty", float(self.num_sns * self.delta_max))
        if not self.start_positions or not self.stop_positions:
            starts, stops = default_positions(self.num_uavs, self.area_side, self.layout)
            if not self.start_positions:
                object.__setattr__(self, "start_positions", starts)
            if not self.stop_positions:
                object.__setattr__(self, "stop_positions", stops)
        object.__setattr__(self, "start_positions", _as_points(self.start_positions))
        object.__setattr__(self, "stop_positions", _as_points(self.stop_positions))
        object.__setattr__(self, "lambda_per_sn", tuple(float(p) for p in self.lambda_per_sn))

    # Linear forms of the dB inputs
    @property
    def noise_power(self):
        return dbm_to_watt(self.sigma2_dbm)

    @property
    def xi_th(self):
        return db_to_linear(self.xi_th_db)

    @property
    def eta_los(self):
        return db_to_linear(self.eta_los_db)

    @property
    def eta_nlos(self):
        return db_to_linear(self.eta_nlos_db)

    @property
    def e_c(self):
        """Energy an SN spends on one status update"""
        return self.p_c * self.slot_len

    @property
    def harvest_probs(self):
        if self.lambda_per_sn:
            return np.asarray(self.lambda_per_sn, dtype=float)
        return np.full(self.num_sns, self.lambda_n, dtype=float)

    @property
    def speed_levels(self):
        return tuple(self.v_max * i / self.n1 for i in range(self.n1 + 1))

    @property
    def heading_levels(self):
        # 2*pi coincides with 0, so only n2 distinct headings exist
        return tuple(2.0 * math.pi * j / self.n2 for j in range(self.n2))

    @property
    def num_actions(self):
        return (self.n1 + 1) * self.n2 * (self.num_sns + 1)


@dataclass(frozen=True)
class QmixHyper:
    """Learner hyperparameters shared by QMIX and IDQN"""

    episodes: int = EPISODES
    replay_capacity: int = REPLAY_CAPACITY
    target_sync_every: int = TARGET_SYNC_EVERY
    learning_rate: float = LEARNING_RATE
    batch_size: int = BATCH_SIZE
    eps_start: float = EPS_START
    eps_min: float = EPS_MIN
    eps_decrement: float = EPS_DECREMENT
    rnn_hidden: int = RNN_HIDDEN
    mixer_hidden: int = MIXER_HIDDEN
    hyper_hidden: int = HYPER_HIDDEN
    warmup_episodes: int = WARMUP_EPISODES
    grad_clip: float = GRAD_CLIP
    use_action_mask: bool = USE_ACTION_MASK
    checkpoint_every: int = CHECKPOINT_EVERY
    cost_scale: float = COST_SCALE

    def epsilon(self, env_steps):
        """Linear per-step decay with a floor"""
        return max(self.eps_min, self.eps_start - self.eps_decrement * env_steps)


def _as_points(points):
    return tuple((float(x), float(y)) for x, y in points)


def default_positions(num_uavs, area_side, layout="bottom_top"):
    """
    Start/stop positions spread evenly on a 40 m grid.
    bottom_top: start on the bottom edge, stop on the top edge.
    loop: start and stop coincide on the middle row.
    """
    usable = area_side - 40.0
    if num_uavs == 1:
        xs = [0.0]
    else:
        xs = [40.0 * math.floor(i * usable / (40.0 * (num_uavs - 1)) + 1e-9) for i in range(num_uavs)]
    if layout == "bottom_top":
        starts = tuple((x, 0.0) for x in xs)
        stops = tuple((x, usable) for x in xs)
    elif layout == "loop":
        mid = 40.0 * math.floor(usable / 80.0)
        starts = tuple((x, mid) for x in xs)
        stops = starts
    else:
        raise ConfigError(f"Unknown layout: {layout}")
    return starts, stops


def validate_world_config(cfg):
    """Raise ConfigError when the scenario is unphysical"""
    positive = [
        "num_sns", "num_uavs", "slot_len", "area_side", "altitude", "v_max", "dphi_max",
        "d_safe", "e_max", "e_sn_max", "e_har", "p_c", "beta0", "beta1", "f_c",
        "light_speed", "path_loss_exp", "n_r", "sigma_blade", "c_t", "rho", "rotor_area",
        "c_s", "d_0", "c_f", "s_fp", "mass", "gravity", "delta_max", "collision_penalty",
        "n1", "n2",
    ]
    for name in positive:
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive, got {getattr(cfg, name)}")
    if cfg.horizon < 2:
        raise ConfigError(f"T must be at least 2, got {cfg.horizon}")
    if not cfg.eta_nlos > cfg.eta_los > 1.0:
        raise ConfigError("Require eta_nlos > eta_los > 1 (linear)")
    if not 0.0 <= cfg.lambda_n <= 1.0:
        raise ConfigError(f"LAMBDA_N must be a probability, got {cfg.lambda_n}")
    if cfg.lambda_per_sn:
        if len(cfg.lambda_per_sn) != cfg.num_sns:
            raise ConfigError("lambda_per_sn needs one probability per SN")
        if any(not 0.0 <= p <= 1.0 for p in cfg.lambda_per_sn):
            raise ConfigError("lambda_per_sn entries must be probabilities")
    if not 1 <= cfg.initial_aoi <= cfg.delta_max:
        raise ConfigError("INITIAL_AOI must lie in [1, delta_max]")
    for label, points in (("start", cfg.start_positions), ("stop", cfg.stop_positions)):
        if len(points) != cfg.num_uavs:
            raise ConfigError(f"Need {cfg.num_uavs} {label} positions, got {len(points)}")
        for x, y in points:
            if not (0.0 <= x <= cfg.area_side and 0.0 <= y <= cfg.area_side):
                raise ConfigError(f"{label} position ({x}, {y}) lies outside the area")
    if cfg.e_c > cfg.e_sn_max:
        raise ConfigError("One transmission needs more energy than the SN battery holds")
    return cfg


# ===========================
# Config File Ingestion
# ===========================

# Config-file keys mirror the parameter-table symbols
WORLD_KEYS = {
    "N": ("num_sns", int),
    "M": ("num_uavs", int),
    "T": ("horizon", int),
    "TAU0": ("slot_len", float),
    "AREA_SIDE": ("area_side", float),
    "Z": ("altitude", float),
    "V_MAX": ("v_max", float),
    "DPHI_MAX": ("dphi_max", float),
    "D_SAFE": ("d_safe", float),
    "E_MAX": ("e_max", float),
    "E_SN_MAX": ("e_sn_max", float),
    "E_HAR": ("e_har", float),
    "LAMBDA_N": ("lambda_n", float),
    "P_C": ("p_c", float),
    "SIGMA2_DBM": ("sigma2_dbm", float),
    "XI_TH_DB": ("xi_th_db", float),
    "BETA0": ("beta0", float),
    "BETA1": ("beta1", float),
    "ETA_LOS_DB": ("eta_los_db", float),
    "ETA_NLOS_DB": ("eta_nlos_db", float),
    "F_C": ("f_c", float),
    "C": ("light_speed", float),
    "VARSIGMA": ("path_loss_exp", float),
    "N_R": ("n_r", int),
    "SIGMA_BLADE": ("sigma_blade", float),
    "C_T": ("c_t", float),
    "RHO": ("rho", float),
    "A": ("rotor_area", float),
    "C_S": ("c_s", float),
    "D_0": ("d_0", float),
    "C_F": ("c_f", float),
    "S_FP": ("s_fp", float),
    "W": ("mass", float),
    "G": ("gravity", float),
    "DELTA_MAX": ("delta_max", int),
    "K_1": ("collision_penalty", float),
    "N1": ("n1", int),
    "N2": ("n2", int),
    "LAYOUT": ("layout", str),
    "INITIAL_AOI": ("initial_aoi", int),
    "SN_LAYOUT_SEED": ("sn_layout_seed", int),
    "ARRIVAL_TOL": ("arrival_tol", float),
}

HYPER_KEYS = {
    "EP": ("episodes", int),
    "D": ("replay_capacity", int),
    "O": ("target_sync_every", int),
    "ALPHA": ("learning_rate", float),
    "BATCH_SIZE": ("batch_size", int),
    "EPS_START": ("eps_start", float),
    "EPS_MIN": ("eps_min", float),
    "EPS_DECREMENT": ("eps_decrement", float),
    "HIDDEN": ("rnn_hidden", int),
    "MIXER_HIDDEN": ("mixer_hidden", int),
    "HYPER_HIDDEN": ("hyper_hidden", int),
    "WARMUP": ("warmup_episodes", int),
    "GRAD_CLIP": ("grad_clip", float),
    "USE_ACTION_MASK": ("use_action_mask", lambda s: str(s).lower() in ("1", "true", "yes")),
    "CHECKPOINT_EVERY": ("checkpoint_every", int),
    "COST_SCALE": ("cost_scale", float),
}


def _parse_points(text):
    """'x:y;x:y' -> ((x, y), (x, y))"""
    points = []
    for chunk in str(text).split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        x, y = chunk.split(":")
        points.append((float(x), float(y)))
    return tuple(points)


def _read_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    return {k.upper(): v for k, v in dotenv_values(path).items() if v is not None and v != ""}


def _convert(values, table):
    kwargs = {}
    for key, raw in values.items():
        if key not in table:
            continue
        name, cast = table[key]
        try:
            kwargs[name] = cast(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Bad value for {key}: {raw!r} ({e})")
    return kwargs


def load_world_config(path=None, **overrides):
    """Build a validated WorldConfig from a config file plus keyword overrides"""
    values = _read_file(path)
    kwargs = _convert(values, WORLD_KEYS)
    try:
        if "START_POSITIONS" in values:
            kwargs["start_positions"] = _parse_points(values["START_POSITIONS"])
        if "STOP_POSITIONS" in values:
            kwargs["stop_positions"] = _parse_points(values["STOP_POSITIONS"])
        if "LAMBDA_PER_SN" in values:
            kwargs["lambda_per_sn"] = tuple(float(p) for p in values["LAMBDA_PER_SN"].split(","))
    except ValueError as e:
        raise ConfigError(f"Bad position or probability list: {e}")
    kwargs.update(overrides)
    try:
        cfg = WorldConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e))
    return validate_world_config(cfg)


def load_qmix_hyper(path=None, **overrides):
    """Build QmixHyper from a config file plus keyword overrides"""
    kwargs = _convert(_read_file(path), HYPER_KEYS)
    kwargs.update(overrides)
    try:
        hyper = QmixHyper(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e))
    for name in ("episodes", "replay_capacity", "target_sync_every", "learning_rate",
                 "batch_size", "rnn_hidden", "mixer_hidden", "hyper_hidden"):
        if not getattr(hyper, name) > 0:
            raise ConfigError(f"{name} must be positive")
    if not 0.0 <= hyper.eps_min <= hyper.eps_start <= 1.0:
        raise ConfigError("Require 0 <= eps_min <= eps_start <= 1")
    return hyper


def with_overrides(cfg, **changes):
    """Copy of a WorldConfig with some fields changed, re-deriving layout-dependent defaults"""
    if "num_uavs" in changes or "layout" in changes or "area_side" in changes:
        changes.setdefault("start_positions", ())
        changes.setdefault("stop_positions", ())
    if "num_sns" in changes and cfg.lambda_per_sn:
        changes.setdefault("lambda_per_sn", ())
    if "horizon" in changes:
        changes.setdefault("delta_max", 0)
        changes.setdefault("collision_penalty", 0)
    if "num_sns" in changes:
        changes.setdefault("collision_penalty", 0)
    return validate_world_config(replace(cfg, **changes))


# ===========================
# Profiles
# ===========================

def profile_world_config(name="full"):
    """full: complete parameter table; desk: scaled scenario for overnight CPU runs"""
    if name == "full":
        return load_world_config()
    if name == "desk":
        return load_world_config(num_sns=10, num_uavs=2, horizon=60, area_side=400.0)
    raise ConfigError(f"Unknown profile: {name}")


def profile_qmix_hyper(name="full"):
    if name == "full":
        return load_qmix_hyper()
    if name == "desk":
        return load_qmix_hyper(episodes=3000)
    raise ConfigError(f"Unknown profile: {name}")


# ===========================
# Hashing & RNG Streams
# ===========================

# training-length knobs left out of checkpoint compatibility
RUN_LENGTH_FIELDS = ("episodes", "checkpoint_every", "warmup_episodes")


def _digest(payload):
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def config_hash(cfg, hyper=None):
    """Short stable digest of the configuration, embedded in every artifact"""
    payload = {"world": asdict(cfg)}
    if hyper is not None:
        payload["hyper"] = asdict(hyper)
    return _digest(payload)


def checkpoint_hash(cfg, hyper):
    """Digest deciding whether a checkpoint can be loaded; ignores run-length fields"""
    hyper_fields = {k: v for k, v in asdict(hyper).items() if k not in RUN_LENGTH_FIELDS}
    return _digest({"world": asdict(cfg), "hyper": hyper_fields})


def make_rng(seed, *stream):
    """Counter-based generator for a named stream; reproducible across platforms"""
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def describe(cfg):
    """Human-readable one-block summary printed at the start of a run"""
    lines = [
        f"N={cfg.num_sns} M={cfg.num_uavs} T={cfg.horizon} tau0={cfg.slot_len}s area={cfg.area_side}m",
        f"xi_th={cfg.xi_th_db} dB lambda_n={cfg.lambda_n} E_max={cfg.e_max:.0f} J delta_max={cfg.delta_max}",
        f"grid: {cfg.n1 + 1} speeds x {cfg.n2} headings x {cfg.num_sns + 1} schedules = {cfg.num_actions} actions",
    ]
    return "\n".join(lines)
