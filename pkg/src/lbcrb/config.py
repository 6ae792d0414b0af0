"""Experiment configuration: a single TOML file with nested tables.

See ``docs`` in the README for the full schema.  Validation errors name
the offending field; the CLI maps them to exit code 2.
"""

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np

from . import models
from .scorematch import TrainConfig

ENV_PREFIX = "LBCRB_"

APPROACHES = ("posterior", "measurement-prior", "both")


class ConfigError(ValueError):
    pass


def _require(table, key, where):
    if key not in table:
        raise ConfigError(f"missing required field [{where}] {key}")
    return table[key]


@dataclass
class NetConfig:
    n_blocks: int = 1
    width: int = 0
    physics_encoded: bool = False
    residual_feature: bool = False


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: Path
    approach: str
    model_table: dict
    snr_db: list
    n_per_snr: int
    m_d: int
    k_eval: list
    score_source: str
    subtract_mean: bool
    train_defaults: dict
    net_configs: dict = field(default_factory=dict)
    u: float = 3.0
    threads: int = 1
    config_hash: str = ""

    def train_config(self, role):
        """TrainConfig for a net role, with per-role overrides applied."""
        merged = dict(self.train_defaults)
        merged.update(self.net_configs.get(role, {}).get("overrides", {}))
        merged.setdefault("seed", self.seed)
        return TrainConfig(**merged)

    def net_config(self, role):
        spec = self.net_configs.get(role, {})
        return NetConfig(
            n_blocks=spec.get("n_blocks", 1),
            width=spec.get("width", 0),
            physics_encoded=spec.get("physics_encoded", False),
            residual_feature=spec.get("residual_feature", False),
        )

    def build_model(self):
        return build_model(self.model_table)


def build_model(table):
    kind = _require(table, "kind", "model")
    if kind == "linear":
        return models.make_linear_model(
            d_x=_require(table, "d_x", "model"),
            d_theta=_require(table, "d_theta", "model"),
            prior_var=_require(table, "prior_var", "model"),
            static_seed=_require(table, "static_seed", "model"),
        )
    if kind == "quantized":
        return models.make_quantized_model(
            d_x=_require(table, "d_x", "model"),
            d_theta=_require(table, "d_theta", "model"),
            prior_var=_require(table, "prior_var", "model"),
            static_seed=_require(table, "static_seed", "model"),
            rho=table.get("rho", 0.0),
            shift_b=table.get("shift_b", 0.0),
        )
    if kind == "frequency":
        n_samples = _require(table, "n_samples", "model")
        noise_kind = table.get("noise", "white")
        if noise_kind == "white":
            noise = models.NoiseSource.gaussian(np.eye(n_samples))
        elif noise_kind == "random":
            noise = models.NoiseSource.gaussian(
                models.random_covariance(n_samples,
                                         _require(table, "static_seed", "model")))
        elif noise_kind == "bank":
            path = _require(table, "bank_path", "model")
            noise = models.NoiseSource.from_bank(np.load(path), path=path)
        else:
            raise ConfigError(f"unknown [model] noise {noise_kind!r}")
        return models.make_frequency_model(
            n_samples,
            prior_alpha=_require(table, "prior_alpha", "model"),
            prior_beta=table.get("prior_beta"),
            lower=table.get("prior_lower", 0.0),
            upper=table.get("prior_upper", math.pi),
            noise=noise,
            static_seed=table.get("static_seed"),
        )
    raise ConfigError(f"unknown [model] kind {kind!r}")


_TRAIN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "ema_decay", "seed")
_NET_KEYS = ("n_blocks", "width", "physics_encoded", "residual_feature")


def _split_net_table(table, role):
    spec = {k: v for k, v in table.items() if k in _NET_KEYS}
    overrides = {k: v for k, v in table.items() if k in _TRAIN_KEYS}
    unknown = set(table) - set(_NET_KEYS) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown field(s) in [train.{role}]: {sorted(unknown)}")
    spec["overrides"] = overrides
    return spec


def load_config(path, seed=None, out=None, threads=None):
    """Parses and validates a TOML experiment config.

    ``seed``/``out``/``threads`` are CLI overrides; the environment
    variables LBCRB_OUT and LBCRB_THREADS apply when neither the flag nor
    the file sets a value.
    """
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc

    exp = doc.get("experiment", {})
    model_table = doc.get("model")
    if model_table is None:
        raise ConfigError("missing required table [model]")
    data_table = doc.get("data")
    if data_table is None:
        raise ConfigError("missing required table [data]")

    approach = exp.get("approach", "both")
    if approach not in APPROACHES:
        raise ConfigError(
            f"[experiment] approach must be one of {APPROACHES}, got {approach!r}")

    out_dir = out or os.environ.get(ENV_PREFIX + "OUT") or exp.get("out_dir")
    if out_dir is None:
        raise ConfigError("missing required field [experiment] out_dir "
                          "(or --out / LBCRB_OUT)")
    threads = threads or int(os.environ.get(ENV_PREFIX + "THREADS", 0)) \
        or exp.get("threads", 1)

    eval_table = doc.get("evaluate", {})
    m_d = _require(data_table, "m_d", "data")
    k_eval = eval_table.get("k_eval", [m_d])
    score_source = eval_table.get("score_source", "learned")
    if score_source not in ("learned", "analytic"):
        raise ConfigError(
            f"[evaluate] score_source must be learned|analytic, got {score_source!r}")

    if approach in ("posterior", "both"):
        bad = [k for k in k_eval if k != m_d]
        if bad and approach == "posterior":
            raise ConfigError(
                f"[evaluate] k_eval={k_eval} invalid: the posterior approach "
                f"evaluates only at k_eval == m_d (= {m_d}); a different k "
                f"needs a newly trained score model")

    train_table = dict(doc.get("train", {}))
    net_configs = {}
    for role in ("prior", "fisher", "posterior"):
        if role in train_table:
            net_configs[role] = _split_net_table(train_table.pop(role), role)
    unknown = set(train_table) - set(_TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown field(s) in [train]: {sorted(unknown)}")

    cfg = ExperimentConfig(
        name=exp.get("name", Path(path).stem),
        seed=int(seed if seed is not None else exp.get("seed", 0)),
        out_dir=Path(out_dir),
        approach=approach,
        model_table=model_table,
        snr_db=[float(s) for s in _require(data_table, "snr_db", "data")],
        n_per_snr=int(_require(data_table, "n_per_snr", "data")),
        m_d=int(m_d),
        k_eval=[int(k) for k in k_eval],
        score_source=score_source,
        subtract_mean=bool(eval_table.get("subtract_mean", False)),
        train_defaults=train_table,
        net_configs=net_configs,
        u=float(doc.get("diagnose", {}).get("u", 3.0)),
        threads=int(threads),
        config_hash=hashlib.sha256(raw).hexdigest()[:16],
    )
    cfg.build_model()  # validate the model table eagerly
    return cfg
