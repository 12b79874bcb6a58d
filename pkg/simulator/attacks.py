"""
Omniscient Byzantine attacks.

Each attack sees every honest message of the current stream and returns the
b vectors the Byzantine nodes upload instead.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

import config
from schema import AttackConfig

STREAM_IDS = {"g": 0, "s": 1}


class UnknownAttackError(ValueError):
    """Attack kind not recognised."""


@dataclass
class AttackContext:
    """
    Round information an attack may use.

    Attributes:
        num_byzantine: b, the number of vectors to craft
        round_index: Round id (keys the random attacks)
        seed: Run seed
        stream: "g" for fresh gradients, "s" for estimators/momentum
        poisoned: (b, d) messages computed on flipped labels, supplied by the optimizer
    """

    num_byzantine: int
    round_index: int = 0
    seed: int = config.DEFAULT_SEED
    stream: str = "g"
    poisoned: Optional[np.ndarray] = None


def alie_z(n: int, b: int) -> float:
    """Standard normal quantile at (n - b - s) / (n - b) with s = floor(n/2) + 1 - b."""
    s = n // 2 + 1 - b
    q = (n - b - s) / (n - b)
    q = min(max(q, 1e-6), 1.0 - 1e-6)
    return float(norm.ppf(q))


def _attack_rng(ctx: AttackContext) -> np.random.Generator:
    key = np.random.SeedSequence([ctx.seed, ctx.round_index, STREAM_IDS.get(ctx.stream, 2), 0xA77])
    return np.random.Generator(np.random.Philox(key))


def craft(cfg: AttackConfig, honest_msgs, context: AttackContext) -> np.ndarray:
    """
    Build the Byzantine uploads for one stream of one round.

    Args:
        cfg: Attack kind and hyperparameters
        honest_msgs: (|H|, d) honest messages of this stream
        context: Round context

    Returns:
        (b, d) array; empty when b = 0

    Raises:
        UnknownAttackError: If cfg.kind is not a known attack
        ValueError: If there are no honest messages, or label_flip gets no poisoned messages
    """
    honest = np.atleast_2d(np.asarray(honest_msgs, dtype=np.float64))
    if honest.shape[0] == 0:
        raise ValueError("attacks need at least one honest message")
    b = context.num_byzantine
    h, d = honest.shape
    if cfg.kind != "none" and cfg.kind not in config.ATTACKS:
        raise UnknownAttackError(f"Unknown attack: {cfg.kind}")
    if b == 0:
        return np.empty((0, d))

    mean = honest.mean(axis=0)
    kind = cfg.kind
    if kind == "none":
        # Byzantine nodes behave honestly: replay honest messages in order
        return honest[np.arange(b) % h].copy()
    if kind == "gaussian":
        return mean + cfg.gaussian_std * _attack_rng(context).standard_normal(size=(b, d))
    if kind == "sign_flip":
        return np.tile(-cfg.sign_flip_scale * mean, (b, 1))
    if kind == "zero_value":
        return np.zeros((b, d))
    if kind == "sample_duplicate":
        return np.tile(honest[0], (b, 1))
    if kind == "isolation":
        return np.tile(-(h / b) * mean, (b, 1))
    if kind == "alie":
        z = cfg.alie_z if cfg.alie_z is not None else alie_z(h + b, b)
        return np.tile(mean + z * honest.std(axis=0), (b, 1))
    if kind == "ipm":
        return np.tile(-cfg.ipm_epsilon * mean, (b, 1))
    if kind == "bit_flip":
        return np.tile(np.negative(mean), (b, 1))

    # label_flip
    if context.poisoned is None:
        raise ValueError("label_flip needs gradients computed on flipped labels; the problem has no labels")
    return np.asarray(context.poisoned, dtype=np.float64).reshape(b, d)
