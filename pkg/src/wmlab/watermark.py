"""Keyed green/red token partitioning and biased sampling.

Two schemes share one membership primitive:

* UMD: the green set is re-derived per position from the previous token,
  so membership of a token depends on its context.
* Unigram: a single fixed green set derived from the key alone.

Membership is an independent keyed Bernoulli(gamma) test per token string
(upper 32 bits of a pinned hash chain compared against gamma), not a
permutation of a finite vocabulary: it extends to tokens that never
existed at generation time, which is exactly what rewritten code contains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .lexing import TokenStream, stream_from_texts
from .rng import MASK64, SplitMix64, fnv1a64, mix64

__all__ = [
    "WatermarkKey",
    "SchemeConfig",
    "Distribution",
    "GenerationError",
    "UMD",
    "UNIGRAM",
    "BOUNDARY_CONTEXT",
    "green_membership",
    "apply_green_bias",
    "sample_from",
    "watermark_generate",
]

UMD = "UMD"
UNIGRAM = "Unigram"

# Context stand-ins.  The NUL byte cannot appear in any lexed token, so
# neither sentinel can collide with a real token text.
BOUNDARY_CONTEXT = "\x00boundary"
_UNIGRAM_CONTEXT = "\x00unigram"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WatermarkKey:
    """64-bit experiment key; serialized as 16 lowercase hex digits."""

    key: int

    def __post_init__(self):
        if not 0 <= self.key <= MASK64:
            raise ValueError("key must fit in 64 bits")

    def to_hex(self) -> str:
        return f"{self.key:016x}"

    @classmethod
    def from_hex(cls, text: str) -> "WatermarkKey":
        text = text.strip().lower()
        if len(text) != 16 or any(c not in "0123456789abcdef" for c in text):
            raise ValueError(f"key must be 16 hex digits, got {text!r}")
        return cls(int(text, 16))


@dataclass(frozen=True)
class SchemeConfig:
    """Scheme selector plus the green fraction and bias strength."""

    scheme: str = UMD
    gamma: float = 0.25
    delta: float = 2.0

    def __post_init__(self):
        if self.scheme not in (UMD, UNIGRAM):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.delta < 0.0:
            raise ValueError("delta must be non-negative")


@dataclass(frozen=True)
class Distribution:
    """Discrete next-token distribution over distinct token strings."""

    support: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.probs):
            raise ValueError("support/probs length mismatch")
        if len(set(self.support)) != len(self.support):
            raise ValueError("support entries must be distinct")
        if any(p < 0.0 for p in self.probs):
            raise ValueError("negative probability")
        if self.support and abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(self.probs)}, not 1")

    @classmethod
    def uniform(cls, support: list[str] | tuple[str, ...]) -> "Distribution":
        n = len(support)
        return cls(tuple(support), tuple([1.0 / n] * n))


def green_membership(
    key: WatermarkKey, config: SchemeConfig, context: str, token: str
) -> bool:
    """True iff token is green under the keyed hash chain.

    UMD hashes (key, context, token); Unigram ignores the context and
    hashes (key, fixed sentinel, token).  The chain is
    upper32(mix64(mix64(key ^ fnv1a(ctx)) ^ fnv1a(token))) / 2^32 < gamma,
    bit-exact by construction.
    """
    ctx = context if config.scheme == UMD else _UNIGRAM_CONTEXT
    h = mix64(mix64(key.key ^ fnv1a64(ctx)) ^ fnv1a64(token))
    return (h >> 32) < config.gamma * 4294967296.0


def apply_green_bias(
    dist: Distribution, key: WatermarkKey, config: SchemeConfig, context: str
) -> Distribution:
    """Multiply green-token mass by e^delta and renormalize.

    Equivalent to adding delta to green logits; the identity when delta=0
    or when the support carries no green (or no red) mass.
    """
    if config.delta == 0.0 or not dist.support:
        return dist
    flags = [green_membership(key, config, context, t) for t in dist.support]
    green_mass = sum(p for p, g in zip(dist.probs, flags) if g)
    if green_mass == 0.0 or green_mass == sum(dist.probs):
        return dist  # nothing to shift: bias cannot create or move mass
    boost = math.exp(config.delta)
    weights = [p * boost if g else p for p, g in zip(dist.probs, flags)]
    total = sum(weights)
    return Distribution(dist.support, tuple(w / total for w in weights))


def sample_from(dist: Distribution, rng: SplitMix64) -> str:
    """Seeded multinomial draw by inverse-CDF walk."""
    u = rng.random()
    acc = 0.0
    for t, p in zip(dist.support, dist.probs):
        acc += p
        if u < acc:
            return t
    return dist.support[-1]  # guard against accumulated rounding


def watermark_generate(
    provider,
    prompt: TokenStream | None,
    key: WatermarkKey,
    config: SchemeConfig,
    max_tokens: int,
    seed: int,
) -> TokenStream:
    """Sample max_tokens tokens from provider through the green bias.

    ``provider`` maps a list of recent token texts to a Distribution (see
    generator.DistributionProvider).  The provider sees the prompt plus
    everything generated so far; the watermark context is the previous
    *generated* token, with the boundary sentinel for the first one, so
    completions embed independently of their prompts.
    """
    if max_tokens < 0:
        raise ValueError("max_tokens must be non-negative")
    rng = SplitMix64(seed)
    history: list[str] = [t.text for t in prompt.tokens] if prompt else []
    out: list[str] = []
    context = BOUNDARY_CONTEXT
    for _ in range(max_tokens):
        dist = provider.next_distribution(history)
        if not dist.support:
            raise GenerationError(
                f"provider returned empty support for context {history[-3:]!r}"
            )
        dist = apply_green_bias(dist, key, config, context)
        token = sample_from(dist, rng)
        out.append(token)
        history.append(token)
        context = token
    return stream_from_texts(out)
