"""Green-token counting and one-proportion z-test detection.

The detector never sees the generator: it lexes (or receives) a token
stream, counts how many tokens fall in the keyed green set, and compares
that count with the null expectation.  Two z-statistics are provided for
the context-hashed scheme: the literal 2(g - T/2)/sqrt(T) form and the
gamma-parameterized (g - gamma*T)/sqrt(T*gamma*(1-gamma)) form, which is
the harness default because the literal form is miscentered when
gamma != 0.5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .lexing import TokenKind, TokenStream
from .rng import SplitMix64
from .watermark import BOUNDARY_CONTEXT, SchemeConfig, UMD, WatermarkKey, green_membership

__all__ = [
    "DetectionReport",
    "DetectorConfig",
    "UndefinedStatisticError",
    "count_green",
    "countable_tokens",
    "z_score_umd",
    "z_score_unigram",
    "p_value",
    "detect",
    "detect_grouped",
    "report_csv_rows",
]

PAPER_LITERAL = "paper-literal"
GENERAL = "general"


class UndefinedStatisticError(ValueError):
    """z is undefined on an empty token stream (T = 0)."""


@dataclass(frozen=True)
class DetectorConfig:
    rule: str = "z-threshold"  # or "p-threshold"
    z_threshold: float = 3.0
    p_threshold: float = 0.00135
    group_size: int = 3
    umd_formula: str = GENERAL

    def __post_init__(self):
        if self.rule not in ("z-threshold", "p-threshold"):
            raise ValueError(f"unknown decision rule {self.rule!r}")
        if self.umd_formula not in (PAPER_LITERAL, GENERAL):
            raise ValueError(f"unknown UMD formula {self.umd_formula!r}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


@dataclass(frozen=True)
class DetectionReport:
    T: int
    green_count: int
    z: float
    p: float
    decision: bool
    group_id: int = 0
    group_seed: int | None = None


def countable_tokens(tokens: TokenStream, include_comments: bool = False) -> list[str]:
    """Token texts that participate in green counting.

    Comments are skipped unless asked for (generated programs contain
    none), and dedents are skipped because they own no bytes; everything
    else counts, forced syntax included, as a real detector would.
    """
    return [
        t.text
        for t in tokens
        if t.text and (include_comments or t.kind is not TokenKind.COMMENT)
    ]


def count_green(
    tokens: TokenStream,
    key: WatermarkKey,
    config: SchemeConfig,
    include_comments: bool = False,
) -> int:
    """Number of green tokens; context chain starts at the boundary sentinel."""
    texts = countable_tokens(tokens, include_comments)
    green = 0
    context = BOUNDARY_CONTEXT
    for text in texts:
        if green_membership(key, config, context, text):
            green += 1
        context = text
    return green


def z_score_umd(
    green_count: int, T: int, formula: str = PAPER_LITERAL, gamma: float = 0.25
) -> float:
    """Context-hashed scheme statistic, literal or gamma-general form."""
    if T < 1:
        raise UndefinedStatisticError("z undefined for T = 0")
    if formula == PAPER_LITERAL:
        return 2.0 * (green_count - T / 2.0) / math.sqrt(T)
    if formula == GENERAL:
        return z_score_unigram(green_count, T, gamma)
    raise ValueError(f"unknown UMD formula {formula!r}")


def z_score_unigram(green_count: int, T: int, gamma: float) -> float:
    if T < 1:
        raise UndefinedStatisticError("z undefined for T = 0")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    return (green_count - gamma * T) / math.sqrt(T * gamma * (1.0 - gamma))


def p_value(z: float) -> float:
    """One-sided upper-tail normal p; strictly decreasing in z."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _report(green: int, T: int, scheme: SchemeConfig, det: DetectorConfig,
            group_id: int = 0, group_seed: int | None = None) -> DetectionReport:
    if scheme.scheme == UMD:
        z = z_score_umd(green, T, det.umd_formula, scheme.gamma)
    else:
        z = z_score_unigram(green, T, scheme.gamma)
    p = p_value(z)
    if det.rule == "z-threshold":
        decision = z > det.z_threshold
    else:
        decision = p <= det.p_threshold
    return DetectionReport(T, green, z, p, decision, group_id, group_seed)


def detect(
    tokens: TokenStream,
    key: WatermarkKey,
    scheme: SchemeConfig,
    det: DetectorConfig | None = None,
    include_comments: bool = False,
) -> DetectionReport:
    """Full detection pass over one stream."""
    det = det or DetectorConfig()
    texts = countable_tokens(tokens, include_comments)
    if not texts:
        raise UndefinedStatisticError("empty token stream")
    green = count_green(tokens, key, scheme, include_comments)
    return _report(green, len(texts), scheme, det)


def detect_grouped(
    completions: list[TokenStream],
    key: WatermarkKey,
    scheme: SchemeConfig,
    det: DetectorConfig | None = None,
    seed: int = 0,
    include_comments: bool = False,
) -> list[DetectionReport]:
    """Pool green counts across seeded-random groups of completions.

    Each completion restarts the context chain at the boundary sentinel
    (they are independent generations); the trailing group may be smaller
    than group_size.
    """
    if not completions:
        raise ValueError("no completions to group")
    det = det or DetectorConfig()
    order = list(range(len(completions)))
    SplitMix64(seed).shuffle(order)
    reports = []
    for group_id, lo in enumerate(range(0, len(order), det.group_size)):
        member_ids = order[lo : lo + det.group_size]
        T = 0
        green = 0
        for i in member_ids:
            texts = countable_tokens(completions[i], include_comments)
            T += len(texts)
            green += count_green(completions[i], key, scheme, include_comments)
        if T == 0:
            raise UndefinedStatisticError(f"group {group_id} has no countable tokens")
        reports.append(_report(green, T, scheme, det, group_id, seed))
    return reports


def report_csv_rows(reports: list[DetectionReport]) -> list[str]:
    """Render reports in the fixed CSV layout (header + one row each)."""
    rows = ["group_id,T,green_count,z,p,decision"]
    for r in reports:
        rows.append(
            f"{r.group_id},{r.T},{r.green_count},{r.z!r},{r.p!r},{str(r.decision).lower()}"
        )
    return rows
