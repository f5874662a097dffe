"""Exactly enumerable autoregressive toy model.

Used to verify the echo-conditioning framework with brute force: the trimmed
(echo-free) distribution, its partition function, rejection sampling, and the
per-token likelihood decomposition are all computable in closed form here.

A sequence is a tuple of non-terminal symbols. Generation is first-order
Markov: each step draws from P(. | previous symbol) over symbols plus END;
at ``max_len`` END is forced, so every sequence terminates and total
probability mass is exactly 1.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import NotTrimSequence, RejectionBudgetExceeded, StateSpaceTooLarge, ZeroMass

BOS = "<bos>"
END = "<end>"

Sequence = tuple[str, ...]

_ENUM_GUARD = 10**6
_PROB_TOL = 1e-12


@dataclass(frozen=True)
class ToyLM:
    """First-order Markov toy language model over a small symbol set.

    ``table`` maps a context symbol (BOS or any vocab symbol) to the
    conditional distribution over vocab symbols plus END.
    """

    symbols: tuple[str, ...]
    max_len: int
    table: Mapping[str, Mapping[str, float]]

    def __post_init__(self):
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")
        contexts = {BOS, *self.symbols}
        if set(self.table) != contexts:
            raise ValueError("table must cover BOS and every symbol context")
        for ctx, dist in self.table.items():
            if set(dist) != {*self.symbols, END}:
                raise ValueError(f"context {ctx!r} must distribute over symbols + END")
            if any(p < 0 for p in dist.values()):
                raise ValueError(f"context {ctx!r} has negative probability")
            total = math.fsum(dist.values())
            if abs(total - 1.0) > _PROB_TOL:
                raise ValueError(f"context {ctx!r} distribution sums to {total}")

    @classmethod
    def uniform(cls, symbols: Iterable[str] = ("a", "b"), max_len: int = 4) -> "ToyLM":
        symbols = tuple(symbols)
        dist = {s: 1.0 / (len(symbols) + 1) for s in (*symbols, END)}
        return cls(symbols=symbols, max_len=max_len, table={c: dict(dist) for c in (BOS, *symbols)})

    def sequence_prob(self, seq: Sequence) -> float:
        """Exact probability of generating ``seq`` (END factor included)."""
        if len(seq) > self.max_len:
            raise ValueError("sequence longer than max_len")
        prob = 1.0
        prev = BOS
        for sym in seq:
            prob *= self.table[prev][sym]
            prev = sym
        if len(seq) < self.max_len:  # END forced at max_len, probability 1
            prob *= self.table[prev][END]
        return prob

    def sequence_logprob(self, seq: Sequence) -> float:
        prob = self.sequence_prob(seq)
        if prob == 0.0:
            return -math.inf
        return math.log(prob)

    def per_token_loglik(self, seq: Sequence) -> float:
        """Length-normalized log-likelihood; defined as 0 for the empty sequence."""
        if not seq:
            return 0.0
        return self.sequence_logprob(seq) / len(seq)


@dataclass(frozen=True)
class EchoPredicate:
    """Total decidable classifier of sequences into echo vs trim."""

    name: str
    is_echo: Callable[[Sequence], bool]

    def is_trim(self, seq: Sequence) -> bool:
        return not self.is_echo(seq)


def accept_all() -> EchoPredicate:
    return EchoPredicate(name="accept_all", is_echo=lambda seq: False)


def reject_all() -> EchoPredicate:
    return EchoPredicate(name="reject_all", is_echo=lambda seq: True)


def first_token_is(symbol: str) -> EchoPredicate:
    """Echo iff the sequence starts with ``symbol``; the empty sequence is trim."""
    return EchoPredicate(
        name=f"first_token_is({symbol})",
        is_echo=lambda seq: bool(seq) and seq[0] == symbol,
    )


def enumerate_distribution(model: ToyLM) -> dict[Sequence, float]:
    """Full probability table over the finite sequence space."""
    n_symbols = len(model.symbols)
    count = 1
    total_sequences = 1
    for _ in range(model.max_len):
        count = count * n_symbols if n_symbols else 0
        total_sequences += count
        if total_sequences > _ENUM_GUARD:
            raise StateSpaceTooLarge(
                f"more than {_ENUM_GUARD} sequences for |V|={n_symbols}, max_len={model.max_len}"
            )

    out: dict[Sequence, float] = {}

    def walk(seq: Sequence, prob: float, prev: str):
        if len(seq) == model.max_len:
            out[seq] = prob
            return
        out[seq] = prob * model.table[prev][END]
        for sym in model.symbols:
            p = prob * model.table[prev][sym]
            if p > 0.0:
                walk(seq + (sym,), p, sym)

    walk((), 1.0, BOS)
    return out


def partition_function(model: ToyLM, predicate: EchoPredicate) -> float:
    """Total base-model mass on trim sequences (the acceptance probability)."""
    z = math.fsum(p for seq, p in enumerate_distribution(model).items() if predicate.is_trim(seq))
    if z <= 0.0:
        raise ZeroMass(f"no trim sequence has positive mass under {predicate.name}")
    return z


def trimmed_distribution(model: ToyLM, predicate: EchoPredicate) -> dict[Sequence, float]:
    """Base distribution conditioned on the trim event, renormalized."""
    full = enumerate_distribution(model)
    z = math.fsum(p for seq, p in full.items() if predicate.is_trim(seq))
    if z <= 0.0:
        raise ZeroMass(f"no trim sequence has positive mass under {predicate.name}")
    return {seq: (p / z if predicate.is_trim(seq) else 0.0) for seq, p in full.items()}


def _sampler_tables(model: ToyLM):
    tables = {}
    for ctx, dist in model.table.items():
        options = (*model.symbols, END)
        cumulative = []
        acc = 0.0
        for sym in options:
            acc += dist[sym]
            cumulative.append(acc)
        cumulative[-1] = 1.0  # guard against fsum drift at the top bin
        tables[ctx] = (options, cumulative)
    return tables


def rejection_sample(
    model: ToyLM,
    predicate: EchoPredicate,
    rng: np.random.Generator,
    n: int,
    min_accepted: int = 1,
) -> tuple[list[Sequence], float]:
    """Draw ``n`` proposals from the base model and keep the trim ones.

    The acceptance rate over exactly ``n`` independent proposals is an
    unbiased estimate of the partition function. Raises when fewer than
    ``min_accepted`` proposals survive the budget.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tables = _sampler_tables(model)
    samples: list[Sequence] = []
    uniforms = rng.random(size=(n, model.max_len)) if model.max_len else np.zeros((n, 0))
    for i in range(n):
        seq: list[str] = []
        prev = BOS
        for t in range(model.max_len):
            options, cumulative = tables[prev]
            sym = options[bisect_left(cumulative, uniforms[i, t])]
            if sym == END:
                break
            seq.append(sym)
            prev = sym
        candidate = tuple(seq)
        if predicate.is_trim(candidate):
            samples.append(candidate)
    if len(samples) < min_accepted:
        raise RejectionBudgetExceeded(
            f"{len(samples)} acceptances in {n} attempts (needed {min_accepted})"
        )
    return samples, len(samples) / n


@dataclass(frozen=True)
class DecompositionResult:
    """Per-token likelihood decomposition pieces for one trim sequence.

    The identity ``l_tau == l_pi - c`` ties the conditioned model's
    per-token likelihood to the base model's, shifted by the normalized
    log partition function ``c = log(Z)/n``.
    """

    l_pi: float
    l_tau: float
    c: float
    n: int


def decomposition_check(
    model: ToyLM,
    predicate: EchoPredicate,
    seq: Sequence,
    n: int | None = None,
) -> DecompositionResult:
    """Compute both sides of the likelihood decomposition independently.

    ``l_tau`` comes from the normalized trimmed table; ``l_pi`` and ``c``
    are computed analytically from the base model and partition function.
    All per-token quantities are defined as 0 when ``n`` is 0.
    """
    if predicate.is_echo(seq):
        raise NotTrimSequence(f"{seq!r} is an echo sequence under {predicate.name}")
    if n is None:
        n = len(seq)
    tau = trimmed_distribution(model, predicate)
    if seq not in tau or tau[seq] == 0.0:
        raise ValueError(f"{seq!r} has zero mass; decomposition undefined")
    z = partition_function(model, predicate)
    if n == 0:
        return DecompositionResult(l_pi=0.0, l_tau=0.0, c=0.0, n=0)
    l_tau = math.log(tau[seq]) / n
    l_pi = model.sequence_logprob(seq) / n
    c = math.log(z) / n
    return DecompositionResult(l_pi=l_pi, l_tau=l_tau, c=c, n=n)


def total_variation(p: Mapping[Sequence, float], q: Mapping[Sequence, float]) -> float:
    support = set(p) | set(q)
    return 0.5 * math.fsum(abs(p.get(seq, 0.0) - q.get(seq, 0.0)) for seq in support)


def empirical_distribution(samples: Iterable[Sequence]) -> dict[Sequence, float]:
    counts: dict[Sequence, int] = {}
    total = 0
    for seq in samples:
        counts[seq] = counts.get(seq, 0) + 1
        total += 1
    if total == 0:
        return {}
    return {seq: c / total for seq, c in counts.items()}


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    passed: bool
    detail: str


def run_identity_checks(seed: int = 0, n_samples: int = 100_000) -> list[IdentityCheck]:
    """Battery of exactness checks on a default toy model; used by the CLI."""
    model = ToyLM.uniform(symbols=("a", "b"), max_len=4)
    predicate = first_token_is("a")
    checks: list[IdentityCheck] = []

    full = enumerate_distribution(model)
    total = math.fsum(full.values())
    checks.append(
        IdentityCheck("base_mass_sums_to_one", abs(total - 1.0) <= 1e-12, f"sum={total!r}")
    )

    tau = trimmed_distribution(model, predicate)
    tau_total = math.fsum(tau.values())
    checks.append(
        IdentityCheck("trimmed_mass_sums_to_one", abs(tau_total - 1.0) <= 1e-12, f"sum={tau_total!r}")
    )

    z = partition_function(model, predicate)
    ratio_ok = all(
        abs(tau[seq] - full[seq] / z) <= 1e-12 for seq in full if predicate.is_trim(seq)
    )
    zero_ok = all(tau[seq] == 0.0 for seq in full if predicate.is_echo(seq))
    checks.append(IdentityCheck("trimmed_proportional_to_base", ratio_ok and zero_ok, f"Z={z!r}"))

    rng = np.random.default_rng(seed)
    samples, rate = rejection_sample(model, predicate, rng, n_samples)
    tv = total_variation(empirical_distribution(samples), tau)
    checks.append(IdentityCheck("rejection_tv_below_0.01", tv < 0.01, f"tv={tv:.5f}"))
    sigma = math.sqrt(z * (1.0 - z) / n_samples)
    checks.append(
        IdentityCheck(
            "acceptance_rate_estimates_partition",
            abs(rate - z) <= 3.0 * sigma,
            f"rate={rate:.5f} Z={z:.5f} 3sigma={3 * sigma:.5f}",
        )
    )

    worst = 0.0
    for seq in full:
        if predicate.is_trim(seq) and full[seq] > 0.0:
            r = decomposition_check(model, predicate, seq)
            worst = max(worst, abs(r.l_tau - (r.l_pi - r.c)))
    checks.append(
        IdentityCheck("decomposition_identity", worst <= 1e-12, f"max_abs_residual={worst:.3e}")
    )
    return checks
