"""Chain containers, samplers, and chain persistence.

Chains are either iid draws or Markov chains from an independence
Metropolis-Hastings kernel.  The MH samplers can record regeneration
times via retrospective splitting: for an independence chain with
importance ratio omega(x) = target(x)/proposal(x) and splitting constant
c, an accepted move x -> y is a regeneration with probability

    min(1, c/omega(x)) * min(1, omega(y)/c) / min(1, omega(y)/omega(x)),

evaluated here in log space.  A True entry in regen_marks at index i
means a new tour starts at state i; index 0 always starts a tour.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .densities import UnnormalizedDensity, t_density, t_label, t_log_density
from .errors import InvalidModelError

CHAIN_KINDS = ("iid", "markov")


def derive_seed(master_seed: int, *indices: int) -> int:
    """Deterministic child seed from a master seed and index path.

    Index-based (not schedule-based), so parallel and serial execution
    derive identical streams.  The path length is mixed in first because
    SeedSequence ignores trailing zero entropy words.
    """
    entropy = (len(indices), int(master_seed)) + tuple(int(i) for i in indices)
    ss = np.random.SeedSequence(entropy=entropy)
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ChainSample:
    """One sampled chain tagged with the density it targets."""

    density_id: str
    states: np.ndarray
    kind: str
    seed: int
    regen_marks: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in CHAIN_KINDS:
            raise ValueError(f"chain kind must be one of {CHAIN_KINDS}")
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 1 or states.size < 1:
            raise ValueError("states must be a nonempty 1-d array")
        if not np.all(np.isfinite(states)):
            raise ValueError("states must be finite")
        object.__setattr__(self, "states", states)
        if self.regen_marks is not None:
            marks = np.asarray(self.regen_marks, dtype=bool)
            if marks.shape != states.shape:
                raise ValueError("regen_marks must match states in length")
            if not marks[0]:
                raise ValueError("a tour must start at index 0")
            object.__setattr__(self, "regen_marks", marks)

    @property
    def n(self) -> int:
        return self.states.size


@dataclass(frozen=True)
class SampleSet:
    """Chains from the k reference densities, in reference order."""

    chains: tuple[ChainSample, ...]
    stage: int = 1

    def __post_init__(self):
        if len(self.chains) < 1:
            raise ValueError("a sample set needs at least one chain")
        ids = [c.density_id for c in self.chains]
        if len(set(ids)) != len(ids):
            raise ValueError("chains must target distinct densities")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    @property
    def n_per_chain(self) -> np.ndarray:
        return np.array([c.n for c in self.chains], dtype=np.int64)

    @property
    def n_total(self) -> int:
        return int(self.n_per_chain.sum())

    def __len__(self) -> int:
        return len(self.chains)


def sample_t_iid(
    df: float, mu: float, n: int, seed: int, density_id: str | None = None
) -> ChainSample:
    """iid draws from a Student-t with df degrees of freedom centered at mu."""
    if int(n) < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    states = mu + rng.standard_t(float(df), size=int(n))
    return ChainSample(
        density_id=t_label(df, mu) if density_id is None else density_id,
        states=states,
        kind="iid",
        seed=int(seed),
    )


def _run_imh(
    log_omega_prop: np.ndarray,
    proposals: np.ndarray,
    log_u: np.ndarray,
    log_coin: np.ndarray | None,
    log_c: float | None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Accept/reject recursion shared by the continuous and discrete kernels.

    The trajectory depends only on (proposals, log_u), so marking
    regenerations does not perturb the chain itself.
    """
    n = proposals.shape[0]
    marks = None
    lw = log_omega_prop.tolist()
    props = proposals.tolist()
    lu = log_u.tolist()
    states_out = [0.0] * n
    cur = props[0]
    cur_lw = lw[0]
    states_out[0] = cur
    if log_coin is not None:
        marks_out = [False] * n
        marks_out[0] = True
        lc = log_coin.tolist()
        for i in range(1, n):
            lw_y = lw[i]
            if lu[i] < lw_y - cur_lw:
                log_r = (
                    min(0.0, log_c - cur_lw)
                    + min(0.0, lw_y - log_c)
                    - min(0.0, lw_y - cur_lw)
                )
                if lc[i] < log_r:
                    marks_out[i] = True
                cur = props[i]
                cur_lw = lw_y
            states_out[i] = cur
        marks = np.array(marks_out, dtype=bool)
    else:
        for i in range(1, n):
            lw_y = lw[i]
            if lu[i] < lw_y - cur_lw:
                cur = props[i]
                cur_lw = lw_y
            states_out[i] = cur
    return np.array(states_out, dtype=float), marks


def independence_mh(
    target: UnnormalizedDensity,
    proposal_sampler: Callable[[np.random.Generator, int], np.ndarray],
    proposal_log_density: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    with_regen: bool = False,
    splitting_const: float | None = None,
) -> ChainSample:
    """Independence Metropolis-Hastings chain of length n targeting `target`.

    The initial state is a fresh proposal draw.  With with_regen=True,
    regeneration times from retrospective splitting are recorded; the
    splitting constant defaults to the empirical median of omega over a
    pilot chain driven by a seed derived from `seed`.
    """
    n = int(n)
    if n < 1:
        raise ValueError("n must be positive")
    if with_regen and splitting_const is None:
        splitting_const = tune_splitting_constant(
            target,
            proposal_sampler,
            proposal_log_density,
            pilot_n=min(2000, max(100, n)),
            seed=derive_seed(seed, 0x5147),
        )
    if splitting_const is not None and not splitting_const > 0:
        raise ValueError("splitting_const must be positive")

    rng = np.random.default_rng(seed)
    proposals = np.asarray(proposal_sampler(rng, n), dtype=float)
    if proposals.shape != (n,):
        raise InvalidModelError("proposal_sampler must return n draws")
    log_q = np.asarray(proposal_log_density(proposals), dtype=float)
    if np.any(np.isneginf(log_q)) or np.any(np.isnan(log_q)):
        raise InvalidModelError("proposal density vanished at its own draw")
    log_omega = target.log_density(proposals) - log_q
    with np.errstate(divide="ignore"):
        log_u = np.log(rng.random(n))
        log_coin = np.log(rng.random(n)) if with_regen else None
    log_c = math.log(splitting_const) if with_regen else None
    states, marks = _run_imh(log_omega, proposals, log_u, log_coin, log_c)
    return ChainSample(
        density_id=target.id,
        states=states,
        kind="markov",
        seed=int(seed),
        regen_marks=marks,
    )


def tune_splitting_constant(
    target: UnnormalizedDensity,
    proposal_sampler: Callable[[np.random.Generator, int], np.ndarray],
    proposal_log_density: Callable[[np.ndarray], np.ndarray],
    pilot_n: int = 2000,
    seed: int = 0,
) -> float:
    """Splitting constant: median of omega over a pilot chain's states."""
    pilot = independence_mh(
        target, proposal_sampler, proposal_log_density, pilot_n, seed
    )
    log_omega = target.log_density(pilot.states) - np.asarray(
        proposal_log_density(pilot.states), dtype=float
    )
    return float(np.exp(np.median(log_omega)))


def t_proposal(df: float, mu: float):
    """Sampler/log-density pair for a Student-t proposal."""
    df = float(df)
    mu = float(mu)

    def sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        return mu + rng.standard_t(df, size=size)

    def log_density(x) -> np.ndarray:
        return t_log_density(df, mu, x)

    return sampler, log_density


def sample_t_imh(
    df: float,
    mu: float,
    proposal_df: float,
    proposal_mu: float,
    n: int,
    seed: int,
    with_regen: bool = False,
    splitting_const: float | None = None,
) -> ChainSample:
    """Independence MH chain for a Student-t target with a Student-t proposal."""
    sampler, log_density = t_proposal(proposal_df, proposal_mu)
    return independence_mh(
        t_density(df, mu),
        sampler,
        log_density,
        n,
        seed,
        with_regen=with_regen,
        splitting_const=splitting_const,
    )


def discrete_mh(
    target: UnnormalizedDensity,
    n: int,
    seed: int,
    with_regen: bool = False,
    splitting_const: float | None = None,
) -> ChainSample:
    """Independence MH on a finite table density with a uniform proposal.

    Uniformly ergodic whenever the table is positive somewhere.  omega is
    proportional to the table value, which is all the splitting recipe
    needs since constants cancel.
    """
    if target.space.kind != "discrete":
        raise InvalidModelError("discrete_mh needs a discrete table density")
    n = int(n)
    if n < 1:
        raise ValueError("n must be positive")
    size = int(target.space.size)
    log_tab = target.log_density(np.arange(size, dtype=float))

    rng = np.random.default_rng(seed)
    proposals = rng.integers(0, size, size=n).astype(float)
    log_omega = log_tab[proposals.astype(np.int64)]
    with np.errstate(divide="ignore"):
        log_u = np.log(rng.random(n))
        log_coin = np.log(rng.random(n)) if with_regen else None
    if with_regen and splitting_const is None:
        # pilot-free: the table is the whole state space, use its positive median
        pos = np.exp(log_tab[np.isfinite(log_tab)])
        splitting_const = float(np.median(pos))
    log_c = math.log(splitting_const) if with_regen else None
    states, marks = _run_imh(log_omega, proposals, log_u, log_coin, log_c)
    return ChainSample(
        density_id=target.id,
        states=states,
        kind="markov",
        seed=int(seed),
        regen_marks=marks,
    )


_HEADER_PREFIX = "#"


def save_chain(chain: ChainSample, path) -> None:
    """Write a chain as columnar text with a metadata header.

    States are printed with 17 significant digits so the round trip is
    exact for IEEE doubles.
    """
    meta = {
        "density_id": chain.density_id,
        "kind": chain.kind,
        "seed": chain.seed,
        "n": chain.n,
    }
    has_marks = chain.regen_marks is not None
    with open(path, "w") as fh:
        fh.write(_HEADER_PREFIX + " " + json.dumps(meta) + "\n")
        fh.write("state regen\n" if has_marks else "state\n")
        if has_marks:
            for x, m in zip(chain.states, chain.regen_marks):
                fh.write(f"{x:.17g} {int(m)}\n")
        else:
            for x in chain.states:
                fh.write(f"{x:.17g}\n")


def load_chain(path) -> ChainSample:
    """Read a chain written by save_chain."""
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith(_HEADER_PREFIX):
            raise ValueError(f"{path}: missing chain header")
        meta = json.loads(header[len(_HEADER_PREFIX) :])
        columns = fh.readline().split()
        if columns not in (["state"], ["state", "regen"]):
            raise ValueError(f"{path}: unexpected column header {columns}")
        states = []
        marks = [] if len(columns) == 2 else None
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != len(columns):
                raise ValueError(f"{path}: ragged row {line!r}")
            states.append(float(parts[0]))
            if marks is not None:
                marks.append(bool(int(parts[1])))
    states = np.asarray(states, dtype=float)
    if states.size != int(meta["n"]):
        raise ValueError(f"{path}: header n={meta['n']} but {states.size} rows")
    return ChainSample(
        density_id=str(meta["density_id"]),
        states=states,
        kind=str(meta["kind"]),
        seed=int(meta["seed"]),
        regen_marks=None if marks is None else np.asarray(marks, dtype=bool),
    )
