"""
Constraint-aware evolutionary search over sub-network choices.

Regularized (aging) evolution: the population is a FIFO of fixed size;
each generation tournament-selects parents, mutates them, rejects mutants
over the MACs budget and appends the survivors, pushing the oldest members
out. Fitness is higher-is-better; ties go to fewer MACs, then to the
smaller choice encoding.
"""

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .costmodel import model_cost
from .decode import fuse_heatmaps
from .engine import forward
from .errors import ChoiceError, SearchError
from .seeding import rng_for
from .supernet import SearchSpace, SubnetChoice, WeightStore, extract, sample_uniform, smallest_choice, subnet_arch
from .synth import SynthParams, make_scene

logger = logging.getLogger(__name__)


class FitnessEvaluator(Protocol):
    def evaluate(self, choice: SubnetChoice) -> float:
        ...


def choice_macs(space: SearchSpace, choice: SubnetChoice) -> int:
    return model_cost(subnet_arch(space.supernet, choice, genes=space.genes)).total_macs


class NegMacsEvaluator:
    def __init__(self, space: SearchSpace):
        self.space = space

    def evaluate(self, choice: SubnetChoice) -> float:
        return -float(choice_macs(self.space, choice))


class CallableEvaluator:
    """ Wraps any `choice -> float` function. """

    def __init__(self, fn: Callable[[SubnetChoice], float]):
        self.fn = fn

    def evaluate(self, choice: SubnetChoice) -> float:
        return float(self.fn(choice))


def heatmap_score(predicted: np.ndarray, target: np.ndarray) -> float:
    """ Negative mean squared error; 0 is a perfect match. """
    if predicted.shape != target.shape:
        raise ChoiceError(f'{predicted.shape} vs {target.shape}: heatmap shapes differ')
    diff = predicted.astype(np.float64) - target.astype(np.float64)
    return -float(np.mean(diff * diff))


class HeatmapProxyEvaluator:
    """
    Scores a sub-network by running its extracted weights on fixed random
    images and comparing the fused heatmaps with a planted synthetic scene
    of the same size. Deterministic for a fixed seed.
    """

    def __init__(self, store: WeightStore, *, seed: int = 0, num_images: int = 1, persons: int = 1):
        self.store = store
        self.seed = seed
        self.num_images = num_images
        self.persons = persons

    def inputs(self, resolution: int) -> np.ndarray:
        rng = rng_for(self.seed, 'proxy-input', resolution)
        return rng.standard_normal((self.num_images, 3, resolution, resolution)).astype(np.float32)

    def target(self, size: int, num_joints: int) -> np.ndarray:
        params = SynthParams(persons=self.persons, joints=num_joints, heatmap_size=size, margin=1, window=3)
        return make_scene(self.seed, params).heatmaps

    def evaluate(self, choice: SubnetChoice) -> float:
        sub = extract(self.store, choice)
        x = self.inputs(choice.resolution)
        result = forward(sub.arch, sub, x)

        scores = []
        for n in range(self.num_images):
            heatmaps, _ = fuse_heatmaps([o[n:n + 1] for o in result.outputs], sub.arch.num_joints)
            scores.append(heatmap_score(heatmaps, self.target(heatmaps.shape[-1], sub.arch.num_joints)))
        return float(np.mean(scores))


@dataclass(frozen=True, slots=True)
class EvolutionParams:
    population: int = 64
    tournament: int = 8
    p_mut: float = 0.1
    """ Per-gene probability of resampling to a different value. """
    retry_cap: int = 100
    """ Attempts at drawing a constraint-satisfying candidate before giving up. """
    generations: int = 50
    offspring: int = 16
    """ Children per generation. """
    workers: int = 1
    """ Concurrent fitness evaluations. """

    def __post_init__(self):
        if self.population < 1 or self.offspring < 1 or self.retry_cap < 1:
            raise ValueError('population, offspring and retry_cap must be positive')
        if not 1 <= self.tournament <= self.population:
            raise ValueError(f'{self.tournament}: tournament size must lie in [1, {self.population}]')
        if not 0.0 <= self.p_mut <= 1.0:
            raise ValueError(f'{self.p_mut}: mutation probability must lie in [0, 1]')
        if self.generations < 0 or self.workers < 1:
            raise ValueError('generations must be non-negative and workers positive')


@dataclass(frozen=True, slots=True)
class Candidate:
    choice: SubnetChoice
    fitness: float
    macs: int

    def rank(self) -> tuple:
        """ Smaller is better. """
        return (-self.fitness, self.macs, self.choice.encoding())


@dataclass(frozen=True, slots=True)
class GenerationRecord:
    generation: int
    best_choice: SubnetChoice
    fitness: float
    gmacs: float

    def to_dict(self) -> dict:
        return {
            'generation': self.generation,
            'best': self.best_choice.to_dict(),
            'fitness': self.fitness,
            'gmacs': self.gmacs,
        }


@dataclass(slots=True)
class SearchState:
    space: SearchSpace
    constraint_macs: float | None
    seed: int
    population: deque = field(default_factory=deque)
    generation: int = 0
    best: Candidate | None = None
    history: list[GenerationRecord] = field(default_factory=list)
    evaluations: int = 0
    """ Distinct choices evaluated. """

    def record(self) -> None:
        self.history.append(GenerationRecord(
            self.generation, self.best.choice, self.best.fitness, round(self.best.macs / 1e9, 6)
        ))


def mutate(choice: SubnetChoice, space: SearchSpace, rng: np.random.Generator | int,
           p_mut: float = 0.1) -> SubnetChoice:
    """
    Resample each gene (the resolution and every width ratio) independently
    with probability `p_mut`, always to a value different from the current
    one. Genes with a single option never change.
    """
    if isinstance(rng, int):
        rng = rng_for(rng, 'mutate')

    def pick(current, options: Sequence):
        others = [o for o in options if o != current]
        if rng.random() < p_mut and others:
            return others[rng.integers(len(others))]
        return current

    resolution = pick(choice.resolution, space.resolutions)
    ratios = [pick(r, space.width_ratios) for r in choice.ratios]
    return SubnetChoice.from_ratios(space, resolution, ratios)


class _Search:
    def __init__(self, space, constraint_macs, evaluator, params, seed):
        self.space = space
        self.constraint = constraint_macs
        self.evaluator = evaluator
        self.params = params
        self.rng = rng_for(seed, 'search')
        self.state = SearchState(space, constraint_macs, seed, deque(maxlen=params.population))
        self.fitness_cache: dict[tuple, float] = {}
        self.macs_cache: dict[tuple, int] = {}

    def macs(self, choice: SubnetChoice) -> int:
        key = choice.encoding()
        if key not in self.macs_cache:
            self.macs_cache[key] = choice_macs(self.space, choice)
        return self.macs_cache[key]

    def feasible(self, choice: SubnetChoice) -> bool:
        return self.constraint is None or self.macs(choice) <= self.constraint

    def draw(self, make: Callable[[], SubnetChoice], what: str) -> SubnetChoice:
        for _ in range(self.params.retry_cap):
            choice = make()
            if self.feasible(choice):
                return choice
            logger.debug('rejected %s at %.3f GMACs', what, self.macs(choice) / 1e9)
        raise SearchError(f'no {what} within {self.constraint} MACs after {self.params.retry_cap} attempts')

    def evaluate(self, choices: list[SubnetChoice], mapper) -> list[Candidate]:
        pending = list({c.encoding(): c for c in choices if c.encoding() not in self.fitness_cache}.values())
        for choice, fitness in zip(pending, mapper(self.evaluator.evaluate, pending)):
            self.fitness_cache[choice.encoding()] = float(fitness)
        self.state.evaluations += len(pending)

        candidates = [Candidate(c, self.fitness_cache[c.encoding()], self.macs(c)) for c in choices]
        for candidate in candidates:
            if self.state.best is None or candidate.rank() < self.state.best.rank():
                self.state.best = candidate
        return candidates

    def select(self) -> Candidate:
        members = list(self.state.population)
        picks = self.rng.choice(len(members), size=min(self.params.tournament, len(members)), replace=False)
        return min((members[i] for i in picks), key=Candidate.rank)

    def run(self, mapper) -> SearchState:
        state = self.state
        initial = [
            self.draw(lambda: sample_uniform(self.space, self.rng), 'initial sample')
            for _ in range(self.params.population)
        ]
        state.population.extend(self.evaluate(initial, mapper))
        state.record()

        for generation in range(1, self.params.generations + 1):
            children = []
            for _ in range(self.params.offspring):
                parent = self.select()
                children.append(self.draw(
                    lambda: mutate(parent.choice, self.space, self.rng, self.params.p_mut), 'mutant'
                ))
            state.population.extend(self.evaluate(children, mapper))
            state.generation = generation
            state.record()
            logger.info(
                'generation %d: best fitness %.6g at %.3f GMACs', generation, state.best.fitness, state.best.macs / 1e9
            )
        return state


def evolve(
    space: SearchSpace,
    constraint_macs: float | None,
    evaluator: FitnessEvaluator,
    params: EvolutionParams = EvolutionParams(),
    seed: int = 0,
) -> SearchState:
    """
    Run regularized evolution. `constraint_macs` of None searches without a
    budget. Raises SearchError when even the smallest choice is over budget
    or when the retry cap runs out.
    """
    search = _Search(space, constraint_macs, evaluator, params, seed)
    if not search.feasible(smallest_choice(space)):
        raise SearchError(
            f'{constraint_macs}: constraint is infeasible, the smallest choice needs '
            f'{search.macs(smallest_choice(space))} MACs'
        )

    if params.workers == 1:
        return search.run(map)
    with ThreadPoolExecutor(max_workers=params.workers) as pool:
        return search.run(pool.map)
