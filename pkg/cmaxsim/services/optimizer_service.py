"""Polak-Ribiere (PR+) conjugate-gradient ascent on the contrast C(omega).

One call to ``update`` is one ``omega <- Update(omega, s)`` step of the stage
scheduler. The line search is pluggable; ``BacktrackingLineSearch`` is the
default and measures its step as a distance in rad/s along the unit
direction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Protocol

import numpy as np

from cmaxsim.core.errors import DataError, OptimizerError
from cmaxsim.core.logging import get_logger
from cmaxsim.models.schemas import MotionParams
from cmaxsim.services.contrast_service import Objective

logger = get_logger("optimizer")

Evaluator = Callable[[MotionParams], Objective]

DEFAULT_STEP = 1e-3
MAX_HALVINGS = 8
MAX_DOUBLINGS = 12
# At omega = 0 every warped event sits on a grid node; the gradient there is
# taken as the mean of the gradients this far (rad/s) to either side.
LATTICE_JITTER = 1e-6
_JITTER_AXIS = np.ones(3) / math.sqrt(3.0)


@dataclass(frozen=True, eq=False)
class OptState:
    omega: MotionParams
    step: float = DEFAULT_STEP
    prev_grad: Optional[np.ndarray] = None
    direction: Optional[np.ndarray] = None
    iter: int = 0
    current: Optional[Objective] = None
    evaluations: int = 0
    initial_step: Optional[float] = None

    def __post_init__(self) -> None:
        if self.initial_step is None:
            object.__setattr__(self, "initial_step", self.step)

    def restart(self, current: Optional[Objective] = None) -> "OptState":
        """Drop the conjugate direction and go back to the initial step."""
        return replace(self, step=self.initial_step, prev_grad=None, direction=None, current=current)


@dataclass(frozen=True, eq=False)
class LineSearchResult:
    accepted: bool
    omega: np.ndarray
    objective: Objective
    eta: float
    evaluations: int


class LineSearch(Protocol):
    def __call__(self, evaluator: Evaluator, omega: np.ndarray, direction: np.ndarray,
                 current: Objective, step: float) -> LineSearchResult: ...


def _evaluate(evaluator: Evaluator, omega: np.ndarray) -> Optional[Objective]:
    try:
        params = MotionParams.from_array(omega)
    except DataError:
        return None
    return evaluator(params)


def parabola_vertex(a: float, fa: float, b: float, fb: float, c: float, fc: float) -> Optional[float]:
    """Abscissa of the maximum of the parabola through three points, ``a < b < c``.

    None unless ``fb`` is the largest value and the vertex falls inside ``(a, c)``.
    """
    if not (fb >= fa and fb >= fc) or not all(math.isfinite(v) for v in (fa, fb, fc)):
        return None
    num = (b - a) ** 2 * (fb - fc) - (b - c) ** 2 * (fb - fa)
    den = (b - a) * (fb - fc) - (b - c) * (fb - fa)
    if den == 0.0:
        return None
    t = b - 0.5 * num / den
    return t if a < t < c else None


class BacktrackingLineSearch:
    """Ladder search on the step length, refined with a parabola.

    ``step`` is a distance in rad/s along the unit ascent direction. If the
    trial at ``step`` improves C the step keeps doubling while C improves.
    Otherwise it is halved up to ``max_halvings`` times. When no shorter step
    improves, longer ones are tried (up to ``max_doublings`` doublings) before
    the step is rejected: C jumps wherever many events cross a grid line or a
    border together, and near such a point every short step looks worse. The
    best rung is refined once by the parabola through it and its two
    neighbours; the vertex is kept only if it is better.
    """

    def __init__(self, max_halvings: int = MAX_HALVINGS, max_doublings: int = MAX_DOUBLINGS,
                 refine: bool = True) -> None:
        self.max_halvings = max_halvings
        self.max_doublings = max_doublings
        self.refine = refine

    def __call__(self, evaluator: Evaluator, omega: np.ndarray, direction: np.ndarray,
                 current: Objective, step: float) -> LineSearchResult:
        norm = float(np.linalg.norm(direction))
        if not (norm > 0 and math.isfinite(norm)):
            return LineSearchResult(False, omega, current, step, 0)
        unit = direction / norm
        values: Dict[float, float] = {0.0: current.variance}
        objectives: Dict[float, Objective] = {}

        def trial(t: float) -> float:
            obj = _evaluate(evaluator, omega + t * unit)
            ok = obj is not None and obj.is_finite()
            values[t] = obj.variance if ok else -math.inf
            if ok:
                objectives[t] = obj
            return values[t]

        def grow(t: float) -> float:
            for _ in range(self.max_doublings):
                if trial(t * 2.0) <= values[t]:
                    break
                t *= 2.0
            return t

        c0 = current.variance
        best: Optional[float] = None
        if trial(step) > c0:
            best = grow(step)
        else:
            t = step
            for _ in range(self.max_halvings):
                t *= 0.5
                if trial(t) > c0:
                    best = t
                    break
            if best is None:
                t = step
                for _ in range(self.max_doublings):
                    t *= 2.0
                    if trial(t) > c0:
                        best = grow(t)
                        break

        if best is None:
            return LineSearchResult(False, omega, current, step, len(values) - 1)

        if self.refine:
            rungs = sorted(values)
            i = rungs.index(best)
            if 0 < i < len(rungs) - 1:
                a, c = rungs[i - 1], rungs[i + 1]
                vertex = parabola_vertex(a, values[a], best, values[best], c, values[c])
                if vertex is not None and vertex not in values and trial(vertex) > values[best]:
                    best = vertex
        return LineSearchResult(True, omega + best * unit, objectives[best], best, len(values) - 1)


def pr_direction(g: np.ndarray, prev_grad: Optional[np.ndarray], prev_dir: Optional[np.ndarray]) -> np.ndarray:
    if prev_grad is None or prev_dir is None:
        return g.copy()
    denom = float(prev_grad @ prev_grad)
    if denom == 0.0:
        return g.copy()
    beta = float(g @ (g - prev_grad)) / denom
    if beta <= 0.0:
        return g.copy()
    d = g + beta * prev_dir
    if float(d @ g) <= 0.0:
        return g.copy()
    return d


def on_lattice(omega: MotionParams) -> bool:
    """True at omega = 0, where every event warps exactly onto its own pixel."""
    return omega.wx == 0.0 and omega.wy == 0.0 and omega.wz == 0.0


def jittered_gradient(evaluator: Evaluator, omega: MotionParams) -> np.ndarray:
    """Mean of the gradients at ``omega +/- LATTICE_JITTER`` along the diagonal.

    Each event lands on opposite sides of its grid node in the two
    evaluations, so the one-sided bilinear derivatives average out.
    """
    base = omega.as_array()
    offset = LATTICE_JITTER * _JITTER_AXIS
    grads = [np.asarray(evaluator(MotionParams.from_array(base + sign * offset)).gradient, dtype=np.float64)
             for sign in (1.0, -1.0)]
    return 0.5 * (grads[0] + grads[1])


def update(state: OptState, evaluator: Evaluator,
           line_search: Optional[LineSearch] = None) -> tuple[OptState, Objective]:
    line_search = line_search or BacktrackingLineSearch()

    evaluations = state.evaluations
    current = state.current
    if current is None:
        current = evaluator(state.omega)
        evaluations += 1
    g = np.asarray(current.gradient, dtype=np.float64)
    if on_lattice(state.omega):
        g = jittered_gradient(evaluator, state.omega)
        evaluations += 2
    if not np.all(np.isfinite(g)):
        raise OptimizerError(f"non-finite gradient {g.tolist()} at omega={state.omega}")

    if not np.any(g):
        logger.debug("zero gradient at iteration %d, omega unchanged", state.iter)
        return replace(state, iter=state.iter + 1, current=current, evaluations=evaluations), current

    d = pr_direction(g, state.prev_grad, state.direction)
    omega = state.omega.as_array()
    result = line_search(evaluator, omega, d, current, state.step)
    evaluations += result.evaluations

    if not result.accepted:
        logger.debug("line search rejected at iteration %d (step %g); restarting direction",
                     state.iter, state.step)
        rejected = replace(state, step=state.initial_step, prev_grad=None, direction=None,
                           iter=state.iter + 1, current=current, evaluations=evaluations)
        return rejected, current

    accepted = replace(state, omega=MotionParams.from_array(result.omega), step=result.eta,
                       prev_grad=g, direction=d, iter=state.iter + 1, current=result.objective,
                       evaluations=evaluations)
    return accepted, result.objective


def warm_start(prev_window_omega: Optional[MotionParams]) -> MotionParams:
    return prev_window_omega if prev_window_omega is not None else MotionParams()
