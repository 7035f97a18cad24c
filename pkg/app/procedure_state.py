"""
procedure_state.py

Phases of the injection workflow, the legal edges between them, immutable
state snapshots and the snapshot caretaker used to rewind on restart.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Mapping

from app.exceptions import TransitionError, ValidationError
from app.registration import RegistrationTransform


class Phase(str, Enum):
    MOTION_ESTIMATION = "motion_estimation"
    NEEDLE_REGISTRATION = "needle_registration"
    SANITY_CHECK = "sanity_check"
    MOTION_SYNC = "motion_sync"
    INSERTION = "insertion"
    ABORTED = "aborted"
    COMPLETED = "completed"

    @property
    def terminal(self) -> bool:
        return self in (Phase.ABORTED, Phase.COMPLETED)


_EDGES: dict[Phase, frozenset[Phase]] = {
    Phase.MOTION_ESTIMATION: frozenset({Phase.NEEDLE_REGISTRATION}),
    Phase.NEEDLE_REGISTRATION: frozenset({Phase.SANITY_CHECK}),
    Phase.SANITY_CHECK: frozenset({Phase.MOTION_SYNC, Phase.MOTION_ESTIMATION}),
    Phase.MOTION_SYNC: frozenset({Phase.INSERTION}),
    Phase.INSERTION: frozenset({Phase.COMPLETED}),
    Phase.ABORTED: frozenset(),
    Phase.COMPLETED: frozenset(),
}


def allowed_transitions(phase: Phase) -> frozenset[Phase]:
    """Workflow edges out of `phase`; every non-terminal phase may also abort."""
    edges = _EDGES[phase]
    return edges if phase.terminal else edges | {Phase.ABORTED}


@dataclass(frozen=True, slots=True)
class ProcedureState:
    phase: Phase = Phase.MOTION_ESTIMATION
    e: float | None = None                      # mm
    registration: RegistrationTransform | None = None
    sanity_passed: bool = False
    injection_success: bool = False
    restarts: int = 0

    def transition(self, to: Phase) -> "ProcedureState":
        if to not in allowed_transitions(self.phase):
            raise TransitionError(f"Illegal transition {self.phase.value} -> {to.value}")
        if to is Phase.MOTION_SYNC and not self.sanity_passed:
            raise TransitionError("Motion sync needs a passed sanity check")
        if to is Phase.INSERTION and (self.registration is None or not self.sanity_passed):
            raise TransitionError("Insertion needs a registration and a passed sanity check")
        if to is Phase.MOTION_ESTIMATION:
            return ProcedureState(restarts=self.restarts + 1)
        return replace(self, phase=to)


# --------------------------------------------------  Snapshots
@dataclass(frozen=True, slots=True)
class ProcedureMemento:
    """Immutable snapshot of the procedure state."""
    _state: ProcedureState

    def get_state(self) -> ProcedureState:
        return self._state


class StateHistory:
    """Stack of state snapshots, oldest first."""

    def __init__(self) -> None:
        self._snapshots: list[ProcedureMemento] = []

    def push(self, m: ProcedureMemento) -> None:
        self._snapshots.append(m)

    def latest(self, phase: Phase | None = None) -> ProcedureMemento | None:
        for m in reversed(self._snapshots):
            if phase is None or m.get_state().phase is phase:
                return m
        return None

    def states(self) -> tuple[ProcedureState, ...]:
        return tuple(m.get_state() for m in self._snapshots)

    def __len__(self) -> int:
        return len(self._snapshots)


# --------------------------------------------------  Event replay
def format_detail(**fields: object) -> str:
    """`key=value;...` with floats in repr form so replay is exact."""
    return ";".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())


def parse_detail(detail: str) -> dict[str, str]:
    if not isinstance(detail, str) or not detail:
        return {}
    try:
        return dict(part.split("=", 1) for part in detail.split(";"))
    except ValueError as exc:
        raise ValidationError(f"Malformed event detail {detail!r}") from exc


def replay(events: Iterable[Mapping[str, object]]) -> ProcedureState:
    """Rebuild the final state from `event`/`detail` records."""
    state = ProcedureState()
    for ev in events:
        kind = ev["event"]
        fields = parse_detail(ev.get("detail", ""))
        if kind == "transition":
            state = state.transition(Phase(fields["to"]))
        elif kind == "estimate":
            state = replace(state, e=float(fields["e_mm"]))
        elif kind == "registration":
            state = replace(state, registration=RegistrationTransform(
                b=float(fields["b_mm_per_px"]),
                p_init=float(fields["p_init_px"]),
                z_init=float(fields["z_init_mm"]),
                sign=int(fields["sign"]),
            ))
        elif kind == "sanity":
            state = replace(state, sanity_passed=fields["passed"] == "True")
        elif kind == "injection":
            state = replace(state, injection_success=fields["success"] == "True")
    return state
