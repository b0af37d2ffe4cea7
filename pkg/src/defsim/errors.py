"""Exception hierarchy shared across the simulation kit."""

from __future__ import annotations


class DefsimError(Exception):
    """Base class for all kit errors."""


class ConfigInvalid(DefsimError):
    """Scenario file failed validation; message lists every problem found."""

    def __init__(self, problems: list[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = problems
        super().__init__("; ".join(problems))


# -- environment ------------------------------------------------------------

class UnknownEntity(DefsimError):
    """Effect target does not exist (stale plan; execution treats as failure)."""


class UnknownChannel(DefsimError):
    pass


class UnknownHost(DefsimError):
    pass


class StaleToken(DefsimError):
    """Snapshot token refers to a host that no longer exists."""


class NoRequiredServices(DefsimError):
    """Functionality is undefined when the scenario declares no required service."""


# -- adversary --------------------------------------------------------------

class NoResidentAgent(DefsimError):
    """Hunt invoked on a host with no resident agent."""


# -- sensing ----------------------------------------------------------------

class StaleDescriptors(DefsimError):
    """Descriptor batch carries a tick older than the world state."""


# -- planning ---------------------------------------------------------------

class PreconditionUnevaluable(DefsimError):
    """A precondition references a feature absent from the world state."""


# -- execution --------------------------------------------------------------

class AuthorityNotHeld(DefsimError):
    """Agent asked to execute while authority rests with the remote center."""


class ModeForbidden(DefsimError):
    """Operation not permitted in the agent's current mode."""


# -- collaboration ----------------------------------------------------------

class NoRoute(DefsimError):
    """No usable channel connects the two hosts."""


class InvalidTransition(DefsimError):
    """Handover message does not match the current authority holder."""


class UnknownGoal(DefsimError):
    pass


class UnknownField(DefsimError):
    pass


class PropagationRefused(DefsimError):
    """Base for replica installation refusals; names the first failed condition."""


class RefusedNonFriendly(PropagationRefused):
    pass


class RefusedNoAuthorization(PropagationRefused):
    pass


class RefusedNoTrigger(PropagationRefused):
    pass


class RefusedNoRoute(PropagationRefused):
    pass


# -- runner -----------------------------------------------------------------

class SchemaMismatch(DefsimError):
    """Trace or knowledge file written under a different schema version."""


class CorruptTrace(DefsimError):
    """Trace file is truncated or not parseable."""


class IndexOutOfRange(DefsimError):
    """Decision index outside the decision log."""
