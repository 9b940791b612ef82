"""Exception types shared across the package."""


class AgentLoopError(Exception):
    """Base class for all package errors."""


class EmptyQuery(AgentLoopError):
    pass


class MalformedPlannerOutput(AgentLoopError):
    pass


class MalformedExecutorOutput(AgentLoopError):
    pass


class MalformedVerifierOutput(AgentLoopError):
    pass


class MalformedJudgeOutput(AgentLoopError):
    pass


class DuplicateToolName(AgentLoopError):
    pass


class MissingBinding(AgentLoopError):
    """A prompt template placeholder was left unbound."""

    def __init__(self, name: str):
        super().__init__(f"missing binding for placeholder {name!r}")
        self.name = name


class BackendUnavailable(AgentLoopError):
    pass


class ResponseTruncated(AgentLoopError):
    """The backend stopped generating because the token limit was reached."""


class GroupTooSmall(AgentLoopError):
    pass


class MissingLogprobs(AgentLoopError):
    pass


class NonFiniteRatio(AgentLoopError):
    pass


class NonFiniteGradient(AgentLoopError):
    pass


class NonFiniteParameters(AgentLoopError):
    pass


class ConfigError(AgentLoopError):
    """Invalid run configuration; message names the offending field."""
