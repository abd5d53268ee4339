"""Exception hierarchy shared across the toolkit."""


class FaultFSError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FaultFSError):
    """Invalid configuration, detected before anything runs."""


class PreconditionError(FaultFSError, ValueError):
    """An operation was called outside its domain (harness misconfiguration)."""


class SetupError(FaultFSError):
    """The environment cannot host a session (missing root, no FUSE, ...)."""


class CampaignError(FaultFSError):
    """A campaign cannot proceed (golden run failed, workload nondeterministic, ...)."""
