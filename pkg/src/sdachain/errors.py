"""Shared exception base for domain errors.

Every module derives its error types from :class:`SdaError` so the CLI
can map domain failures (parse, geometry, validation, decay) to exit
code 1 while genuine usage errors stay on argparse's exit code 2.
"""


class SdaError(Exception):
    """Base class for all domain errors raised by this package."""
