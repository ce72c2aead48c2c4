"""
Programmatic entry point for the ``srood`` management command.

``run_command`` parses the subcommand, runs it and maps failures to exit
codes with a single ``error code=<code> message=<text>`` line on stderr.
"""

import logging
import sys
from typing import Optional, Sequence, TextIO

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING = 3

USAGE_CODES = frozenset({
    "usage", "config_error", "unknown_key", "invalid_value", "inconsistent_config",
    "invalid_train_config", "invalid_threshold", "invalid_variant", "invalid_weights",
    "invalid_ablation", "invalid_score_fn",
})
MISSING_CODES = frozenset({"missing_checkpoint", "missing_artifact", "missing_file"})


class ExperimentError(CommandError):
    """A failed stage, carrying the machine-readable code and exit status."""

    def __init__(self, message: str, code: str = "error", returncode: int = EXIT_FAILURE):
        super().__init__(message, returncode=returncode)
        self.code = code
        self.message = message

    @classmethod
    def from_validation(cls, exc: ValidationError) -> "ExperimentError":
        code = getattr(exc, "code", None) or "error"
        return cls(" ".join(exc.messages), code, exit_code_for(code))

    def line(self) -> str:
        message = " ".join(self.message.split())
        return f"error code={self.code} message={message}"


def exit_code_for(code: Optional[str]) -> int:
    if code in USAGE_CODES:
        return EXIT_USAGE
    if code in MISSING_CODES:
        return EXIT_MISSING
    return EXIT_FAILURE


def _report_failure(error: ExperimentError, stderr: TextIO) -> int:
    logger.error(f"Stage failed ({error.code}): {error.message}")
    stderr.write(error.line() + "\n")
    return error.returncode


def run_command(
    argv: Sequence[str],
    stdout: Optional[TextIO] = None,
    stderr: Optional[TextIO] = None,
) -> int:
    """
    Run one ``srood`` subcommand.

    Args:
        argv: arguments after the command name, e.g. ``["train", "--config", "exp.txt"]``
        stdout: stream for normal output (defaults to ``sys.stdout``)
        stderr: stream for the error line (defaults to ``sys.stderr``)

    Returns:
        Process exit code: 0 success, 1 domain failure, 2 usage or config
        error, 3 missing prerequisite artifact.
    """
    from .management.commands.srood import Command

    stderr = stderr or sys.stderr
    command = Command(stdout=stdout, stderr=stderr)
    try:
        parser = command.create_parser("manage.py", "srood")
        try:
            options = parser.parse_args(list(argv))
        except CommandError as exc:
            raise ExperimentError(str(exc).removeprefix("Error: "), "usage", EXIT_USAGE)
        cmd_options = vars(options)
        args = cmd_options.pop("args", ())
        command.execute(*args, **cmd_options)
    except ExperimentError as exc:
        return _report_failure(exc, stderr)
    except ValidationError as exc:
        return _report_failure(ExperimentError.from_validation(exc), stderr)
    except OSError as exc:
        return _report_failure(ExperimentError(str(exc), "io_error", EXIT_FAILURE), stderr)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    return EXIT_OK
