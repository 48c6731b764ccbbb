import structlog
from django.core.management.base import BaseCommand, CommandError

from autograd.tensor import ShapeError
from monitoring.context import bind_run_context
from monitoring.metrics import training_tracker

from ..errors import FusecapError

logger = structlog.get_logger(__name__)


class FusecapCommand(BaseCommand):
    """
    Base for every ``fusecap`` subcommand. Subclasses implement ``run``;
    project errors become ``CommandError`` with the error's exit code.
    """

    def run(self, **options):
        raise NotImplementedError

    def handle(self, *args, **options):
        command = self.__module__.rsplit(".", 1)[-1]
        with bind_run_context(command):
            try:
                self.run(**options)
            except FusecapError as exc:
                logger.error("command failed", error=str(exc), error_type=type(exc).__name__)
                raise CommandError(str(exc), returncode=exc.exit_code) from exc
            except ShapeError as exc:
                logger.error("command failed", error=str(exc), error_type="ShapeError")
                raise CommandError(str(exc), returncode=2) from exc
            finally:
                training_tracker.flush()

    def write_csv(self, header, rows):
        self.stdout.write(",".join(header))
        for row in rows:
            self.stdout.write(",".join(str(v) for v in row))
