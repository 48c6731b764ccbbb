import contextlib
import uuid

import structlog

logger = structlog.get_logger(__name__)


@contextlib.contextmanager
def bind_run_context(command, **fields):
    """Bind a fresh run_id and the subcommand name to every log event of the block."""
    run_id = str(uuid.uuid4())
    tokens = structlog.contextvars.bind_contextvars(run_id=run_id, command=command, **fields)
    logger.info("run started")
    try:
        yield run_id
    finally:
        logger.info("run finished")
        structlog.contextvars.reset_contextvars(**tokens)
