#!/usr/bin/env python
from __future__ import annotations

import datetime
import logging
import sys
import time
import traceback
import warnings
from typing import Optional, Sequence

from rich.console import Console

from hnk import __version__ as version
from .core import Runner
from .exception import HnkException, HnkExceptNumeric
from .runtime_session import HnkSession
from .ui.console.view import View
from .user_opts import Options

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2
EXIT_INTERRUPTED = 130  # 128 + 2 for SIGINT


def run(argv: Optional[Sequence[str]] = None, console: Optional[Console] = None) -> int:
    """
    Executing one hnk command. Returns the exit code
    """
    session: Optional[HnkSession] = None
    view: Optional[View] = None
    logger = logging.getLogger("debug_log")
    console = console or Console()
    starttime = time.time()
    exit_code = EXIT_OK

    try:
        # parse command line
        options = Options()
        parsed_args = options.configure_parser().parse_args(argv)
        if parsed_args.version:
            console.print(f"hnk {version}")
            return EXIT_OK
        options.read_args(parsed_args, console)
        view = View(console, bool(options.quiet))
        session = HnkSession(options, console).compile()

        if options.dump_config:
            options.export_config()
            view.message(f"Config written into {options.dump_config}.")
            return EXIT_OK

        view.header(session)
        # Logging startup options on startup
        logger.info(f"Starting with options {options.get_all_opts()}")
        summary = Runner(session, view).run()
        view.footer(summary)

    except HnkExceptNumeric as e:
        exception_message = "Numeric failure: {}".format(str(e))
        (view or View(console)).error(exception_message)
        logger.exception(exception_message)
        exit_code = EXIT_NUMERIC
    except HnkException as e:
        exception_message = "Fatal exception: {}".format(str(e))
        (view or View(console)).error(exception_message)
        logger.exception(exception_message)
        exit_code = EXIT_INVALID
    except KeyboardInterrupt:
        user_message = "Keyboard interrupt registered."
        warnings.warn(user_message)
        logger.info(user_message)
        exit_code = EXIT_INTERRUPTED
    except Exception as e:
        exception_message = "Unhandled exception: {}".format(str(e))
        logger.exception(exception_message)
        (view or View(console)).error(exception_message)
        traceback.print_exc()
        exit_code = EXIT_INVALID
    finally:
        if session:
            session.close()
        logger.debug(f"Ended with exit code {exit_code} after "
                     f"{datetime.timedelta(seconds=int(time.time() - starttime))}")
    return exit_code


def main():
    sys.exit(run())
