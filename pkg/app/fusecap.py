#!/usr/bin/env python
"""fusecap command-line entry: ``fusecap <subcommand> [options]``."""
import os
import sys

SUBCOMMANDS = ("train", "eval", "gridsearch", "caption", "metrics", "params", "synth", "ablate")


def main():
    """Run a fusecap subcommand through Django's management machinery."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "app.settings")
    try:
        from django.core.management import execute_from_command_line
    except ImportError as exc:
        raise ImportError(
            "Couldn't import Django. Are you sure it's installed and "
            "available on your PYTHONPATH environment variable? Did you "
            "forget to activate a virtual environment?"
        ) from exc
    if len(sys.argv) < 2 or sys.argv[1] not in SUBCOMMANDS:
        sys.stderr.write(f"usage: fusecap {{{'|'.join(SUBCOMMANDS)}}} [options]\n")
        sys.exit(2)
    execute_from_command_line(["fusecap"] + sys.argv[1:])


if __name__ == "__main__":
    main()
