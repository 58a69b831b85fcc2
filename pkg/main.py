import argparse
import importlib
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv

from coloredformatter import ColoredFormatter, reset_stats
from settings import Settings
from utils import ValidationError

logger = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent


def load_environment(root: Path = ROOT):
    global_env = root / "global.env"
    if not global_env.exists():
        raise FileNotFoundError(f"{global_env} not found")
    load_dotenv(global_env)
    local_env = Path(os.getenv("LOCAL_ENV_FILE", "local.env"))
    if not local_env.is_absolute():
        local_env = root / local_env
    if not local_env.exists():
        # touch the file
        local_env.touch()
    load_dotenv(local_env, override=True)


def setup_logging(settings: Settings):
    reset_stats() # summaries count this run only
    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(ColoredFormatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    logging.basicConfig(level=logging.getLevelName(settings.log_level),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                        handlers=[
                            logging.FileHandler(settings.log_file),
                            stream_handler
                        ],
                        force=True) # needed to delete the default stderr handler


class CliParser(argparse.ArgumentParser):
    """Reports usage errors as ValidationError so they share exit code 1."""
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def build_parser(extensions: list[str]) -> CliParser:
    parser = CliParser(prog="ditpaint", description="Text-free video inpainting with a flow-matching diffusion transformer")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in extensions:
        try:
            module = importlib.import_module(name)
        except ImportError as e:
            raise ValidationError(f"cannot load extension {name}: {e}") from e
        module.setup(subparsers)
        logger.debug(f"loaded extension {name}")
    return parser


def main(argv: list[str] | None = None) -> int:
    load_environment()
    settings = Settings()
    setup_logging(settings)
    try:
        settings.apply()
        args = build_parser(settings.extensions).parse_args(argv)
        return args.handler(args) or 0
    except ValidationError as e:
        logger.error(str(e))
        return 1
    except Exception as e:
        logger.exception(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
