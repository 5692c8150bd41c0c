"""
pdmp-lab command line.

Usage example:
```
python -m src.main sample --process bps --target gaussian --d 10 --events 100000 --seed 7
python -m src.main certify --m 1 --M 1 --alpha 0
python -m src.main couple --target gaussian --d 2 --replicates 1000 --horizon 10
```

Flags override keys read from an optional `--config FILE` (key=value lines).
"""

import argparse
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from src.api.commands import COMMANDS
from src.core.errors import PdmpLabError, UsageError
from src.core.logging import logger, set_level

EXIT_DOMAIN = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dims(text: str) -> List[int]:
    try:
        return [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _flag(parser: argparse.ArgumentParser, name: str, **kwargs) -> None:
    parser.add_argument(f"--{name}", default=argparse.SUPPRESS, **kwargs)


def _switch(parser: argparse.ArgumentParser, name: str, help: str) -> None:
    parser.add_argument(f"--{name}", action="store_const", const=True, default=argparse.SUPPRESS, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdmp-lab", description="Bouncy Particle Sampler and Randomized HMC experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help: str, ensemble: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file; flags take precedence")
        p.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
        _flag(p, "seed", type=int)
        _flag(p, "stream", type=int)
        _flag(p, "out")
        if ensemble:
            _flag(p, "replicates", type=int)
            _flag(p, "threads", type=int, help="worker pool size (fallback PDMP_LAB_THREADS)")
        return p

    p = command("sample", "simulate one path and write its event log")
    _flag(p, "process", choices=["bps", "rhmc"])
    _flag(p, "d", type=int)
    _flag(p, "target", help="gaussian or power:<b>")
    _flag(p, "lambda-ref", dest="lambda_ref", type=float)
    _flag(p, "alpha", type=float)
    _flag(p, "horizon", type=float)
    _flag(p, "events", type=int)
    _flag(p, "step", type=float, help="leapfrog step for non-Gaussian RHMC")

    for name, help in (("tune", "closed-form rates and their certificate"),
                       ("certify", "rate certificate plus hypocoercive margins")):
        p = command(name, help)
        _flag(p, "m", type=float)
        _flag(p, "M", type=float)
        _flag(p, "alpha", type=float)
        _switch(p, "gaussian", "Gaussian-target rates")
        if name == "certify":
            _switch(p, "grid", "sweep m/M and alpha, report the minimum margin")
            _flag(p, "grid-ratios", dest="grid_ratios", type=int)
            _flag(p, "grid-alphas", dest="grid_alphas", type=int)

    p = command("couple", "synchronously coupled RHMC ensemble", ensemble=True)
    _flag(p, "target")
    _flag(p, "d", type=int)
    _flag(p, "alpha", type=float)
    _flag(p, "horizon", type=float)
    _flag(p, "grid-dt", dest="grid_dt", type=float)
    p.add_argument("--wasserstein", dest="gaussian", action="store_const", const=False, default=argparse.SUPPRESS,
                   help="use the Wasserstein rates and metric instead of the Gaussian ones")
    _switch(p, "identical", "start both chains from the same point")
    _flag(p, "step", type=float)

    p = command("scaling", "events per ESS against dimension", ensemble=True)
    _flag(p, "f")
    _flag(p, "dims", type=_dims)
    _flag(p, "policy", choices=["const1", "sqrtd"])
    _flag(p, "events", type=int)
    _flag(p, "dt", type=float)

    p = command("weaklimit", "energy distance between BPS first coordinate and 1-D RHMC", ensemble=True)
    _flag(p, "b", type=float)
    _flag(p, "dims", type=_dims)
    _flag(p, "T", type=float)
    _flag(p, "alpha", type=float)
    _flag(p, "lambda-ref", dest="lambda_ref", type=float)
    _flag(p, "step", type=float)
    _flag(p, "permutations", type=int)
    _flag(p, "lag", type=float, help="window of the first-coordinate flow residual")

    p = command("ess-bench", "events per ESS for every test function", ensemble=True)
    _flag(p, "d", type=int)
    _flag(p, "policy", choices=["const1", "sqrtd"])
    _flag(p, "events", type=int)
    _flag(p, "dt", type=float)
    return parser


def read_config_file(path: str, allowed: Sequence[str]) -> Dict[str, object]:
    """Parse key=value lines ('#' comments, blank lines ignored); unknown keys are usage errors."""
    values: Dict[str, object] = {}
    try:
        with open(path, "r", encoding="utf-8") as handle:
            lines = handle.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{number}: unknown key {key!r}")
        values[key] = _dims(value) if key == "dims" else value
    return values


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
        name = args.pop("command")
        model, run = COMMANDS[name]
        config_path = args.pop("config", None)
        log_level = args.pop("log_level", None)
        if log_level:
            set_level(log_level)
        values = read_config_file(config_path, list(model.model_fields)) if config_path else {}
        values.update(args)
        cfg = model(**values)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"invalid parameters for {name}:\n{exc}", file=sys.stderr)
        if any(error["type"] == "missing" for error in exc.errors()):
            parser.print_usage(sys.stderr)
            return UsageError.exit_code
        return EXIT_DOMAIN

    try:
        return run(cfg)
    except PdmpLabError as exc:
        logger.error(f"{name} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
