"""Command line entry point for the BV wave-control solver."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from bvwave.config import DEFAULT_CONFIG_PATH, RunConfig, load_config
from bvwave.errors import BvWaveError, ConfigurationError
from bvwave.pipeline import run_convergence, run_pdap, run_solve

LOGGER_FORMAT = "%(levelname)s: %(message)s"
logger = logging.getLogger("bvwave")


def parse_levels(text: str) -> tuple[int, ...]:
    """'3..6' -> (3, 4, 5, 6); '4' -> (4,)."""
    try:
        if ".." in text:
            first, last = (int(part) for part in text.split("..", 1))
            if last < first:
                raise ValueError
            return tuple(range(first, last + 1))
        return (int(text),)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"Intervalo de níveis inválido: {text!r} (use a..b)") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Controle ótimo BV da equação da onda: solver, PDAP e estudos de convergência.")
    parser.add_argument(
        "command",
        choices=["solve", "pdap", "convergence"],
        help="Tarefa a ser executada.",
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help=f"Ficheiro YAML de configuração (padrão: {DEFAULT_CONFIG_PATH.name} se existir).",
    )
    parser.add_argument("--out", default=None, help="Diretório de saída.")
    parser.add_argument("--levels", type=parse_levels, default=None, help="Níveis do estudo, no formato a..b.")
    parser.add_argument("--level", type=int, default=None, help="Nível k para solve e pdap.")
    parser.add_argument("--sigma", type=float, default=None, help="Parâmetro de estabilização sigma.")
    parser.add_argument("--phi", choices=["corrected", "printed"], default=None, help="Variante de phi do cenário.")
    parser.add_argument("--scenario", default=None, help="Cenário (zero, standing_wave, reference, random).")
    parser.add_argument("--seed", type=int, default=None, help="Semente para dados aleatórios.")
    parser.add_argument(
        "--log-level",
        default="INFO",
        help="Nível de logging (DEBUG, INFO, WARNING, ERROR).",
    )
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
    elif DEFAULT_CONFIG_PATH.exists():
        config = load_config(DEFAULT_CONFIG_PATH)
    else:
        config = RunConfig()
    return config.with_overrides(
        command=args.command,
        directory=args.out,
        levels=args.levels,
        level=args.level,
        sigma=args.sigma,
        phi=args.phi,
        name=args.scenario,
        seed=args.seed,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format=LOGGER_FORMAT)

    try:
        config = resolve_config(args)
        if config.command == "solve":
            run_solve(config)
        elif config.command == "pdap":
            run_pdap(config)
        elif config.command == "convergence":
            run_convergence(config)
        else:  # pragma: no cover - argparse already restricts choices
            raise ConfigurationError(f"Comando desconhecido: {config.command}")
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return ConfigurationError.exit_code
    except BvWaveError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
