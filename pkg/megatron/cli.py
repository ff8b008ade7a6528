"""Command line interface for the attack pipeline."""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, load_experiment_config
from .datasets import DEFAULT_DATA_DIR, fetch_cifar10
from .errors import MegatronError, UnsafeOverwriteError
from .harness import (
    ARTIFACT_PATHS,
    REPORT_FILE,
    ArtifactIndex,
    poison_rate_sweep,
    prepare_run_dir,
    run_experiment,
    run_stage,
)
from .metrics import AttackReport
from .utils import data_root, setup_logging

LOGGER = logging.getLogger("megatron.cli")

# Stage -> artifact it produces
STAGE_OUTPUTS = {
    "train-surrogate": "surrogate",
    "gen-trigger": "trigger",
    "poison": "poisoned",
    "train-victim": "victim",
    "evaluate": "report",
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)

    if args.command is None:
        parser.print_help()
        return 0
    try:
        if args.command == "fetch-data":
            return _command_fetch_data(args)
        config = load_experiment_config(args.config, seed=args.seed)
        if args.dry_run:
            print(json.dumps(config.to_dict(), ensure_ascii=False, indent=2, sort_keys=True))
            return 0
        if args.command == "run":
            return _command_run(args, config)
        if args.command == "sweep":
            return _command_sweep(args, config)
        return _command_stage(args, config)
    except MegatronError as exc:
        LOGGER.error("%s", exc)
        return exc.exit_code
    except KeyboardInterrupt:  # pragma: no cover
        LOGGER.error("Interrompido pelo usuário")
        return 1
    except Exception as exc:  # pragma: no cover - erro inesperado
        LOGGER.exception("Erro interno: %s", exc)
        return 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, required=True, help="Arquivo de configuração JSON")
    parser.add_argument("--out", type=Path, required=True, help="Diretório da execução")
    parser.add_argument("--seed", type=int, default=None, help="Sobrescreve todas as sementes da configuração")
    parser.add_argument("--jobs", type=int, default=1, help="Workers paralelos no envenenamento")
    parser.add_argument("--force", action="store_true", help="Permite sobrescrever artefatos existentes")
    parser.add_argument("--dry-run", action="store_true", help="Mostra a configuração resolvida e sai sem gravar nada")
    parser.add_argument("--progress", action="store_true", help="Mostra barras de progresso")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="megatron", description="Ataque backdoor clean-label em vision transformers")
    parser.add_argument("--log-level", default="INFO", help="Nível de log (DEBUG, INFO, WARNING, ERROR)")
    subparsers = parser.add_subparsers(dest="command")

    helps = {
        "train-surrogate": "Treina o modelo substituto do atacante",
        "gen-trigger": "Gera o trigger a partir do substituto",
        "poison": "Constrói o dataset envenenado",
        "train-victim": "Treina a vítima (e o baseline limpo) no dataset envenenado",
        "evaluate": "Calcula métricas e grava o relatório",
        "run": "Executa todas as etapas em sequência",
    }
    for name, text in helps.items():
        _add_common(subparsers.add_parser(name, help=text))

    sweep_parser = subparsers.add_parser("sweep", help="Repete o experimento para várias taxas de envenenamento")
    _add_common(sweep_parser)
    sweep_parser.add_argument(
        "--rates", type=float, nargs="+", default=[0.02, 0.04, 0.06, 0.08, 0.10], help="Taxas de envenenamento"
    )

    fetch_parser = subparsers.add_parser("fetch-data", help="Baixa o CIFAR-10 (formato binário)")
    fetch_parser.add_argument("--out", type=Path, default=None, help="Destino (padrão: MEGATRON_DATA_DIR ou ./data)")
    return parser


def _command_stage(args: argparse.Namespace, config: ExperimentConfig) -> int:
    name = args.command
    if name == "train-surrogate":
        prepare_run_dir(args.out, force=args.force)
    elif ArtifactIndex(args.out).has(STAGE_OUTPUTS[name]) and not args.force:
        raise UnsafeOverwriteError(
            f"{args.out / ARTIFACT_PATHS[STAGE_OUTPUTS[name]]} já existe. Use --force para sobrescrever."
        )
    target = run_stage(name, config, args.out, jobs=args.jobs, force=args.force, progress=args.progress)
    LOGGER.info("Etapa %s concluída: %s", name, target)
    return 0


def _command_run(args: argparse.Namespace, config: ExperimentConfig) -> int:
    report = run_experiment(config, args.out, jobs=args.jobs, force=args.force, progress=args.progress)
    _print_summary(report)
    LOGGER.info("Relatório disponível em %s", args.out / REPORT_FILE)
    return 0


def _command_sweep(args: argparse.Namespace, config: ExperimentConfig) -> int:
    frame = poison_rate_sweep(config, args.rates, args.out, jobs=args.jobs, force=args.force)
    print(frame.to_string(index=False))
    return 0


def _command_fetch_data(args: argparse.Namespace) -> int:
    target = args.out or data_root() or DEFAULT_DATA_DIR
    extracted = fetch_cifar10(target)
    LOGGER.info("CIFAR-10 disponível em %s", extracted)
    return 0


def _print_summary(report: AttackReport) -> None:
    table = report.summary_table()
    print(table.to_string(index=False, float_format=lambda value: f"{value:.6g}"))


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
