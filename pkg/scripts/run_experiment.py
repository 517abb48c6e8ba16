"""
Script: Run a SurvCaus Experiment Command

Usage:
    python scripts/run_experiment.py simulate --config configs/ls_default.cfg --out runs/ls
    python scripts/run_experiment.py train    --config configs/ls_default.cfg --out runs/ls
    python scripts/run_experiment.py evaluate --config configs/ls_default.cfg --out runs/ls
    python scripts/run_experiment.py sweep    --config configs/gamma_sweep_ls.cfg --seed 7
    python scripts/run_experiment.py theory   --config configs/theory.cfg
    python scripts/run_experiment.py search   --config configs/search_ls.cfg

Exit codes: 0 success, 1 validation error, 2 runtime divergence, 3 bound violation.
"""
import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli.commands import COMMANDS, apply_overrides, run_command
from src.utils.config import load_config
from src.utils.errors import exit_code_for


def main(argv=None):
    parser = argparse.ArgumentParser(description="SurvCaus experiment harness")
    parser.add_argument("command", choices=list(COMMANDS.keys()))
    parser.add_argument("--config", help="key = value experiment file (defaults when omitted)")
    parser.add_argument("--out", help="Output directory (overrides run.out_dir)")
    parser.add_argument("--seed", type=int, help="Master seed applied to every section")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except Exception as e:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s — %(message)s")
        logging.getLogger(__name__).error(str(e))
        sys.exit(exit_code_for(e))

    config = apply_overrides(config, out=args.out, seed=args.seed)
    level = (args.log_level or config.log_level).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s — %(message)s")

    sys.exit(run_command(args.command, config))


if __name__ == "__main__":
    main()
