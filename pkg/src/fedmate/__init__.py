"""Desk-scale federated learning simulator with prototype re-calibration,
class-wise classifier fusion, adversarial classifier alignment and
cost-aware extractor transmission."""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config  # noqa: E402
from .simulation import (  # noqa: E402
    RunResult,
    comm_ledger_totals,
    evaluate,
    run_baseline_fedavg_ft,
    run_baseline_local,
    run_fedmate,
    run_simulation,
    select_clients,
)

__all__ = [
    "RunConfig",
    "RunResult",
    "comm_ledger_totals",
    "evaluate",
    "load_config",
    "parse_config",
    "run_baseline_fedavg_ft",
    "run_baseline_local",
    "run_fedmate",
    "run_simulation",
    "select_clients",
]
