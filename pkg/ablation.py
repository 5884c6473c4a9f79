"""
Ablation sweeps over the extreme ratio, the cluster count or the strategy.

Every grid cell trains and evaluates once with its own derived seed. A
failing cell is recorded in its row and the sweep moves on.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, model_validator

from errors import ConfigError, DGMILError
from mil_dataset import Dataset
from run_config import RefinementConfig, derive_seed
from strategies import STRATEGIES, get_strategy, run_strategy

logger = logging.getLogger(__name__)

# derive_seed purpose for grid cells
_CELL_STREAM = 20

DEFAULT_VALUES: Dict[str, Tuple] = {
    "ratio": (0.01, 0.05, 0.10, 0.20, 0.30),
    "clusters": (1, 2, 5, 10, 20, 50),
    "strategy": ("baseline1", "baseline2", "one-shot", "dgmil"),
}

SWEEP_COLUMNS = ["axis", "value", "seed", "status", "instance_auc", "bag_auc", "bag_accuracy",
                 "froc_score", "max_pool_bag_auc", "error"]


class AblationGrid(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    axis: Literal["ratio", "clusters", "strategy"]
    values: Tuple[Union[int, float, str], ...]

    @model_validator(mode="after")
    def _check_values(self) -> "AblationGrid":
        if not self.values:
            raise ValueError("grid values must not be empty")
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"grid values must be distinct, got {list(self.values)}")
        for value in self.values:
            if self.axis == "ratio" and not (isinstance(value, (int, float)) and 0 < value <= 0.5):
                raise ValueError(f"ratio values must lie in (0, 0.5], got {value!r}")
            if self.axis == "clusters" and not (isinstance(value, int) and value >= 1):
                raise ValueError(f"cluster counts must be integers >= 1, got {value!r}")
            if self.axis == "strategy" and value not in {s.name for s in STRATEGIES}:
                raise ValueError(f"unknown strategy {value!r}")
        return self

    @classmethod
    def parse(cls, axis: str, text: Optional[str]) -> "AblationGrid":
        """Grid from a comma-separated value list; None selects the axis' standard grid."""
        try:
            if text is None:
                return cls(axis=axis, values=DEFAULT_VALUES.get(axis, ()))
            items = [item.strip() for item in text.split(",") if item.strip()]
            if axis == "ratio":
                values = tuple(float(item) for item in items)
            elif axis == "clusters":
                values = tuple(int(item) for item in items)
            else:
                values = tuple(items)
            return cls(axis=axis, values=values)
        except ValueError as exc:
            # pydantic.ValidationError is a ValueError too
            raise ConfigError(f"invalid --values for axis {axis!r}: {exc}") from exc


def _cell(grid: AblationGrid, index: int, value: Any, train: Dataset, test: Dataset,
          config: RefinementConfig, strategy_name: str) -> Dict[str, Any]:
    seed = derive_seed(config.seed, index, _CELL_STREAM)
    row: Dict[str, Any] = {column: None for column in SWEEP_COLUMNS}
    row.update(axis=grid.axis, value=value, seed=seed)
    try:
        if grid.axis == "strategy":
            strategy = get_strategy(value)
            cell_config = config.model_copy(update={"seed": seed})
        else:
            strategy = get_strategy(strategy_name)
            cell_config = config.model_copy(update={grid.axis: value, "seed": seed})
        report = run_strategy(strategy, train, test, cell_config)
    except DGMILError as exc:
        logger.warning("grid cell %s=%s failed: %s", grid.axis, value, exc)
        row.update(status="failed", error=str(exc))
        return row

    row.update(
        status="ok",
        instance_auc=report.instance_auc,
        bag_auc=report.bag_auc,
        bag_accuracy=report.bag_accuracy,
        froc_score=report.froc_score,
        max_pool_bag_auc=report.max_pool_bag_auc,
    )
    return row


def run_ablate(grid: AblationGrid, train: Dataset, test: Dataset, config: RefinementConfig,
               strategy: str = "dgmil", jobs: int = 1,
               on_cell: Optional[Callable[[Dict[str, Any]], None]] = None) -> List[Dict[str, Any]]:
    """One row per grid value, in grid order."""
    def work(item):
        index, value = item
        row = _cell(grid, index, value, train, test, config, strategy)
        if on_cell:
            on_cell(row)
        return row

    cells = list(enumerate(grid.values))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(work, cells))
    return [work(cell) for cell in cells]
