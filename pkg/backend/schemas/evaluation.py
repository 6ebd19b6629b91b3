"""
Evaluation Pydantic schemas: report cells in the shape of the results table.
"""
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

Population = Literal["screening", "biopsied"]
Statistic = Literal["ensemble", "mean", "std"]
POPULATIONS: Tuple[str, ...] = ("screening", "biopsied")
LABELS: Tuple[str, ...] = ("benign", "malignant")
STATISTICS: Tuple[str, ...] = ("ensemble", "mean", "std")


class EvalCell(BaseModel):
    """One numeric cell; value None means AUC undefined for that slice."""
    model: str
    population: Population
    label: Literal["benign", "malignant"]
    statistic: Statistic
    value: Optional[float] = None

    @property
    def sort_key(self) -> Tuple[str, str, str, str]:
        return (self.model, self.population, self.label, self.statistic)


class EvalReport(BaseModel):
    """AUC cells per (model x population x label x statistic)."""
    cells: List[EvalCell] = Field(default_factory=list)
    member_aucs: Dict[str, List[Optional[float]]] = Field(default_factory=dict)

    @property
    def models(self) -> List[str]:
        return sorted({c.model for c in self.cells})

    def get(self, model: str, population: str, label: str, statistic: str) -> Optional[float]:
        for cell in self.cells:
            if cell.sort_key == (model, population, label, statistic):
                return cell.value
        raise KeyError((model, population, label, statistic))

    def sorted_cells(self) -> List[EvalCell]:
        return sorted(self.cells, key=lambda c: c.sort_key)

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(
            cells=self.cells + other.cells,
            member_aucs={**self.member_aucs, **other.member_aucs},
        )
