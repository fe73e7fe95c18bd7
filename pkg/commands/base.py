import logging
from pathlib import Path
from typing import Any, Dict, List

from pydantic import BaseModel, ConfigDict, Field

from shared.config import RunConfig

logger = logging.getLogger(__name__)


class CommandResult(BaseModel):
    command: str
    output_dir: str
    files: List[str] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict)


class BaseCommand(BaseModel):
    """A command-line verb: validated inputs as fields, the work in run()."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    name: str = "command"
    config: RunConfig = Field(..., description="Resolved run configuration.")
    output_root: str = Field("./runs", description="Root directory used when output.directory is unset.")
    workers: int = Field(1, ge=1, description="Worker threads.")

    def output_dir(self) -> Path:
        out = self.config.output_dir(self.output_root)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def wants(self, fmt: str) -> bool:
        return fmt in self.config.output.formats

    def result(self, files: List[Path], summary: Dict[str, Any]) -> CommandResult:
        for f in files:
            logger.debug(f"{self.name}: wrote {f}")
        return CommandResult(command=self.name, output_dir=str(self.output_dir()), files=[str(f) for f in files], summary=summary)

    def run(self) -> CommandResult:
        raise NotImplementedError
