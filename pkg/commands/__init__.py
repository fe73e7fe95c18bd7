from .base import BaseCommand, CommandResult
from .compare import CompareCommand
from .cycle import CycleCommand
from .simulate import SimulateCommand
from .torus import TorusCommand

COMMANDS = {
    "cycle": CycleCommand,
    "torus": TorusCommand,
    "simulate": SimulateCommand,
    "compare": CompareCommand,
}

__all__ = [
    "BaseCommand",
    "CommandResult",
    "CycleCommand",
    "TorusCommand",
    "SimulateCommand",
    "CompareCommand",
    "COMMANDS",
]
