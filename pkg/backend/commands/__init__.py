"""Commands package for longview."""
from commands.align import register as register_align
from commands.evaluate import register as register_evaluate
from commands.experiment import register as register_experiment
from commands.synth import register as register_synth
from commands.train import register as register_train

__all__ = [
    "register_align",
    "register_evaluate",
    "register_experiment",
    "register_synth",
    "register_train",
]
