"""Configuration, run orchestration and the command-line interface."""

from .config import PRESETS, RunConfig, preset_config
from .run import SWEEPS, cmd_bake, cmd_eval, cmd_render, cmd_report, cmd_train

__all__ = ["PRESETS", "RunConfig", "preset_config", "SWEEPS", "cmd_bake", "cmd_eval", "cmd_render",
           "cmd_report", "cmd_train"]
