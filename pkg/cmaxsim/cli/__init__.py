from cmaxsim.cli.commands import COMMANDS, cmd_estimate, cmd_evaluate, cmd_simulate, cmd_synth

__all__ = ["COMMANDS", "cmd_estimate", "cmd_evaluate", "cmd_simulate", "cmd_synth"]
