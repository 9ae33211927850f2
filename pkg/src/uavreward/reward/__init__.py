"""Reward functions: the manual baseline and LLM-designed programs compiled from a safe DSL."""

from .designer import (FACTOR_REGISTRY, GATES, PAPER_FIXTURE_EXPRESSION, PAPER_FIXTURE_RESPONSE,
                       PENALTY_FACTOR, DesignOutcome, PromptBundle, RewardProgram, RewardSpec, SpecError,
                       ValidationReport, build_prompt, compile_expression, compile_spec, design_reward,
                       evaluate, manual_reward, paper_fixture_program, parse_response, probe_battery,
                       validate, validate_response, world_descriptor)

__all__ = [
    "FACTOR_REGISTRY", "GATES", "PAPER_FIXTURE_EXPRESSION", "PAPER_FIXTURE_RESPONSE", "PENALTY_FACTOR",
    "DesignOutcome", "PromptBundle", "RewardProgram", "RewardSpec", "SpecError", "ValidationReport",
    "build_prompt", "compile_expression", "compile_spec", "design_reward", "evaluate", "manual_reward",
    "paper_fixture_program", "parse_response", "probe_battery", "validate", "validate_response",
    "world_descriptor",
]
