"""Python access to the native pipeline core."""

import json

from ._ufa import (ConfigError, ContractError, Error, IoError, OrchestrationError, RegistryError, Tokenizer,
                   bleu2, build_prompt, cli, exact_match, metric_tokens, rouge, task_names, verify_fixtures)
from . import _ufa

__all__ = ["ConfigError", "ContractError", "Error", "IoError", "OrchestrationError", "RegistryError", "Tokenizer",
           "bleu2", "build_prompt", "cli", "exact_match", "generate_corpus", "metric_tokens", "render_report",
           "rouge", "run_experiment", "task_names", "verify_fixtures"]


def generate_corpus(n_dialogues, seed=0, label_noise=0.0, gold=False):
    """Synthetic dialogue records as dicts (the corpus JSONL schema)."""
    return [json.loads(line) for line in _ufa.generate_corpus_lines(n_dialogues, seed, label_noise, gold)]


def run_experiment(config_text):
    """Runs an experiment from key = value text; returns MetricReport dicts."""
    return [json.loads(line) for line in _ufa.run_experiment_lines(config_text)]


def render_report(reports):
    return _ufa.render_report_lines([json.dumps(r) for r in reports])
