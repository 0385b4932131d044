"""Configuration, training orchestration, sweeps, reports and the CLI."""
