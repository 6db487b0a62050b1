"""Training, evaluation and command-line harness."""
