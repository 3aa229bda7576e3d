class RtdforgeError(Exception):
    """Base class for all errors raised by rtdforge services."""
    exit_code = 1


class ConfigError(RtdforgeError):
    """Invalid or unparseable experiment configuration."""
    exit_code = 2


class DataError(RtdforgeError):
    """Input data (corpus, vocab, task files, checkpoints) is unusable."""
    exit_code = 3


class VocabError(DataError):
    pass


class CheckpointError(DataError):
    pass


class TaskDataError(DataError):
    pass


class DegenerateMetricError(DataError):
    pass


class AggregationError(DataError):
    pass


class TrainingError(RtdforgeError):
    exit_code = 1


class NonFiniteLossError(TrainingError):
    """Raised before the optimizer step when a forward value is NaN/Inf."""

    def __init__(self, tensor_name: str, step: int | None = None):
        self.tensor_name = tensor_name
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite values in '{tensor_name}'{where}")


class MultiSeedError(TrainingError):

    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        listed = ', '.join(f"{seed} ({reason})" for seed, reason in sorted(failures.items()))
        super().__init__(f"Fine-tuning failed for seeds: {listed}")


COLLAPSE_EXIT_CODE = 4
