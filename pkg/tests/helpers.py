"""Small, fast run configurations shared by the training and CLI tests."""

from posr.config import RunConfig

TINY = {
    "synth.n_subjects": 3,
    "synth.trials_per_subject_per_session": 8,
    "synth.n_samples": 64,
    "arch.temporal_kernel": 5,
    "arch.n_temporal_filters": 4,
    "arch.n_spatial_filters": 4,
    "train.epochs": 2,
    "train.batch_size": 16,
}


def tiny_config(**overrides) -> RunConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return RunConfig().replace(**values)


def tiny_lines(**overrides) -> str:
    cfg = dict(TINY)
    cfg.update({k.replace("__", "."): v for k, v in overrides.items()})
    return "\n".join(f"{k} = {v}" for k, v in cfg.items()) + "\n"
