"""Run configuration parsing from flat sectioned key-value files.

Sections: [data] for the synthetic shift generator, [loss] for objective
weights, [train] for optimization.  Missing required keys raise a
ConfigError naming the key.
"""

import configparser

from .backbone import EncoderConfig
from .data import ConfigError, ShiftConfig
from .engine import RunConfig
from .losses import LossWeights

_REQUIRED = {
    "data": ["num_classes", "image_size", "patch_size", "shots", "n_unlabeled", "shift_kind", "seed"],
    "loss": ["tau", "lambda_pwc", "lambda_rmc", "lambda_pr", "alpha"],
    "train": ["lr_encoder", "lr_classifier", "epochs_pretrain", "epochs_adapt", "batch_size"],
}


def _section(parser, name):
    if not parser.has_section(name):
        raise ConfigError(f"missing config section [{name}]")
    sec = parser[name]
    for key in _REQUIRED[name]:
        if key not in sec:
            raise ConfigError(f"missing config key [{name}].{key}")
    return sec


def load_run_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    data = _section(parser, "data")
    loss = _section(parser, "loss")
    train = _section(parser, "train")

    shift = ShiftConfig(
        num_classes=data.getint("num_classes"),
        image_size=data.getint("image_size"),
        patch_size=data.getint("patch_size"),
        shots=data.getint("shots"),
        n_source=data.getint("n_source", fallback=400),
        n_unlabeled=data.getint("n_unlabeled"),
        shift_kind=data.get("shift_kind"),
        seed=data.getint("seed"),
        noise_level=data.getfloat("noise_level", fallback=0.08),
    )
    encoder = EncoderConfig(
        image_size=shift.image_size,
        patch_size=shift.patch_size,
        channels=shift.channels,
        embed_dim=train.getint("embed_dim", fallback=128),
        depth=train.getint("depth", fallback=4),
        heads=train.getint("heads", fallback=4),
        num_classes=shift.num_classes,
    )
    weights = LossWeights(
        lambda_pwc=loss.getfloat("lambda_pwc"),
        lambda_rmc=loss.getfloat("lambda_rmc"),
        lambda_pr=loss.getfloat("lambda_pr"),
        tau=loss.getfloat("tau"),
        alpha=loss.getfloat("alpha"),
    )
    cfg = RunConfig(
        shift=shift,
        encoder=encoder,
        weights=weights,
        lr_encoder=train.getfloat("lr_encoder"),
        lr_classifier=train.getfloat("lr_classifier"),
        momentum=train.getfloat("momentum", fallback=0.9),
        epochs_pretrain=train.getint("epochs_pretrain"),
        epochs_adapt=train.getint("epochs_adapt"),
        batch_size=train.getint("batch_size"),
        mix_batch_size=train.getint("mix_batch_size", fallback=16),
        top_k=loss.getint("top_k", fallback=2),
        beta_params=(
            loss.getfloat("beta", fallback=1.0),
            loss.getfloat("gamma", fallback=1.0),
        ),
        augment_ops=data.getint("augment_ops", fallback=2),
        augment_magnitude=data.getfloat("augment_magnitude", fallback=9.0),
        seed=data.getint("seed"),
    )
    cfg.validate()
    return cfg


def write_default_config(path):
    """Emit a config file populated with the library defaults."""
    cfg = RunConfig()
    parser = configparser.ConfigParser()
    parser["data"] = {
        "num_classes": cfg.shift.num_classes,
        "image_size": cfg.shift.image_size,
        "patch_size": cfg.shift.patch_size,
        "shots": cfg.shift.shots,
        "n_source": cfg.shift.n_source,
        "n_unlabeled": cfg.shift.n_unlabeled,
        "shift_kind": cfg.shift.shift_kind,
        "seed": cfg.shift.seed,
    }
    parser["loss"] = {
        "tau": cfg.weights.tau,
        "lambda_pwc": cfg.weights.lambda_pwc,
        "lambda_rmc": cfg.weights.lambda_rmc,
        "lambda_pr": cfg.weights.lambda_pr,
        "alpha": cfg.weights.alpha,
        "top_k": cfg.top_k,
    }
    parser["train"] = {
        "lr_encoder": cfg.lr_encoder,
        "lr_classifier": cfg.lr_classifier,
        "epochs_pretrain": cfg.epochs_pretrain,
        "epochs_adapt": cfg.epochs_adapt,
        "batch_size": cfg.batch_size,
    }
    with open(path, "w") as f:
        parser.write(f)
    return path
