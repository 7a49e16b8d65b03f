""" Command dispatch for run_adaea.py.

Every command is a thin wrapper around library calls in utilities/. Failures are reported as one
'error: ...' line on stderr and mapped to an exit status:

    0 success, 1 usage, 2 data/format, 3 configuration, 4 numeric/runtime

"""
import os
import sys

import numpy as np

from utilities.config_utilities import ConfigurationError, UsageError, parse_config
from utilities.ensemble_attacks import compute_gradient_stack, ensemble_gradient
from utilities.evaluation import (
    CampaignSpec, emit_disparity_artifacts, emit_report, generate_adversarial, load_dataset, run_campaign,
    select_sample, split_dataset, weight_sweep_experiment,
)
from utilities.file_utilities import DataError, DataFormatError, checkpoint_path, load_zoo, save_zoo, write_flat_binary
from utilities.models import DEFAULT_INPUT_SHAPE, LabeledDataset, accuracy, build_zoo, train_zoo
from utilities.numerics import NumericalError
from utilities.selftest import run_selftest

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CONFIGURATION = 3
EXIT_NUMERIC = 4

# Most specific first
EXIT_CODES = (
    (UsageError, EXIT_USAGE),
    (DataFormatError, EXIT_DATA),
    (DataError, EXIT_DATA),
    (OSError, EXIT_DATA),
    (ConfigurationError, EXIT_CONFIGURATION),
    (NumericalError, EXIT_NUMERIC),
    (ValueError, EXIT_NUMERIC),
)


def exit_code_for(error):
    for error_type, code in EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_NUMERIC


def load_run_dataset(cfg):
    """Loads the configured dataset and returns its (train, evaluation) split."""
    if cfg.dataset_format == 'synthetic':
        spec = {'num_images': cfg.num_images, 'num_classes': cfg.num_classes, 'image_shape': DEFAULT_INPUT_SHAPE,
                'signal': cfg.signal, 'noise': cfg.noise, 'seed': cfg.seed}
        data = load_dataset(None, 'synthetic', spec)
    elif cfg.dataset_format == 'flat':
        data = load_dataset(cfg.dataset, 'flat', verbose=cfg.verbose)
    else:
        data = load_dataset(cfg.dataset, 'idx', {'labels': cfg.labels}, verbose=cfg.verbose)
    return split_dataset(data, test_fraction=0.2, seed=cfg.seed)


def load_run_zoo(cfg):
    """Loads the surrogate and target checkpoints (every checkpoint when no targets are configured)."""
    if not os.path.isdir(cfg.model_dir):
        raise ConfigurationError(f"Zoo directory '{cfg.model_dir}' not found; run the train command first")
    if cfg.targets:
        names = list(dict.fromkeys(list(cfg.surrogates) + list(cfg.targets)))
        zoo = load_zoo(cfg.model_dir, names, cfg.verbose)
        return zoo, list(cfg.targets)
    zoo = load_zoo(cfg.model_dir, verbose=cfg.verbose)
    for name in cfg.surrogates:
        if name not in zoo:
            raise ConfigurationError(f"Model checkpoint not found: {checkpoint_path(cfg.model_dir, name)}")
    return zoo, list(zoo)


def command_train(cfg):
    train, evaluation = load_run_dataset(cfg)
    print(f"Training {len(cfg.zoo)} models on {len(train)} images ({evaluation.name}, {len(evaluation)} held out)")
    models = build_zoo(cfg.zoo, cfg.seed, train.image_shape, train.num_classes)
    trained = train_zoo(models, train, cfg.epochs, seed=cfg.seed, verbose=cfg.verbose)
    for model in trained:
        print(f"| {model.model_name}: train {model.train_accuracy * 100:.2f}%, "
              f"held-out {accuracy(model, evaluation) * 100:.2f}%")
    save_zoo(trained, cfg.model_dir, cfg.verbose)
    print(f"Checkpoints written to {cfg.model_dir}")


def command_attack(cfg):
    _, evaluation = load_run_dataset(cfg)
    zoo, _ = load_run_zoo(cfg)
    surrogates = [zoo[name] for name in cfg.surrogates]
    variant = 'AdaEA' if 'AdaEA' in cfg.attacks else cfg.attacks[0]
    indices = select_sample(evaluation, cfg.samples, cfg.seed)
    adversarial = generate_adversarial(surrogates, evaluation, indices, cfg.attack, variant, cfg.bases[0],
                                       cfg.verbose)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, 'adversarial.adds')
    write_flat_binary(LabeledDataset(adversarial, evaluation.labels[indices], evaluation.num_classes, 'adversarial'),
                      path)
    print(f"{variant}/{cfg.bases[0]}: {len(indices)} adversarial examples written to {path}")


def command_campaign(cfg):
    _, evaluation = load_run_dataset(cfg)
    zoo, targets = load_run_zoo(cfg)
    spec = CampaignSpec(list(cfg.surrogates), targets, list(cfg.attacks), list(cfg.bases), cfg.attack, cfg.samples,
                        cfg.seed)
    report = run_campaign(spec, zoo, evaluation, cfg.verbose)
    os.makedirs(cfg.out, exist_ok=True)
    emit_report(report, os.path.join(cfg.out, 'report.csv'), 'csv')
    emit_report(report, os.path.join(cfg.out, 'report.json'), 'json')
    print(report.summary().to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"Report written to {os.path.join(cfg.out, 'report.csv')}")


def command_sweep(cfg):
    _, evaluation = load_run_dataset(cfg)
    zoo, targets = load_run_zoo(cfg)
    surrogates = [zoo[name] for name in cfg.surrogates]
    table, _ = weight_sweep_experiment(surrogates, [zoo[name] for name in targets], evaluation, cfg.attack,
                                       cfg.grid_size, cfg.bases[0], cfg.samples, cfg.seed, cfg.verbose)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, 'weight_sweep.csv')
    table.to_csv(path, index=False, float_format='%.6f', na_rep='')
    print(table.to_string(index=False))
    print(f"Sweep written to {path}")


def command_disparity(cfg):
    _, evaluation = load_run_dataset(cfg)
    zoo, _ = load_run_zoo(cfg)
    surrogates = [zoo[name] for name in cfg.surrogates]
    index = select_sample(evaluation, cfg.samples, cfg.seed)[0]
    x, y = evaluation.images[index], evaluation.labels[index]
    stack = compute_gradient_stack(surrogates, x, y)
    uniform = np.full(len(surrogates), 1.0 / len(surrogates))
    ens_grad = ensemble_gradient(surrogates, x, y, uniform, np.ones(x.shape[1:]))
    out_dir = os.path.join(cfg.out, 'disparity')
    paths = emit_disparity_artifacts(stack, cfg.attack.eta, out_dir, ens_grad)
    print(f"{len(paths)} disparity artifacts for image {index} written to {out_dir}")


def command_selftest(cfg):
    _, failed, failures = run_selftest(cfg.seed, cfg.verbose)
    if failed:
        raise NumericalError(f"{failed} self-test check(s) failed: {', '.join(failures)}")


COMMANDS = {
    'train': command_train,
    'attack': command_attack,
    'campaign': command_campaign,
    'sweep': command_sweep,
    'disparity': command_disparity,
    'selftest': command_selftest,
}


def run_cli(cfg):
    """Dispatches a parsed RunConfig to its command and returns the exit status."""
    try:
        COMMANDS[cfg.command](cfg)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)
    return EXIT_OK


def main(argv=None, environ=None):
    try:
        cfg = parse_config(argv, environ)
    except UsageError as e:
        print(f"error: {e} (field: {e.field})", file=sys.stderr)
        return EXIT_USAGE
    return run_cli(cfg)
