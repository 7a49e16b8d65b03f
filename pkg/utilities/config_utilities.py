""" Run configuration: config file reader, command-line flags, and their merge into a RunConfig.

Config files are flat key=value lines with '#' comments and optional [section] headers. Sections only
group keys; every key is unique across the file. Flags mirror keys one-to-one, with '-' in place of
'_' (--di-prob <-> di_prob).

Precedence: flag > config file > environment (ADAEA_OUT_DIR, output directory only) > default.

"""
import argparse
import os
from dataclasses import dataclass, field
from fractions import Fraction

from utilities.attack_utilities import BASE_ATTACKS, AttackConfig

COMMANDS = ('train', 'attack', 'campaign', 'sweep', 'disparity', 'selftest')
ABLATION_NAMES = ('Ens', '+AGM', '+DRF', 'AdaEA')
OUT_DIR_ENV = 'ADAEA_OUT_DIR'

FLOAT_KEYS = ('epsilon', 'alpha', 'beta', 'eta', 'mu', 'di_prob', 'di_max_enlarge', 'gamma', 'signal', 'noise')
INT_KEYS = ('iters', 'samples', 'seed', 'epochs', 'grid_size', 'num_images', 'num_classes')
LIST_KEYS = ('zoo', 'surrogates', 'targets', 'attacks', 'bases')
STR_KEYS = ('command', 'dataset', 'labels', 'out', 'zoo_dir')
BOOL_KEYS = ('verbose',)
ALL_KEYS = STR_KEYS + FLOAT_KEYS + INT_KEYS + LIST_KEYS + BOOL_KEYS

# Config keys that map onto AttackConfig fields under another name
ATTACK_KEYS = {
    'epsilon': 'epsilon', 'alpha': 'alpha', 'iters': 'iterations', 'beta': 'beta', 'eta': 'eta', 'mu': 'mu',
    'di_prob': 'di_probability', 'di_max_enlarge': 'di_max_enlarge', 'gamma': 'gamma', 'seed': 'seed',
}

DEFAULT_ZOO = ('SmallConv', 'TinyAttention', 'Mlp', 'Linear')
DEFAULT_SURROGATES = ('smallconv', 'tinyattention')


@dataclass(frozen=True)
class RunConfig:
    """Everything one invocation of run_adaea.py needs."""
    command: str
    attack: AttackConfig = field(default_factory=AttackConfig)
    dataset: str = 'synthetic'
    labels: str = None
    num_images: int = 512
    num_classes: int = 4
    signal: float = 0.02
    noise: float = 0.1
    zoo: tuple = DEFAULT_ZOO
    zoo_dir: str = None
    surrogates: tuple = DEFAULT_SURROGATES
    targets: tuple = ()
    attacks: tuple = ABLATION_NAMES
    bases: tuple = ('ifgsm',)
    samples: int = 256
    epochs: int = 30
    grid_size: int = 11
    seed: int = 0
    out: str = 'results'
    verbose: bool = False

    @property
    def model_dir(self):
        return self.zoo_dir if self.zoo_dir else os.path.join(self.out, 'zoo')

    @property
    def dataset_format(self):
        """'synthetic', 'flat' (an ADDS container) or 'idx'."""
        if self.dataset.lower() == 'synthetic':
            return 'synthetic'
        if self.dataset.endswith('.adds'):
            return 'flat'
        return 'idx'

    def to_dict(self):
        """Flat key -> value echo of the configuration, in config-file key names."""
        echo = {'command': self.command, 'dataset': self.dataset, 'zoo': ','.join(self.zoo),
                'surrogates': ','.join(self.surrogates), 'targets': ','.join(self.targets),
                'attacks': ','.join(self.attacks), 'bases': ','.join(self.bases), 'samples': self.samples,
                'epochs': self.epochs, 'seed': self.seed}
        for key, attr in ATTACK_KEYS.items():
            echo[key] = getattr(self.attack, attr)
        return echo


def read_config_file(config_file):
    """Reads key=value pairs from a config file.

    Args:
        config_file (str): Path to the file.

    Returns:
        config_data (dict): Raw string values keyed by the stripped key.
    """
    config_data = {}
    with open(config_file, 'r') as file:
        for line_number, line in enumerate(file, start=1):
            # Strip whitespace and ignore empty lines, comments and section headers
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if line.startswith('[') and line.endswith(']'):
                continue
            if '=' not in line:
                raise UsageError(f"line {line_number}", f"{config_file}:{line_number}: expected key=value, got '{line}'")

            key, value = line.split('=', 1)
            key = key.strip().replace('-', '_')
            if key in config_data:
                raise UsageError(key, f"{config_file}:{line_number}: duplicate key '{key}'")
            config_data[key] = value.split(' #', 1)[0].strip()

    return config_data


class _UsageErrorParser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError('arguments', message)


def build_arg_parser():
    parser = _UsageErrorParser(prog='run_adaea.py', description='Adaptive model-ensemble adversarial attacks on a '
                                                                 'toy model zoo.', argument_default=argparse.SUPPRESS)
    parser.add_argument('--config', type=str, help='Path to a key=value config file.')
    for key in ALL_KEYS:
        flag = '--' + key.replace('_', '-')
        if key in BOOL_KEYS:
            parser.add_argument(flag, dest=key, action='store_const', const='true')
        else:
            parser.add_argument(flag, dest=key, type=str)
    return parser


def _convert(key, raw):
    raw = str(raw).strip()
    try:
        if key in FLOAT_KEYS:
            return float(Fraction(raw))
        if key in INT_KEYS:
            return int(raw)
    except (ValueError, ZeroDivisionError):
        raise UsageError(key, f"invalid value for {key}: '{raw}'")
    if key in LIST_KEYS:
        return tuple(item.strip() for item in raw.split(',') if item.strip())
    if key in BOOL_KEYS:
        if raw.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
            raise UsageError(key, f"invalid value for {key}: '{raw}'")
        return raw.lower() in ('true', '1', 'yes')
    return raw


def parse_config(argv=None, environ=None):
    """Builds a validated RunConfig from command-line arguments and an optional config file.

    Args:
        argv (list): Arguments without the program name (sys.argv[1:] when None).
        environ (dict): Environment used for the ADAEA_OUT_DIR fallback (os.environ when None).

    Returns:
        RunConfig
    """
    environ = os.environ if environ is None else environ
    parser = build_arg_parser()
    flags, extras = parser.parse_known_args(argv)
    if extras:
        raise UsageError(extras[0], f"unknown argument '{extras[0]}'")
    flags = vars(flags)

    raw = {}
    if environ.get(OUT_DIR_ENV):
        raw['out'] = environ[OUT_DIR_ENV]
    config_path = flags.pop('config', None)
    if config_path is not None:
        if not os.path.isfile(config_path):
            raise UsageError('config', f"config file not found: {config_path}")
        file_values = read_config_file(config_path)
        for key in file_values:
            if key not in ALL_KEYS:
                raise UsageError(key, f"unknown key '{key}' in {config_path}")
        raw.update(file_values)
    raw.update(flags)

    values = {key: _convert(key, value) for key, value in raw.items()}
    if 'command' not in values:
        raise UsageError('command', "missing required field 'command'")

    attack_changes = {ATTACK_KEYS[key]: values.pop(key) for key in list(values) if key in ATTACK_KEYS and key != 'seed'}
    if 'seed' in values:
        attack_changes['seed'] = values['seed']
    attack = AttackConfig(**attack_changes)
    run_config = RunConfig(attack=attack, **values)
    validate_run_config(run_config)
    return run_config


def validate_run_config(cfg):
    """Raises UsageError naming the first offending field."""
    if cfg.command not in COMMANDS:
        raise UsageError('command', f"unknown command '{cfg.command}'. Expected one of {COMMANDS}")
    reverse = {attr: key for key, attr in ATTACK_KEYS.items()}
    for attr, message in cfg.attack.problems():
        raise UsageError(reverse.get(attr, attr), message)
    for key in ('samples', 'epochs', 'num_images'):
        if getattr(cfg, key) < 1:
            raise UsageError(key, f"{key} must be at least 1, got {getattr(cfg, key)}")
    if cfg.num_classes < 2:
        raise UsageError('num_classes', f"num_classes must be at least 2, got {cfg.num_classes}")
    if cfg.grid_size < 3:
        raise UsageError('grid_size', f"grid_size must be at least 3, got {cfg.grid_size}")
    if cfg.signal < 0 or cfg.noise < 0:
        raise UsageError('signal' if cfg.signal < 0 else 'noise', "signal and noise must be non-negative")
    for name in cfg.attacks:
        if name not in ABLATION_NAMES:
            raise UsageError('attacks', f"unknown attack variant '{name}'. Expected some of {ABLATION_NAMES}")
    for name in cfg.bases:
        if name not in BASE_ATTACKS:
            raise UsageError('bases', f"unknown base attack '{name}'. Expected some of {BASE_ATTACKS}")
    if not cfg.zoo:
        raise UsageError('zoo', "zoo must name at least one architecture")
    if not cfg.surrogates:
        raise UsageError('surrogates', "at least one surrogate model is required")
    if cfg.command == 'sweep' and len(cfg.surrogates) != 2:
        raise UsageError('surrogates', f"sweep needs exactly 2 surrogate models, got {len(cfg.surrogates)}")
    if cfg.command == 'disparity' and len(cfg.surrogates) < 2:
        raise UsageError('surrogates', "disparity maps need at least 2 surrogate models")
    if cfg.dataset_format == 'idx' and not cfg.labels:
        raise UsageError('labels', "IDX datasets need a label file (labels=...)")
    return cfg


class UsageError(Exception):
    """Exception returned when the command line or config file names an unknown flag or key, holds a
    value outside its valid range, or omits a required field. `field` names the offending key.
    """

    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


class ConfigurationError(Exception):
    """Exception returned when a valid configuration references something that cannot be resolved,
    such as a model name missing from the zoo or a checkpoint file that does not exist.
    """
