""" Evaluation harness: datasets, attack campaigns, transfer reports and the weight/hyperparameter studies.

A campaign crafts adversarial examples once per (attack variant, base attack) from the surrogate set
and scores every target model on the same image sample. Targets that are also surrogates are
white-box rows; black-box averages leave them out.

"""
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from utilities.attack_utilities import BASE_ATTACKS, AttackConfig
from utilities.config_utilities import ConfigurationError
from utilities.ensemble_attacks import (
    ABLATIONS, adaea_attack, binary_filter, compute_gradient_stack, disparity_map, ensemble_cosine_maps,
    probe_loss, weight_sweep_attack,
)
from utilities.file_utilities import read_flat_binary, read_idx, write_graymap, write_raw_tensor
from utilities.models import DEFAULT_INPUT_SHAPE, LabeledDataset
from utilities.numerics import NumericalError

REPORT_COLUMNS = ['attack', 'base', 'surrogates', 'target', 'clean_acc', 'adv_acc', 'asr', 'white_box', 'n',
                  'seconds', 'delta_vs_ens']
FRACTION_COLUMNS = ['clean_acc', 'adv_acc', 'asr', 'delta_vs_ens']
BUDGET_TOLERANCE = 1e-12
SWEEP_PREFIX = 'Sweep(w1='


def attack_success_rate(clean_acc, adv_acc, gamma=1e-12):
    """1 - adv_acc / (clean_acc + gamma), clamped to [0, 1]."""
    if not (0.0 <= clean_acc <= 1.0 and 0.0 <= adv_acc <= 1.0):
        raise ValueError(f"accuracies must lie in [0, 1], got clean={clean_acc}, adversarial={adv_acc}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return float(np.clip(1.0 - adv_acc / (clean_acc + gamma), 0.0, 1.0))


# ---------------------------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------------------------

def class_offsets(num_channels, num_classes):
    """Sign patterns in channel space used as class mean offsets.

    Patterns with an even number of minus signs come first (for 3 channels these are the vertices
    (1,1,1), (1,-1,-1), (-1,1,-1), (-1,-1,1) of a regular tetrahedron), then the remaining ones.
    """
    codes = range(2 ** num_channels)
    bits = [[(code >> (num_channels - 1 - c)) & 1 for c in range(num_channels)] for code in codes]
    even = [b for b in bits if sum(b) % 2 == 0]
    odd = [b for b in bits if sum(b) % 2 == 1]
    patterns = even + odd
    if num_classes > len(patterns):
        raise ValueError(f"{num_channels} channels support at most {len(patterns)} synthetic classes")
    return 1.0 - 2.0 * np.array(patterns[:num_classes], dtype=np.float64)


def generate_synthetic(num_images=512, num_classes=4, image_shape=DEFAULT_INPUT_SHAPE, signal=0.02, noise=0.1,
                       seed=0):
    """Gaussian-blob images: 0.5 + signal * class offset per channel + N(0, noise^2) per pixel, clipped to [0, 1].

    Classes are balanced and the dataset is a pure function of its arguments.
    """
    if num_images < 1:
        raise ValueError(f"num_images must be at least 1, got {num_images}")
    rng = np.random.default_rng(seed)
    offsets = class_offsets(image_shape[0], num_classes)
    labels = rng.permutation(np.arange(num_images) % num_classes)
    pixel_noise = rng.normal(0.0, noise, size=(num_images,) + tuple(image_shape))
    images = np.clip(0.5 + signal * offsets[labels][:, :, None, None] + pixel_noise, 0.0, 1.0)
    return LabeledDataset(images, labels, num_classes, f"synthetic{num_classes}c_seed{seed}")


def load_dataset(path, format='synthetic', spec=None, verbose=False):
    """Loads a labelled image dataset.

    Args:
        path (str): Dataset file (FlatBinary container or IDX image file); ignored for synthetic data.
        format (str): 'synthetic', 'flat' / 'flatbinary', or 'idx'.
        spec (dict): Keyword arguments of generate_synthetic, or {'labels': path, 'num_classes': n} for IDX.
        verbose (bool): Print loading progress.

    Returns:
        LabeledDataset
    """
    spec = dict(spec or {})
    fmt = format.lower()
    if fmt == 'synthetic':
        return generate_synthetic(**spec)
    if fmt in ('flat', 'flatbinary'):
        return read_flat_binary(path, verbose)
    if fmt == 'idx':
        if 'labels' not in spec:
            raise ValueError("IDX datasets need spec['labels'], the path of the label file")
        return read_idx(path, spec['labels'], spec.get('num_classes'), verbose)
    raise ValueError(f"Unknown dataset format '{format}'")


def split_dataset(data, test_fraction=0.2, seed=0):
    """Stratified train/evaluation split (plain random split when a class has fewer than 2 images)."""
    indices = np.arange(len(data))
    counts = np.bincount(data.labels, minlength=data.num_classes)
    stratify = data.labels if counts[counts > 0].min() >= 2 else None
    train_idx, test_idx = train_test_split(indices, test_size=test_fraction, random_state=seed, stratify=stratify)
    return data.subset(np.sort(train_idx)), data.subset(np.sort(test_idx))


def select_sample(data, num_samples, seed=0):
    """Sorted indices of num_samples images drawn without replacement (all images when fewer exist)."""
    if num_samples < 1:
        raise ValueError(f"sample count must be at least 1, got {num_samples}")
    if num_samples >= len(data):
        return np.arange(len(data))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(len(data), size=num_samples, replace=False))


# ---------------------------------------------------------------------------------------------
# Campaigns
# ---------------------------------------------------------------------------------------------

def sweep_variant_name(w1):
    return f"{SWEEP_PREFIX}{w1:.2f})"


def sweep_weight_of(variant):
    """w1 of a 'Sweep(w1=...)' variant name, or None for ablation names."""
    if variant.startswith(SWEEP_PREFIX) and variant.endswith(')'):
        return float(variant[len(SWEEP_PREFIX):-1])
    return None


@dataclass
class CampaignSpec:
    """Description of one attack campaign.

    Args:
        surrogates (list): Names of the models the attacker differentiates.
        targets (list): Names of the models scored on the adversarial examples.
        attacks (list): Ablation names ('Ens', '+AGM', '+DRF', 'AdaEA').
        bases (list): Base attacks ('fgsm', 'ifgsm', 'mifgsm', 'di2fgsm').
        cfg (AttackConfig): Attack hyperparameters.
        samples (int): Number of images attacked.
        seed (int): Seed of the image sample.
        sweep_weights (list): Fixed w1 values evaluated as extra 'Sweep(w1=...)' variants (2 surrogates).
    """
    surrogates: list
    targets: list
    attacks: list = field(default_factory=lambda: list(ABLATIONS))
    bases: list = field(default_factory=lambda: ['ifgsm'])
    cfg: AttackConfig = field(default_factory=AttackConfig)
    samples: int = 256
    seed: int = 0
    sweep_weights: list = field(default_factory=list)

    @property
    def variants(self):
        return list(self.attacks) + [sweep_variant_name(w1) for w1 in self.sweep_weights]

    def validate(self, zoo):
        """Checks the spec against a zoo before any compute."""
        if self.samples < 1:
            raise ValueError(f"sample count must be at least 1, got {self.samples}")
        if not self.surrogates:
            raise ValueError("a campaign needs at least one surrogate model")
        for name in list(self.surrogates) + list(self.targets):
            if name not in zoo:
                raise ConfigurationError(f"Model '{name}' is not in the zoo (available: {', '.join(zoo)})")
        for name in self.attacks:
            if name not in ABLATIONS:
                raise ValueError(f"Unknown attack variant '{name}'. Expected one of {list(ABLATIONS)}")
        for name in self.bases:
            if name not in BASE_ATTACKS:
                raise ValueError(f"Unknown base attack '{name}'. Expected one of {BASE_ATTACKS}")
        if self.sweep_weights and len(self.surrogates) != 2:
            raise ConfigurationError(f"a weight sweep needs exactly 2 surrogates, got {len(self.surrogates)}")
        self.cfg.validate()
        return self


def as_zoo(models):
    """Name -> model dict from a list or dict of models."""
    if isinstance(models, dict):
        return dict(models)
    return {model.model_name: model for model in models}


def attack_one(models, x, y, cfg, variant, base_attack, stream=0):
    """Crafts one adversarial example with a named variant."""
    w1 = sweep_weight_of(variant)
    if w1 is not None:
        return weight_sweep_attack(models, x, y, cfg, w1, base_attack, stream)
    use_agm, use_drf = ABLATIONS[variant]
    return adaea_attack(models, x, y, cfg, base_attack, use_agm, use_drf, stream=stream)


def check_budget(x, x_adv, epsilon):
    """Raises NumericalError when an adversarial batch leaves the epsilon ball or the pixel range."""
    if np.max(np.abs(x_adv - x)) > epsilon + BUDGET_TOLERANCE or x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise NumericalError("adversarial examples violate the perturbation budget or the pixel range")


def generate_adversarial(models, data, indices, cfg, variant='AdaEA', base_attack='ifgsm', verbose=False):
    """Adversarial versions of data.images[indices]. The random stream of each image is its dataset index."""
    indices = np.asarray(indices, dtype=np.int64)
    adversarial = np.empty((len(indices),) + data.image_shape)
    image_iter = tqdm(enumerate(indices), total=len(indices), desc=f"{variant}/{base_attack}", disable=not verbose)
    for j, index in image_iter:
        adversarial[j] = attack_one(models, data.images[index], data.labels[index], cfg, variant, base_attack,
                                    stream=int(index))
    check_budget(data.images[indices], adversarial, cfg.epsilon)
    return adversarial


def run_campaign(spec, zoo, dataset, verbose=False):
    """Runs every (variant, base attack) of a campaign and scores every target.

    Args:
        spec (CampaignSpec): Campaign description.
        zoo: Trained models (dict by name or list).
        dataset (LabeledDataset): Images to sample from.
        verbose (bool): Print progress.

    Returns:
        EvalReport
    """
    zoo = as_zoo(zoo)
    spec.validate(zoo)
    surrogates = [zoo[name] for name in spec.surrogates]
    targets = [zoo[name] for name in spec.targets]
    indices = select_sample(dataset, spec.samples, spec.seed)
    images, labels = dataset.images[indices], dataset.labels[indices]
    clean_acc = {t.model_name: float(accuracy_score(labels, t.predict(images))) for t in targets}
    surrogate_key = ';'.join(spec.surrogates)

    rows = []
    for variant in spec.variants:
        for base_attack in spec.bases:
            if verbose:
                print(f"| {variant} with {base_attack} on {surrogate_key} ({len(indices)} images)")
            tic = time.time()
            adversarial = generate_adversarial(surrogates, dataset, indices, spec.cfg, variant, base_attack, verbose)
            seconds = time.time() - tic
            for target in targets:
                adv_acc = float(accuracy_score(labels, target.predict(adversarial)))
                rows.append({
                    'attack': variant, 'base': base_attack, 'surrogates': surrogate_key, 'target': target.model_name,
                    'clean_acc': clean_acc[target.model_name], 'adv_acc': adv_acc,
                    'asr': attack_success_rate(clean_acc[target.model_name], adv_acc, spec.cfg.gamma),
                    'white_box': target.model_name in spec.surrogates, 'n': len(indices), 'seconds': seconds,
                })

    config = dict(spec.cfg.to_dict(), samples=spec.samples, sample_seed=spec.seed, dataset=dataset.name,
                  surrogates=surrogate_key, targets=';'.join(spec.targets))
    return EvalReport(rows, config)


class EvalReport:
    """Rows of a campaign plus the configuration echo they were produced with."""

    def __init__(self, rows=None, config=None):
        self.rows = list(rows or [])
        self.config = dict(config or {})

    def __len__(self):
        return len(self.rows)

    def to_frame(self):
        """DataFrame in report column order, with the ASR difference to the Ens row of the same base/target."""
        frame = pd.DataFrame(self.rows, columns=REPORT_COLUMNS[:-1])
        ens = frame[frame['attack'] == 'Ens'].set_index(['base', 'surrogates', 'target'])['asr']
        keys = list(zip(frame['base'], frame['surrogates'], frame['target']))
        frame['delta_vs_ens'] = [frame['asr'].iloc[i] - ens[key] if key in ens.index else np.nan
                                 for i, key in enumerate(keys)]
        return frame

    def black_box_average(self, attack, base_attack='ifgsm'):
        frame = self.to_frame()
        rows = frame[(frame['attack'] == attack) & (frame['base'] == base_attack) & ~frame['white_box'].astype(bool)]
        return float(rows['asr'].mean()) if len(rows) else float('nan')

    def summary(self):
        """Per (attack, base): mean white-box ASR, mean black-box ASR, its delta versus Ens and the
        wall-clock overhead ratio versus Ens.
        """
        frame = self.to_frame()
        columns = ['attack', 'base', 'white_box_asr', 'black_box_asr', 'delta_vs_ens', 'seconds', 'overhead_vs_ens']
        if frame.empty:
            return pd.DataFrame(columns=columns)
        records = []
        for (attack, base_attack), group in frame.groupby(['attack', 'base'], sort=False):
            white = group[group['white_box'].astype(bool)]['asr']
            black = group[~group['white_box'].astype(bool)]['asr']
            records.append({'attack': attack, 'base': base_attack,
                            'white_box_asr': white.mean() if len(white) else np.nan,
                            'black_box_asr': black.mean() if len(black) else np.nan,
                            'seconds': group['seconds'].mean()})
        summary = pd.DataFrame(records)
        for base_attack in summary['base'].unique():
            ens = summary[(summary['attack'] == 'Ens') & (summary['base'] == base_attack)]
            mask = summary['base'] == base_attack
            if len(ens):
                summary.loc[mask, 'delta_vs_ens'] = summary.loc[mask, 'black_box_asr'] - ens['black_box_asr'].iloc[0]
                summary.loc[mask, 'overhead_vs_ens'] = summary.loc[mask, 'seconds'] / ens['seconds'].iloc[0]
        return summary.reindex(columns=columns)


def emit_report(report, path, format='csv', include_timing=True):
    """Writes a report as CSV (with a '# key=value' config echo block) or JSON.

    Fractions are written with 6 decimals; include_timing=False drops the seconds column so repeated
    runs produce byte-identical files.
    """
    frame = report.to_frame()
    if not include_timing:
        frame = frame.drop(columns=['seconds'])
    fmt = format.lower()
    if fmt == 'csv':
        with open(path, 'w', newline='') as fid:
            for key, value in report.config.items():
                fid.write(f"# {key}={value}\n")
            frame.to_csv(fid, index=False, float_format='%.6f', na_rep='', lineterminator='\n')
    elif fmt == 'json':
        frame[FRACTION_COLUMNS] = frame[FRACTION_COLUMNS].astype(float).round(6)
        payload = {'config': report.config, 'rows': json.loads(frame.to_json(orient='records'))}
        with open(path, 'w') as fid:
            json.dump(payload, fid, indent=2)
    else:
        raise ValueError(f"Unknown report format '{format}'")


def parse_report(path):
    """Reads an emitted CSV or JSON report back into an EvalReport (config values become strings)."""
    if str(path).endswith('.json'):
        with open(path, 'r') as fid:
            payload = json.load(fid)
        frame = pd.DataFrame(payload['rows'])
        config = {key: str(value) for key, value in payload['config'].items()}
    else:
        config = {}
        with open(path, 'r') as fid:
            for line in fid:
                if not line.startswith('# '):
                    break
                key, _, value = line[2:].rstrip('\n').partition('=')
                config[key] = value
        frame = pd.read_csv(path, comment='#', dtype={'surrogates': str, 'target': str, 'attack': str, 'base': str})
    frame = frame.drop(columns=['delta_vs_ens'], errors='ignore')
    rows = []
    for record in frame.to_dict(orient='records'):
        record['white_box'] = bool(record['white_box'])
        record['n'] = int(record['n'])
        if 'seconds' not in record:
            record['seconds'] = np.nan
        rows.append(record)
    return EvalReport(rows, config)


# ---------------------------------------------------------------------------------------------
# Studies
# ---------------------------------------------------------------------------------------------

def weight_sweep_experiment(surrogates, targets, dataset, cfg, grid_size=11, base_attack='ifgsm', samples=256,
                            seed=0, verbose=False):
    """Black-box ASR of fixed-weight two-model ensembles over w1 in {0, 1/(g-1), ..., 1}, plus the adaptive
    (+AGM) ensemble for comparison.

    Returns:
        table: DataFrame with columns variant, w1, black_box_asr (w1 is NaN for the adaptive row).
        report: The underlying EvalReport.
    """
    zoo = as_zoo(list(surrogates) + list(targets))
    surrogate_names = [m.model_name for m in surrogates]
    if len(surrogate_names) != 2:
        raise ConfigurationError(f"a weight sweep needs exactly 2 surrogates, got {len(surrogate_names)}")
    if grid_size < 3:
        raise ValueError(f"grid_size must be at least 3, got {grid_size}")
    weights = [i / (grid_size - 1) for i in range(grid_size)]
    spec = CampaignSpec(surrogate_names, [m.model_name for m in targets], attacks=['+AGM'], bases=[base_attack],
                        cfg=cfg, samples=samples, seed=seed, sweep_weights=weights)
    report = run_campaign(spec, zoo, dataset, verbose)
    records = [{'variant': variant, 'w1': sweep_weight_of(variant), 'black_box_asr':
                report.black_box_average(variant, base_attack)} for variant in spec.variants]
    table = pd.DataFrame(records, columns=['variant', 'w1', 'black_box_asr'])
    table['w1'] = table['w1'].astype(float)
    table = pd.concat([table[table['w1'].notna()], table[table['w1'].isna()]], ignore_index=True)
    return table, report


def sensitivity_experiment(surrogates, targets, dataset, cfg, parameter, values, base_attack='ifgsm', samples=256,
                           seed=0, verbose=False):
    """Average black-box ASR of AdaEA as one hyperparameter ('beta' or 'eta') varies."""
    if parameter not in ('beta', 'eta'):
        raise ValueError(f"sensitivity is studied for 'beta' or 'eta', got '{parameter}'")
    zoo = as_zoo(list(surrogates) + list(targets))
    records = []
    for value in values:
        spec = CampaignSpec([m.model_name for m in surrogates], [m.model_name for m in targets], attacks=['AdaEA'],
                            bases=[base_attack], cfg=cfg.replace(**{parameter: float(value)}), samples=samples,
                            seed=seed)
        report = run_campaign(spec, zoo, dataset, verbose)
        records.append({'parameter': parameter, 'value': float(value),
                        'black_box_asr': report.black_box_average('AdaEA', base_attack)})
    return pd.DataFrame(records, columns=['parameter', 'value', 'black_box_asr'])


def surrogate_count_experiment(surrogates, targets, dataset, cfg, base_attack='ifgsm', samples=256, seed=0,
                               verbose=False):
    """Ens versus +AGM black-box ASR for the surrogate prefixes of size 2..K."""
    if len(surrogates) < 2:
        raise ValueError("the surrogate-count study needs at least 2 surrogates")
    zoo = as_zoo(list(surrogates) + list(targets))
    target_names = [m.model_name for m in targets]
    records = []
    for count in range(2, len(surrogates) + 1):
        names = [m.model_name for m in surrogates[:count]]
        spec = CampaignSpec(names, target_names, attacks=['Ens', '+AGM'], bases=[base_attack], cfg=cfg,
                            samples=samples, seed=seed)
        report = run_campaign(spec, zoo, dataset, verbose)
        for attack in spec.attacks:
            records.append({'num_surrogates': count, 'attack': attack,
                            'black_box_asr': report.black_box_average(attack, base_attack)})
    return pd.DataFrame(records, columns=['num_surrogates', 'attack', 'black_box_asr'])


def probe_diagonal_dominance(models, dataset, cfg, samples=100, seed=0):
    """Fraction of off-diagonal probe pairs (k, i) with s[k][k] >= s[k][i], measured on clean images."""
    models = list(models)
    if len(models) < 2:
        raise ValueError("diagonal dominance needs at least 2 models")
    hits, total = 0, 0
    off_diagonal = ~np.eye(len(models), dtype=bool)
    for index in select_sample(dataset, samples, seed):
        x, y = dataset.images[index], dataset.labels[index]
        s = probe_loss(models, x, y, compute_gradient_stack(models, x, y), cfg.alpha)
        dominated = np.diag(s)[:, None] >= s
        hits += int(np.sum(dominated & off_diagonal))
        total += int(np.sum(off_diagonal))
    return hits / total


def emit_disparity_artifacts(grads, eta, out_dir, ensemble_grad=None):
    """Writes the disparity map, the binary filter and per-model cosine maps as P5 graymaps and ADTR dumps.

    Args:
        grads (GradientStack): Surrogate gradients at one point (K >= 2).
        eta (float): Filter threshold.
        out_dir (str): Output directory (created when missing).
        ensemble_grad: Ensemble gradient the cosine maps compare against; the mean gradient when None.

    Returns:
        paths (dict): Artifact name -> written path.
    """
    if len(grads) < 2:
        raise ValueError("disparity artifacts need at least 2 surrogate gradients")
    os.makedirs(out_dir, exist_ok=True)
    d = disparity_map(grads)
    b = binary_filter(d, eta)
    if ensemble_grad is None:
        ensemble_grad = grads.grads.mean(axis=0)
    cos_maps = ensemble_cosine_maps(grads, ensemble_grad)

    maps = {'disparity': (d, -1.0), 'filter': (b, 0.0)}
    for name, cos_map in zip(grads.model_names, cos_maps):
        maps[f'cosine_{name}'] = (cos_map, -1.0)
    paths = {}
    for name, (values, low) in maps.items():
        graymap_path = os.path.join(out_dir, f'{name}.pgm')
        raw_path = os.path.join(out_dir, f'{name}.adtr')
        write_graymap(values, graymap_path, low=low, high=1.0)
        write_raw_tensor(values, raw_path)
        paths[f'{name}.pgm'] = graymap_path
        paths[f'{name}.adtr'] = raw_path
    return paths
