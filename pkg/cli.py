"""
Command-line entry point
========================

    python cli.py synth --out world/ --seed 7
    python cli.py train --data world/ --out runs/ckpt.json
    python cli.py gradcheck --seed 3
    python cli.py probe --data world/ --ckpt runs/ckpt.json --task cls
    python cli.py index --data world/ --ckpt runs/ckpt.json --out runs/index.json
    python cli.py retrieve --index runs/index.json --query q.bin --k 3 --ckpt runs/ckpt.json
    python cli.py zeroshot --data world/ --ckpt runs/ckpt.json
    python cli.py eval-metrics --task cls --preds preds.csv --labels labels.csv --num-classes 8

Stdout carries the machine-readable result (TSV or JSON); logs go to stderr.
Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

import sys

sys.dont_write_bytecode = True

import argparse
import json
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from colorama import Fore, Style
from colorama import init as colorama_init

from config import TestingConfig, get_config
from encoders import WildsatModel, location_features
from evaluation import (
    ProbeConfig,
    accuracy,
    build_index,
    classification_report,
    confusion_matrix,
    extract_features,
    fit_linear_probe,
    load_index,
    mean_iou,
    mean_top_k_accuracy,
    micro_f1,
    plot_confusion_matrix,
    query_index,
    save_index,
    zero_shot_classify,
)
from exceptions import UsageError, ValidationError, exit_code_for
from extensions import atomic_directory, atomic_write_text, get_logger, hash_inputs
from geodata import ingest_dataset, pair_samples, write_dataset
from instance.base import COVARIATE_CHANNELS
from instance.seeds.world import SyntheticWorldConfig, generate_synthetic_world
from numerics import Tape, backward, finite_diff_check
from training import Batch, TrainConfig, build_loss_graph, load_checkpoint, load_model, save_checkpoint, train

logger = get_logger('cli')

TASK_NAMES = {'cls': 'single_label', 'multilabel': 'multi_label', 'encounter': 'encounter_rate'}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list
    outputs: list
    wall_time: float = 0.0
    input_hashes: dict = field(default_factory=dict)

    def emit(self, out=None):
        payload = json.dumps(asdict(self), indent=2, sort_keys=True) + '\n'
        if out:
            atomic_write_text(manifest_path(out), payload)
        else:
            logger.info(f"Run manifest: {payload.strip()}")


def manifest_path(out):
    return os.path.normpath(out).rstrip(os.sep) + '.run.json'


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit_json(payload):
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + '\n')


def _write_json(path, payload):
    if path:
        atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def _read_json(path):
    try:
        with open(path, encoding='utf-8') as handle:
            return json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f'cannot read {path}: {exc}') from None


def _read_matrix(path):
    try:
        return pd.read_csv(path, header=None, float_precision='round_trip').to_numpy()
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f'cannot read {path}: {exc}') from None


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def resolve_train_config(args, dataset=None):
    """Profile defaults, then the --config file, then flags; model dims follow the data."""
    config = TrainConfig.from_profile(getattr(args, 'profile', None))
    if getattr(args, 'config', None):
        config = TrainConfig.from_dict(_read_json(args.config), base=config)
    overrides = {
        'seed': getattr(args, 'seed', None),
        'epochs': getattr(args, 'epochs', None),
        'batch_size': getattr(args, 'batch_size', None),
        'lr': getattr(args, 'lr', None),
        'temperature': getattr(args, 'temperature', None),
        'peft': getattr(args, 'peft', None),
        'max_steps': getattr(args, 'max_steps', None),
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, 'freeze_location', False):
        overrides['freeze_location'] = True
    if dataset is not None and dataset.tiles:
        channels, size, _ = dataset.tiles[0].shape
        overrides['model'] = {'image': {'channels': channels, 'size': size}, 'text_dim': dataset.text_dim}
    config = TrainConfig.from_dict(overrides, base=config)
    config.crop_size = min(config.crop_size, config.model.image.size)
    config.validate()
    return config


def _labelled_tiles(dataset):
    if not dataset.labels:
        raise ValidationError('dataset has no tiles/labels.json')
    tiles = [tile for tile in dataset.tiles if tile.tile_id in dataset.labels]
    if not tiles:
        raise ValidationError('no tile in the manifest carries a label')
    return tiles


def _model_for(args, dataset):
    if args.ckpt:
        model, _ = load_model(args.ckpt)
        return model
    config = resolve_train_config(args, dataset)
    logger.info(f"No checkpoint given, using a randomly initialized encoder (seed {config.seed})")
    return WildsatModel(config.model, seed=config.seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    payload = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        payload['seed'] = args.seed
    cfg = SyntheticWorldConfig.from_dict(payload)
    world = generate_synthetic_world(cfg)
    with atomic_directory(args.out) as scratch:
        write_dataset(world.to_dataset(), scratch)
    _emit_json({'out': args.out, 'tiles': len(world.tiles), 'observations': len(world.observations),
                'text_sections': len(world.texts), 'habitats': cfg.habitats, 'species': cfg.species})
    return cfg.to_dict(), cfg.seed, [], [args.out]


def cmd_train(args):
    dataset = ingest_dataset(args.data)
    config = resolve_train_config(args, dataset)
    samples = pair_samples(dataset.observations, dataset.tiles, dataset.texts, dataset.raster,
                           config.matching_radius, seed=config.seed, workers=args.workers)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = train(config, samples.samples, resume=resume)
    save_checkpoint(ckpt, args.out)
    _emit_json({'epochs': ckpt.epoch, 'steps': ckpt.rng_state['global_step'], 'loss_history': ckpt.loss_history,
                'skipped': dict(samples.skipped)})
    return config.to_dict(), config.seed, [args.data] + ([args.resume] if args.resume else []), [args.out]


def gradcheck_batch(seed, config):
    """A small random batch with every modality present."""
    rng = np.random.default_rng(seed)
    n = config.batch_size
    image = config.model.image
    pixels_a = rng.uniform(0.0, 1.0, size=(n, image.channels, image.size, image.size))
    pixels_b = rng.uniform(0.0, 1.0, size=pixels_a.shape)
    lat = rng.uniform(-60.0, 60.0, size=n)
    lon = rng.uniform(-170.0, 170.0, size=n)
    covariates = rng.uniform(-1.0, 1.0, size=(n, COVARIATE_CHANNELS))
    sinusoids, covariates = location_features(lat, lon, covariates)
    text = rng.standard_normal((n, config.model.text_dim))
    return Batch(pixels_a, pixels_b, sinusoids, covariates, text)


def run_gradcheck(seed, tolerance=1e-4, max_coords=None):
    config = TrainConfig.from_profile(TestingConfig.PROFILE)
    config.seed = seed
    model = WildsatModel(config.model, seed=seed)
    tape = Tape()
    total, _, _ = build_loss_graph(model, tape, gradcheck_batch(seed, config), config.loss_config())
    backward(tape, total)
    return finite_diff_check(tape, model.params, tolerance=tolerance, output=total,
                             max_coords=max_coords, seed=seed)


def cmd_gradcheck(args):
    report = run_gradcheck(args.seed, args.tolerance, args.max_coords)
    verdict = 'PASS' if report.passed else 'FAIL'
    sys.stdout.write(f'max_rel_error\t{report.max_rel_error:.3e}\t{verdict}\n')
    colour = Fore.GREEN if report.passed else Fore.RED
    sys.stderr.write(f'{colour}{verdict}{Style.RESET_ALL} {report.checked} coordinates checked, '
                     f'worst {report.worst}\n')
    if not report.passed:
        logger.warning(f"Gradient check failed on {len(report.failures)} coordinates: {report.failures[:5]}")
    return {'tolerance': args.tolerance, 'max_coords': args.max_coords}, args.seed, [], []


def _split(labels, seed, stratify):
    rng = np.random.default_rng(seed)
    n = len(labels)
    if not stratify:
        order = rng.permutation(n)
        return np.sort(order[:(n + 1) // 2]), np.sort(order[(n + 1) // 2:])
    train_rows, test_rows = [], []
    for c in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == c))
        cut = max(1, (len(rows) + 1) // 2)
        train_rows.extend(rows[:cut])
        test_rows.extend(rows[cut:])
    return np.sort(train_rows), np.sort(test_rows)


def cmd_probe(args):
    dataset = ingest_dataset(args.data)
    model = _model_for(args, dataset)
    tiles = _labelled_tiles(dataset)
    task = TASK_NAMES[args.task]
    features = extract_features(model, np.stack([tile.pixels for tile in tiles]))
    habitats = np.array([dataset.labels[tile.tile_id]['habitat'] for tile in tiles], dtype=np.int64)
    species = np.zeros((len(tiles), dataset.species_count))
    for row, tile in enumerate(tiles):
        species[row, dataset.labels[tile.tile_id]['species']] = 1.0

    seed = args.seed if args.seed is not None else 0
    train_rows, test_rows = _split(habitats, seed, stratify=task == 'single_label')
    if len(test_rows) == 0:
        raise ValidationError('too few labelled tiles to hold out a test split')
    profile = get_config(args.profile)
    probe_config = ProbeConfig(epochs=args.probe_epochs or profile.PROBE_EPOCHS, lr=args.probe_lr or profile.PROBE_LR,
                               seed=seed)
    labels = habitats if task == 'single_label' else species
    num_classes = int(habitats.max()) + 1 if task == 'single_label' else None
    head = fit_linear_probe(features[train_rows], labels[train_rows], task, probe_config, model=model,
                            num_classes=num_classes)

    result = {'task': args.task, 'n_train': int(len(train_rows)), 'n_test': int(len(test_rows)),
              'baseline': not args.ckpt}
    if task == 'single_label':
        result['train_accuracy'] = accuracy(head.predict(features[train_rows]), habitats[train_rows])
        result['accuracy'] = accuracy(head.predict(features[test_rows]), habitats[test_rows])
    elif task == 'multi_label':
        result['micro_f1'] = micro_f1(head.predict(features[test_rows], probe_config.threshold),
                                      species[test_rows] > 0.5)
    else:
        observed = [set(np.flatnonzero(row).tolist()) for row in species[test_rows]]
        result['top_k_accuracy'], result['skipped'] = mean_top_k_accuracy(head.predict(features[test_rows]),
                                                                          observed)
    _write_json(args.out, result)
    _emit_json(result)
    return asdict(probe_config), seed, [args.data] + ([args.ckpt] if args.ckpt else []), [args.out] if args.out else []


def cmd_index(args):
    dataset = ingest_dataset(args.data)
    model, _ = load_model(args.ckpt)
    index = build_index(model, dataset.tiles)
    save_index(index, args.out)
    _emit_json({'n': index.n, 'd': index.d, 'out': args.out})
    return {}, None, [args.data, args.ckpt], [args.out]


def read_query(spec):
    """A float32 vector file, a one-line CSV file, or an inline comma-separated vector."""
    if os.path.exists(spec):
        if spec.endswith('.csv'):
            return _read_matrix(spec).astype(np.float64).ravel()
        with open(spec, 'rb') as handle:
            blob = handle.read()
        if not blob or len(blob) % 4:
            raise ValidationError(f'query file {spec} is not a float32 vector')
        return np.frombuffer(blob, dtype='<f4').astype(np.float64)
    try:
        return np.array([float(v) for v in spec.split(',')], dtype=np.float64)
    except ValueError:
        raise UsageError(f'query {spec!r} is neither a file nor a comma-separated vector') from None


def cmd_retrieve(args):
    index = load_index(args.index)
    model = load_model(args.ckpt)[0] if args.ckpt else None
    query = read_query(args.query)
    if model is None and index.text_dim is not None and len(query) == index.text_dim:
        logger.warning(f"No --ckpt given: the {len(query)}-dim query is taken as already projected, "
                       f"but raw text embeddings for this index are also {index.text_dim}-dim")
    for tile_id, cosine in query_index(index, query, args.k, model=model):
        sys.stdout.write(f'{tile_id}\t{cosine:.6f}\n')
    inputs = [args.index] + ([args.query] if os.path.exists(args.query) else []) + ([args.ckpt] if args.ckpt else [])
    return {'k': args.k}, None, inputs, []


def cmd_zeroshot(args):
    dataset = ingest_dataset(args.data)
    model, _ = load_model(args.ckpt)
    tiles = _labelled_tiles(dataset)
    if args.classes:
        classes = _read_matrix(args.classes).astype(np.float64)
    elif dataset.text_prototypes is not None:
        classes = dataset.text_prototypes
    else:
        raise ValidationError('no class embeddings: pass --classes or provide text/habitats.csv')
    habitats = np.array([dataset.labels[tile.tile_id]['habitat'] for tile in tiles], dtype=np.int64)
    preds = zero_shot_classify(model, np.stack([tile.pixels for tile in tiles]), classes)
    report = classification_report(preds, habitats, len(classes))
    report['n'] = len(tiles)
    _write_json(args.out, report)
    _emit_json(report)
    return {}, None, [args.data, args.ckpt] + ([args.classes] if args.classes else []), \
        [args.out] if args.out else []


def cmd_eval_metrics(args):
    preds = _read_matrix(args.preds)
    labels = _read_matrix(args.labels)
    if args.task == 'cls':
        preds, labels = preds.ravel().astype(np.int64), labels.ravel().astype(np.int64)
        k = args.num_classes or int(max(preds.max(), labels.max())) + 1
        result = classification_report(preds, labels, k)
        if args.plot:
            plot_confusion_matrix(confusion_matrix(preds, labels, k), args.plot)
    elif args.task == 'multilabel':
        result = {'micro_f1': micro_f1(preds.astype(float) > 0.5, labels.astype(float) > 0.5)}
    elif args.task == 'encounter':
        observed = [set(np.flatnonzero(row > 0.5).tolist()) for row in labels.astype(float)]
        score, skipped = mean_top_k_accuracy(preds.astype(float), observed)
        result = {'top_k_accuracy': score, 'skipped': skipped}
    else:
        preds, labels = preds.astype(np.int64), labels.astype(np.int64)
        k = args.num_classes or int(max(preds.max(), labels.max())) + 1
        result = {'mean_iou': mean_iou(preds, labels, k)}
    _write_json(args.out, result)
    _emit_json(result)
    return {'task': args.task}, None, [args.preds, args.labels], [p for p in (args.out, args.plot) if p]


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def _train_flags(parser):
    parser.add_argument('--profile', choices=['desk', 'full', 'testing'])
    parser.add_argument('--config', help='JSON file overriding training config fields')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--lr', type=float)
    parser.add_argument('--temperature', type=float)
    parser.add_argument('--peft', choices=['full', 'scale_shift'])
    parser.add_argument('--freeze-location', action='store_true')
    parser.add_argument('--max-steps', type=int)


def build_parser():
    parser = _Parser(prog='wildsat', description='Tri-modal contrastive training for satellite image encoders')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    synth = sub.add_parser('synth', help='generate a synthetic world dataset')
    synth.add_argument('--out', required=True)
    synth.add_argument('--seed', type=int)
    synth.add_argument('--config', help='JSON file of synthetic world settings')
    synth.set_defaults(handler=cmd_synth)

    train_cmd = sub.add_parser('train', help='train encoders and heads')
    train_cmd.add_argument('--data', required=True)
    train_cmd.add_argument('--out', required=True, help='checkpoint path (ckpt.json)')
    train_cmd.add_argument('--resume', help='checkpoint to continue from')
    train_cmd.add_argument('--workers', type=int, default=1)
    _train_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    gradcheck = sub.add_parser('gradcheck', help='finite-difference check of the full objective')
    gradcheck.add_argument('--seed', type=int, default=0)
    gradcheck.add_argument('--tolerance', type=float, default=1e-4)
    gradcheck.add_argument('--max-coords', type=int)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    probe = sub.add_parser('probe', help='linear probe on frozen tile features')
    probe.add_argument('--data', required=True)
    probe.add_argument('--ckpt')
    probe.add_argument('--task', choices=sorted(TASK_NAMES), default='cls')
    probe.add_argument('--out')
    probe.add_argument('--probe-epochs', dest='probe_epochs', type=int)
    probe.add_argument('--probe-lr', dest='probe_lr', type=float)
    probe.add_argument('--profile', choices=['desk', 'full', 'testing'])
    probe.add_argument('--config')
    probe.add_argument('--seed', type=int)
    probe.set_defaults(handler=cmd_probe)

    index = sub.add_parser('index', help='build a cosine retrieval index over tiles')
    index.add_argument('--data', required=True)
    index.add_argument('--ckpt', required=True)
    index.add_argument('--out', required=True)
    index.set_defaults(handler=cmd_index)

    retrieve = sub.add_parser('retrieve', help='top-k tiles for a query embedding')
    retrieve.add_argument('--index', required=True)
    retrieve.add_argument('--query', required=True)
    retrieve.add_argument('--k', type=int, default=10)
    retrieve.add_argument('--ckpt', help='project a raw text embedding through this checkpoint')
    retrieve.set_defaults(handler=cmd_retrieve)

    zeroshot = sub.add_parser('zeroshot', help='zero-shot habitat classification')
    zeroshot.add_argument('--data', required=True)
    zeroshot.add_argument('--ckpt', required=True)
    zeroshot.add_argument('--classes', help='CSV of raw class text embeddings, one row per class')
    zeroshot.add_argument('--out')
    zeroshot.set_defaults(handler=cmd_zeroshot)

    metrics = sub.add_parser('eval-metrics', help='score prediction files')
    metrics.add_argument('--task', choices=['cls', 'multilabel', 'encounter', 'segmentation'], required=True)
    metrics.add_argument('--preds', required=True)
    metrics.add_argument('--labels', required=True)
    metrics.add_argument('--num-classes', type=int)
    metrics.add_argument('--plot', help='write a confusion-matrix heatmap (cls only)')
    metrics.add_argument('--out')
    metrics.set_defaults(handler=cmd_eval_metrics)
    return parser


def dispatch(argv=None):
    started = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        config, seed, inputs, outputs = args.handler(args)
        RunManifest(args.command, config, seed, inputs, outputs, round(time.perf_counter() - started, 3),
                    hash_inputs(inputs)).emit(getattr(args, 'out', None))
        return 0
    except SystemExit as exc:
        return exc.code or 0
    except ValidationError as exc:
        logger.error(str(exc))
        return exit_code_for(exc)
    except Exception as exc:
        logger.exception(f"Command failed: {exc}")
        return exit_code_for(exc)


if __name__ == '__main__':
    colorama_init()
    sys.exit(dispatch())
