"""
Pipeline stages behind the commands: gen-data, train, maps and report, each
reading the previous stage's artifacts from the output directory. `audit` runs
them all.
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from .consts import ARCH_A, ARCH_B, IMPORTED, SEGMENTER, TEST, TRAIN, VAL
from .formats import load_map, save_map, to_uint8, write_csv, write_pgm
from .harness import (
    cascading_randomization, repeatability_test, reproducibility_test, segmenter_agreement, utility_test,
)
from .metrics import pr_curve
from .report import build_report, design_decisions, write_report
from .saliency import compute_maps
from .synth import average_mask, export_dataset, generate, import_dataset
from .training import evaluate_auc, load_model, predict_proba, save_model, train_classifier, train_segmenter

logger = logging.getLogger(__name__)

DATA_DIR = 'data'
MODELS_DIR = 'models'
MAPS_DIR = 'maps'
PR_DIR = 'pr'
MAPS_INDEX = 'index.json'

ARCH_A_1 = 'arch_a_1'
ARCH_A_2 = 'arch_a_2'
ARCH_B_1 = 'arch_b'
SEGMENTER_1 = 'segmenter_1'
SEGMENTER_2 = 'segmenter_2'
CLASSIFIERS = (ARCH_A_1, ARCH_A_2, ARCH_B_1)
SEGMENTERS = (SEGMENTER_1, SEGMENTER_2)
SEGMENTER_MAP = 'SEG'


def default_workers():
    return getattr(settings, 'TRUST_WORKERS', None) or os.cpu_count() or 1


def _check_hash(path, found, expected):
    if found != expected:
        raise ValidationError(
            f'{path} was produced under config hash {found or "(none)"}, the active config hashes to {expected}.'
        )


def model_plan(config):
    """
    (name, arch, seed) for every model a run trains.
    """
    models = config.models
    return (
        (ARCH_A_1, ARCH_A, models['arch_a_seed']),
        (ARCH_A_2, ARCH_A, models['arch_a_replicate_seed']),
        (ARCH_B_1, ARCH_B, models['arch_b_seed']),
        (SEGMENTER_1, SEGMENTER, models['segmenter_seeds'][0]),
        (SEGMENTER_2, SEGMENTER, models['segmenter_seeds'][1]),
    )


def gen_data(config, out, workers=1):
    """
    Generates (or imports) the dataset and exports it under out/data.
    """
    params = config.dataset
    if params['source'] == IMPORTED:
        dataset = import_dataset(params['import_path'])
        if dataset.manifest.image_size != params['image_size']:
            raise ValidationError(
                f'Imported images are {dataset.manifest.image_size} pixels wide, dataset.image_size is '
                f'{params["image_size"]}.'
            )
    else:
        dataset = generate(
            params['n'], params['positive_fraction'], params['seed'], params['difficulty'], params['flavor'],
            params['image_size'], params['max_lesion_fraction'],
        )
    export_dataset(dataset, Path(out) / DATA_DIR, config.hash)
    return dataset


def load_dataset(config, out):
    path = Path(out) / DATA_DIR
    if not (path / 'manifest.json').is_file():
        raise ValidationError(f'No dataset under {path}; run gen-data first.')
    dataset = import_dataset(path)
    _check_hash(path / 'manifest.json', dataset.manifest.config_hash, config.hash)
    return dataset


def _train_one(dataset, config, arch, seed):
    if arch == SEGMENTER:
        cfg = config.segmenter_training
        return train_segmenter(
            dataset, seed, cfg.lr, cfg.max_epochs, cfg.patience, cfg.decay_patience, cfg.decay_factor,
            cfg.batch_size, cfg.epoch_size,
        )
    cfg = config.classifier_training(arch)
    return train_classifier(dataset, arch, seed, cfg.lr, cfg.max_epochs, cfg.patience, cfg.batch_size)


def train(config, out, workers=1):
    """
    Trains both ARCH_A replicates, ARCH_B and both segmenter replicates; models
    are independent, so they may train in parallel processes.
    """
    dataset = load_dataset(config, out)
    plan = model_plan(config)
    jobs = [(dataset, config, arch, seed) for _, arch, seed in plan]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
            models = list(executor.map(_train_one, *zip(*jobs)))
    else:
        models = [_train_one(*job) for job in jobs]
    directory = Path(out) / MODELS_DIR
    for (name, _, _), model in zip(plan, models):
        save_model(model, directory, name, config.hash)
        logger.info('Saved %s (best epoch %d of %d)', name, model.best_epoch, model.stopped_epoch)
    return dict(zip((name for name, _, _ in plan), models))


def load_models(config, out):
    directory = Path(out) / MODELS_DIR
    models = {}
    for name, arch, _ in model_plan(config):
        model = load_model(directory, name, config.hash)
        if model.arch != arch:
            raise ValidationError(f'{directory / name}.json holds a {model.arch} model, expected {arch}.')
        models[name] = model
    return models


def _map_stem(model_name, method, image_id):
    return f'{model_name}_{method}_{image_id}'


def _save_maps(directory, model_name, method, image_ids, stack):
    for image_id, values in zip(image_ids, stack):
        stem = _map_stem(model_name, method, image_id)
        save_map(values, directory / f'{stem}.salf')
        write_pgm(directory / f'{stem}.pgm', to_uint8(values))


def maps(config, out, workers=1):
    """
    Maps of every classifier and method on the positive test images, the
    segmenters' outputs on the same images and PR curves of the first replicate.
    """
    dataset = load_dataset(config, out)
    models = load_models(config, out)
    positives = dataset.positives(TEST)
    images = np.stack([sample.image for sample in positives])
    image_ids = [sample.sample_id for sample in positives]
    directory = Path(out) / MAPS_DIR
    directory.mkdir(parents=True, exist_ok=True)

    computed = {}
    for name in CLASSIFIERS:
        computed[name] = compute_maps(models[name], config.methods, images, config.saliency, workers, image_ids)
        for method in config.methods:
            _save_maps(directory, name, method, image_ids, computed[name][method])
    for name in SEGMENTERS:
        _save_maps(directory, name, SEGMENTER_MAP, image_ids, predict_proba(models[name], images))

    pr_directory = Path(out) / PR_DIR
    pr_directory.mkdir(parents=True, exist_ok=True)
    for method in config.methods:
        for sample, values in zip(positives, computed[ARCH_A_1][method]):
            curve = pr_curve(values, sample.truth(dataset.flavor))
            write_csv(pr_directory / f'{method}_{sample.sample_id}.csv', ('threshold', 'precision', 'recall'),
                      curve.rows())

    index = {
        'config_hash': config.hash,
        'methods': list(config.methods),
        'image_ids': image_ids,
        'models': {name: models[name].fingerprint for name in CLASSIFIERS + SEGMENTERS},
    }
    (directory / MAPS_INDEX).write_text(json.dumps(index, indent=2, sort_keys=True) + '\n')
    logger.info('Wrote %d maps for %d images', len(CLASSIFIERS) * len(config.methods) * len(image_ids),
                len(image_ids))
    return computed


def load_maps(config, out, models, image_ids):
    """
    The stored maps as {model name: {method: (N, H, W)}}; segmenter outputs sit under SEG.
    """
    directory = Path(out) / MAPS_DIR
    index_path = directory / MAPS_INDEX
    if not index_path.is_file():
        raise ValidationError(f'No map index under {directory}; run maps first.')
    index = json.loads(index_path.read_text())
    _check_hash(index_path, index.get('config_hash'), config.hash)
    if index.get('image_ids') != list(image_ids) or index.get('methods') != list(config.methods):
        raise ValidationError(f'{index_path} does not cover the current test images and methods.')
    for name, fingerprint in index.get('models', {}).items():
        if name in models and models[name].fingerprint != fingerprint:
            raise ValidationError(f'{index_path}: maps of {name} were computed with other weights.')
    stored = {}
    for name in CLASSIFIERS:
        stored[name] = {
            method: np.stack([load_map(directory / f'{_map_stem(name, method, i)}.salf') for i in image_ids])
            for method in config.methods
        }
    for name in SEGMENTERS:
        stored[name] = {
            SEGMENTER_MAP: np.stack([load_map(directory / f'{_map_stem(name, SEGMENTER_MAP, i)}.salf')
                                     for i in image_ids])
        }
    return stored


def report(config, out, workers=1):
    """
    Runs the four tests over the stored artifacts and writes the report.
    """
    dataset = load_dataset(config, out)
    models = load_models(config, out)
    test = dataset.split(TEST)
    positives = dataset.positives(TEST)
    image_ids = [sample.sample_id for sample in positives]
    stored = load_maps(config, out, models, image_ids)
    methods = config.methods
    avg = average_mask(dataset.split(TRAIN) + dataset.split(VAL), dataset.flavor)

    utility = {
        method: utility_test(
            method, models[ARCH_A_1], positives, avg, models[SEGMENTER_1], dataset.flavor, config.saliency,
            config.harness, maps=stored[ARCH_A_1][method], segmenter_maps=stored[SEGMENTER_1][SEGMENTER_MAP],
        )
        for method in methods
    }
    randomization = cascading_randomization(
        models[ARCH_A_1], methods, test, saliency_cfg=config.saliency, ssim_cfg=config.ssim,
        harness_cfg=config.harness, auc_samples=test, workers=workers,
    )
    baseline = segmenter_agreement(models[SEGMENTER_1], models[SEGMENTER_2], positives, config.ssim)
    repeatability = repeatability_test(
        models[ARCH_A_1], models[ARCH_A_2], methods, positives, baseline, config.saliency, config.ssim,
        config.harness, maps_a=stored[ARCH_A_1], maps_b=stored[ARCH_A_2],
    )
    reproducibility = reproducibility_test(
        models[ARCH_A_1], models[ARCH_B_1], methods, positives, baseline, config.saliency, config.ssim,
        config.harness, maps_a=stored[ARCH_A_1], maps_b=stored[ARCH_B_1],
    )
    model_rows = [
        {
            'name': name,
            'arch': models[name].arch,
            'seed': models[name].seed,
            'fingerprint': models[name].fingerprint,
            'best_epoch': models[name].best_epoch,
            'test_auc': evaluate_auc(models[name], test),
        }
        for name in CLASSIFIERS + SEGMENTERS
    ]
    if randomization.randomized_auc:
        model_rows.append({
            'name': f'{ARCH_A_1}_randomized',
            'arch': ARCH_A,
            'seed': config.harness.randomization_seed,
            'fingerprint': '',
            'best_epoch': 0,
            'test_auc': float(randomization.randomized_auc[-1][1]),
        })

    trust_report = build_report(
        methods, utility, randomization, repeatability, reproducibility, baseline,
        flavor=dataset.flavor,
        config_hash=config.hash,
        design=design_decisions(config.saliency, config.ssim, config.harness),
        models=model_rows,
    )
    write_report(trust_report, out)
    return trust_report


def audit(config, out, workers=1):
    gen_data(config, out)
    train(config, out, workers)
    maps(config, out, workers)
    return report(config, out, workers)


STAGES = {
    'gen-data': gen_data,
    'train': train,
    'maps': maps,
    'report': report,
    'audit': audit,
}
