"""
TrustReport assembly, the PASS/FAIL grid and its renderings (JSON, text, CSV, SVG).
"""
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from django.core.exceptions import ValidationError  # noqa: E402
from rest_framework.renderers import JSONRenderer  # noqa: E402

from .consts import (  # noqa: E402
    BASE_LABELS, FAIL, GRID_COLUMNS, LOW_SSIM_BASELINE, METHOD_NAMES, PASS, RANDOMIZATION, REPEATABILITY_BASE,
    REPEATABILITY_LOW, REPORT_SCHEMA, REPRODUCIBILITY_BASE, REPRODUCIBILITY_LOW, UTILITY_AVG, UTILITY_BASE,
)
from .formats import write_csv  # noqa: E402

logger = logging.getLogger(__name__)

RANDOM_AUC_RANGE = (0.45, 0.55)
SVG_HASH_SALT = 'trust-report'


def _verdict(flag):
    return PASS if flag else FAIL


def _floats(values):
    return [float(v) for v in np.asarray(values, dtype=np.float64)]


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    return {'mean': float(values.mean()), 'std': float(values.std())}


def design_decisions(saliency_cfg, ssim_cfg, harness_cfg):
    """
    Every choice the numbers depend on, echoed at the top of each report.
    """
    return {
        'differentiated_score': 'pre-sigmoid logit',
        'maps': 'raw signed values, no absolute value',
        'ig': {'steps': saliency_cfg.ig_steps, 'baseline': 'all-zeros image', 'integrator': 'right Riemann sum'},
        'smoothgrad': {'samples': saliency_cfg.sg_samples, 'noise_sigma': saliency_cfg.sg_noise_sigma,
                       'noise_scale': 'fraction of the input range', 'seed': saliency_cfg.seed,
                       'noise_stream': 'per image, keyed by image id'},
        'gradcam': {'layer': saliency_cfg.gradcam_layer or 'last conv2d layer', 'upsampling': 'bilinear'},
        'xrai': {'segments': saliency_cfg.xrai_segment_count,
                 'simplification': 'single-scale felzenszwalb merging, min region size pixels / segments, '
                                   'one IG attribution, regions ranked by mean attribution'},
        'auprc': {'integration': 'step (average precision)', 'threshold_cap': 512},
        'ssim': {'window': 'gaussian', 'window_size': ssim_cfg.window_size, 'sigma': ssim_cfg.sigma,
                 'k1': ssim_cfg.k1, 'k2': ssim_cfg.k2, 'dynamic_range': ssim_cfg.dynamic_range,
                 'preprocessing': 'per-map min-max normalization, constant maps become 0.5'},
        'comparison': {'rule': 'paired bootstrap, 95% percentile CI of the mean difference strictly above 0',
                       'resamples': harness_cfg.bootstrap_resamples, 'seed': harness_cfg.bootstrap_seed},
        'randomization': {'order': 'top (logits) to bottom, cumulative',
                          'init': f'truncated normal, stddev {harness_cfg.randomization_stddev}, cut at 2 stddev',
                          'seed': harness_cfg.randomization_seed,
                          'sample_size': harness_cfg.randomization_sample,
                          'sample': 'test images, positives first, topped up with negatives',
                          'sample_seed': harness_cfg.sample_seed,
                          'threshold_pairs': harness_cfg.threshold_pairs,
                          'threshold_seed': harness_cfg.threshold_seed},
        'low_ssim_baseline': LOW_SSIM_BASELINE,
        'agreement_images': 'positive test images',
    }


@dataclass(frozen=True)
class TrustReport:
    config_hash: str
    design: dict
    flavor: str
    methods: tuple
    models: tuple
    sanity: dict
    utility: dict
    randomization: dict
    repeatability: dict
    reproducibility: dict
    grid: dict

    @property
    def base_label(self):
        return BASE_LABELS[self.flavor]

    def to_dict(self):
        return {
            'schema': REPORT_SCHEMA,
            'config_hash': self.config_hash,
            'design': self.design,
            'flavor': self.flavor,
            'base_label': self.base_label,
            'methods': list(self.methods),
            'models': list(self.models),
            'sanity': self.sanity,
            'utility': self.utility,
            'randomization': self.randomization,
            'repeatability': self.repeatability,
            'reproducibility': self.reproducibility,
            'grid': self.grid,
        }


def _utility_section(methods, utility):
    first = utility[methods[0]]
    return {
        'image_ids': list(first.image_ids),
        'avg_mask': {**_summary(first.avg_auprc), 'auprc': _floats(first.avg_auprc)},
        'segmenter': {**_summary(first.base_auprc), 'auprc': _floats(first.base_auprc)},
        'methods': {
            method: {
                **_summary(utility[method].auprc),
                'auprc': _floats(utility[method].auprc),
                'versus_avg': utility[method].versus_avg.to_dict(),
                'versus_base': utility[method].versus_base.to_dict(),
            }
            for method in methods
        },
    }


def _randomization_section(methods, randomization):
    traces = randomization.traces
    return {
        'image_ids': list(randomization.image_ids),
        'pairs': [list(pair) for pair in randomization.pairs],
        'blocks': [step.block for step in traces[methods[0]].steps],
        'auc_by_depth': [{'block': block, 'auc': float(auc)} for block, auc in randomization.randomized_auc],
        'methods': {
            method: {
                'threshold': traces[method].threshold,
                'final_ssim': traces[method].final_ssim,
                'steps': [{'block': s.block, 'mean': s.mean, 'std': s.std} for s in traces[method].steps],
            }
            for method in methods
        },
    }


def _agreement_section(methods, results, baseline):
    return {
        'image_ids': list(results[methods[0]].image_ids),
        'low': LOW_SSIM_BASELINE,
        'baseline': {**_summary(baseline), 'ssim': _floats(baseline)},
        'methods': {
            method: {
                'mean': results[method].mean,
                'std': results[method].std,
                'ssim': _floats(results[method].ssim),
                'versus_base': results[method].versus_base.to_dict(),
            }
            for method in methods
        },
    }


def recompute_grid(data):
    """
    The PASS/FAIL grid as a pure function of the stored statistics of a report dict.
    """
    grid = {}
    for method in data['methods']:
        utility = data['utility']['methods'][method]
        trace = data['randomization']['methods'][method]
        repeat = data['repeatability']['methods'][method]
        repro = data['reproducibility']['methods'][method]
        grid[method] = {
            UTILITY_AVG: _verdict(utility['versus_avg']['ci_low'] > 0),
            UTILITY_BASE: _verdict(utility['versus_base']['ci_low'] > 0),
            RANDOMIZATION: _verdict(trace['final_ssim'] < trace['threshold']),
            REPEATABILITY_LOW: _verdict(repeat['mean'] > data['repeatability']['low']),
            REPEATABILITY_BASE: _verdict(repeat['versus_base']['ci_low'] > 0),
            REPRODUCIBILITY_LOW: _verdict(repro['mean'] > data['reproducibility']['low']),
            REPRODUCIBILITY_BASE: _verdict(repro['versus_base']['ci_low'] > 0),
        }
    return grid


def verify_report(data):
    if data.get('schema') != REPORT_SCHEMA:
        raise ValidationError(f'Unsupported report schema "{data.get("schema")}", expected {REPORT_SCHEMA}.')
    recomputed = recompute_grid(data)
    for method, row in recomputed.items():
        for column, verdict in row.items():
            stored = data['grid'].get(method, {}).get(column)
            if stored != verdict:
                raise ValidationError(
                    f'Stored verdict {stored} for {method} / {column} disagrees with the statistics ({verdict}).'
                )
    return recomputed


def _sanity(randomization):
    if not randomization.randomized_auc:
        return {'randomized_auc': None, 'range': list(RANDOM_AUC_RANGE), 'passed': None}
    auc = float(randomization.randomized_auc[-1][1])
    passed = RANDOM_AUC_RANGE[0] <= auc <= RANDOM_AUC_RANGE[1]
    if not passed:
        logger.warning('Fully randomized model AUC %.3f lies outside [%.2f, %.2f]; treat the traces with care',
                       auc, *RANDOM_AUC_RANGE)
    return {'randomized_auc': auc, 'range': list(RANDOM_AUC_RANGE), 'passed': passed}


def build_report(methods, utility, randomization, repeatability, reproducibility, segmenter_agreement, *, flavor,
                 config_hash, design, models=()):
    """
    Assembles the report; every method needs the results of all four tests.
    """
    methods = tuple(methods)
    if not methods:
        raise ValidationError('A report needs at least one method.')
    tests = {
        'utility': utility,
        'randomization': randomization.traces if randomization is not None else {},
        'repeatability': repeatability,
        'reproducibility': reproducibility,
    }
    for name, results in tests.items():
        missing = [method for method in methods if method not in (results or {})]
        if missing:
            raise ValidationError(f'The {name} test has no results for {", ".join(missing)}.')

    sections = {
        'utility': _utility_section(methods, utility),
        'randomization': _randomization_section(methods, randomization),
        'repeatability': _agreement_section(methods, repeatability, segmenter_agreement),
        'reproducibility': _agreement_section(methods, reproducibility, segmenter_agreement),
    }
    grid = recompute_grid({'methods': methods, **sections})
    report = TrustReport(
        config_hash=config_hash,
        design=design,
        flavor=flavor,
        methods=methods,
        models=tuple(models),
        sanity=_sanity(randomization),
        grid=grid,
        **sections,
    )
    logger.info('Built report for %d methods', len(methods))
    return report


def render_json(report):
    data = report.to_dict() if isinstance(report, TrustReport) else report
    return JSONRenderer().render(data, renderer_context={'indent': 2}) + b'\n'


def _grid_lines(data):
    width = max(len(method) for method in data['methods']) + 2
    header = 'Method'.ljust(width) + '  '.join(column.ljust(len(column)) for column in GRID_COLUMNS)
    lines = [header, '-' * len(header)]
    for method in data['methods']:
        row = data['grid'][method]
        lines.append(method.ljust(width) + '  '.join(row[column].ljust(len(column)) for column in GRID_COLUMNS))
    return lines


def render_text(report):
    data = report.to_dict() if isinstance(report, TrustReport) else report
    lines = [
        f'Trust report ({data["schema"]})',
        f'config hash: {data["config_hash"]}',
        f'flavor: {data["flavor"]}; BASE = {data["base_label"]}',
        '',
        'Design decisions:',
    ]
    for key, value in data['design'].items():
        if isinstance(value, dict):
            value = ', '.join(f'{k}={v}' for k, v in value.items())
        lines.append(f'  {key}: {value}')

    lines += ['', 'Verdicts:'] + _grid_lines(data)

    utility = data['utility']
    lines += ['', f'Utility (AUPRC over {len(utility["image_ids"])} positive test images):']
    lines.append(f'  {"AVG":<8}{utility["avg_mask"]["mean"]:.3f} +- {utility["avg_mask"]["std"]:.3f}')
    lines.append(f'  {"BASE":<8}{utility["segmenter"]["mean"]:.3f} +- {utility["segmenter"]["std"]:.3f}')
    for method in data['methods']:
        stats = utility['methods'][method]
        lines.append(f'  {method:<8}{stats["mean"]:.3f} +- {stats["std"]:.3f}  ({METHOD_NAMES[method]})')

    randomization = data['randomization']
    lines += ['', f'Cascading randomization ({len(randomization["image_ids"])} images, '
                  f'{len(randomization["pairs"])} threshold pairs):']
    for method in data['methods']:
        trace = randomization['methods'][method]
        lines.append(f'  {method:<8}fully randomized SSIM {trace["final_ssim"]:.3f}, threshold {trace["threshold"]:.3f}')
    sanity = data['sanity']
    if sanity['randomized_auc'] is not None:
        lines.append(f'  fully randomized model AUC {sanity["randomized_auc"]:.3f} '
                     f'({"within" if sanity["passed"] else "outside"} {sanity["range"]})')

    for kind in ('repeatability', 'reproducibility'):
        section = data[kind]
        lines += ['', f'{kind.capitalize()} (SSIM; BASE {section["baseline"]["mean"]:.3f} '
                      f'+- {section["baseline"]["std"]:.3f}):']
        for method in data['methods']:
            stats = section['methods'][method]
            lines.append(f'  {method:<8}{stats["mean"]:.3f} +- {stats["std"]:.3f}')

    if data['models']:
        lines += ['', 'Classification (test ROC-AUC):']
        for model in data['models']:
            lines.append(f'  {model["name"]:<14}{model["test_auc"]:.3f}')
    return '\n'.join(lines) + '\n'


def _svg_text(fig):
    buffer = io.StringIO()
    fig.savefig(buffer, format='svg', metadata={'Date': None})
    plt.close(fig)
    return buffer.getvalue()


def trace_svg(method, trace):
    """
    Mean SSIM against randomization depth with the degradation threshold.
    """
    steps = trace['steps']
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = np.arange(len(steps))
        means = np.array([step['mean'] for step in steps])
        stds = np.array([step['std'] for step in steps])
        ax.plot(x, means, marker='o', label=method)
        ax.fill_between(x, means - stds, means + stds, alpha=0.2)
        ax.axhline(trace['threshold'], linestyle='--', color='grey', label='degradation threshold')
        ax.set_xticks(x)
        ax.set_xticklabels([step['block'] for step in steps], rotation=30, ha='right')
        ax.set_ylabel('SSIM vs. original')
        ax.set_ylim(-0.1, 1.05)
        ax.legend(loc='lower left')
        fig.tight_layout()
        return _svg_text(fig)


def _boxplot_svg(columns, ylabel, reference=None, ylim=(-0.05, 1.05)):
    labels = [label for label, _ in columns]
    with matplotlib.rc_context({'svg.hashsalt': SVG_HASH_SALT, 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(1 + 0.7 * len(columns), 3.5))
        ax.boxplot([values for _, values in columns], showmeans=True)
        ax.set_xticks(np.arange(1, len(labels) + 1))
        ax.set_xticklabels(labels, rotation=30, ha='right')
        if reference is not None:
            ax.axhline(reference, linestyle='--', color='grey')
        ax.set_ylabel(ylabel)
        ax.set_ylim(*ylim)
        fig.tight_layout()
        return _svg_text(fig)


def utility_svg(data):
    """
    Per-image AUPRC of every method next to the average mask and the segmenter.
    """
    utility = data['utility']
    columns = [(method, utility['methods'][method]['auprc']) for method in data['methods']]
    columns += [('AVG', utility['avg_mask']['auprc']), ('BASE', utility['segmenter']['auprc'])]
    return _boxplot_svg(columns, 'AUPRC')


def agreement_svg(data, kind):
    """
    Per-image SSIM of a repeatability or reproducibility section, with the low baseline.
    """
    section = data[kind]
    columns = [(method, section['methods'][method]['ssim']) for method in data['methods']]
    columns.append(('BASE', section['baseline']['ssim']))
    return _boxplot_svg(columns, f'{kind} SSIM', reference=LOW_SSIM_BASELINE, ylim=(-1.05, 1.05))


def write_report(report, directory):
    """
    report.json, report.txt, per-image CSV tables with their box plots and one CSV + SVG trace per method.
    """
    directory = Path(directory)
    (directory / 'traces').mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    (directory / 'report.json').write_bytes(render_json(data))
    (directory / 'report.txt').write_text(render_text(data))

    utility = data['utility']
    rows = []
    for method in data['methods']:
        stats = utility['methods'][method]
        rows += [
            (method, image_id, score, avg, base)
            for image_id, score, avg, base in zip(
                utility['image_ids'], stats['auprc'], utility['avg_mask']['auprc'], utility['segmenter']['auprc']
            )
        ]
    write_csv(directory / 'utility.csv', ('method', 'image_id', 'auprc', 'avg_auprc', 'base_auprc'), rows)
    (directory / 'utility.svg').write_text(utility_svg(data))

    for kind in ('repeatability', 'reproducibility'):
        section = data[kind]
        rows = []
        for method in data['methods']:
            rows += [
                (method, image_id, value, base)
                for image_id, value, base in zip(
                    section['image_ids'], section['methods'][method]['ssim'], section['baseline']['ssim']
                )
            ]
        write_csv(directory / f'{kind}.csv', ('method', 'image_id', 'ssim', 'base_ssim'), rows)
        (directory / f'{kind}.svg').write_text(agreement_svg(data, kind))

    for method in data['methods']:
        trace = data['randomization']['methods'][method]
        write_csv(
            directory / 'traces' / f'{method}.csv',
            ('block', 'mean_ssim', 'std_ssim', 'threshold'),
            [(step['block'], step['mean'], step['std'], trace['threshold']) for step in trace['steps']],
        )
        (directory / 'traces' / f'{method}.svg').write_text(trace_svg(method, trace))
    logger.info('Wrote report artifacts to %s', directory)
