"""
Kernel Recovery Benchmark
Fits CDRNNs to synthetic data with known kernels and scores the estimated
impulse responses against the ground truth
"""

import argparse
import itertools
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from evaluation.effects import curve_query, irf_curve, irf_surface, reference_config, uncertainty_band
from evaluation.ensemble import ensemble_fit
from evaluation.significance import LikelihoodMatrix, permutation_test
from models.spec import ModelSpec, mu_only
from models.trainer import CDRNNTrainer
from utils.data_loader import assemble_inputs, fit_standardization, split_data
from utils.logging_config import setup_logging
from utils.synth import SynthConfig, generate, kernel_eval


logger = logging.getLogger(__name__)

FAMILY_KERNELS = {
    'exponential': {'family': 'exponential', 'rate': 1.0},
    'normal': {'family': 'normal', 'mean': 1.0, 'sd': 0.5},
    'shifted_gamma': {'family': 'shifted_gamma', 'shape': 2.0, 'rate': 2.0, 'shift': -0.5},
}

# normalized RMSE limits per family
TOLERANCES = {'exponential': 0.15, 'normal': 0.20, 'shifted_gamma': 0.20}

TASK = {
    'n_predictors': 3,
    'correlation': 0.0,
    'noise_sd': 0.1,
    'n_events': 10000,
    'timing': 'random',
    'interval': 0.2,
}


def synth_task(family: str = 'exponential', noise_sd: float = 0.1, seed: int = 0,
               n_events: Optional[int] = None) -> SynthConfig:
    """The recovery task with every predictor drawn from one kernel family"""
    payload = {**TASK, 'noise_sd': noise_sd, 'seed': seed}
    if n_events is not None:
        payload['n_events'] = n_events
    payload['kernels'] = {f'x{k + 1}': dict(FAMILY_KERNELS[family]) for k in range(payload['n_predictors'])}
    return SynthConfig.from_dict(payload)


def fit_task(synth: SynthConfig, seed: int = 0, history_length: int = 32,
             hyperparameters: Optional[Dict[str, Any]] = None, loss_hook=None) -> Dict[str, Any]:
    """
    Fit a base-spec model on the training half of one synthetic dataset

    Returns:
        The fitted model, estimated and true curves per predictor, normalized RMSE
        and fit metadata
    """
    dataset = generate(synth)
    partition = split_data(len(dataset.responses), (0.5, 0.25, 0.25), 0)
    train_responses = dataset.responses.subset(partition['train'])
    spec = ModelSpec.base(synth.predictor_names, history_length=history_length,
                          hyperparameters=dict(hyperparameters or {}))
    record = fit_standardization(dataset.events, train_responses)
    trainer = CDRNNTrainer(spec, record, seed=seed)
    result = trainer.train(assemble_inputs(dataset.events, train_responses, spec, record), loss_hook=loss_hook)

    predictors = {}
    for name in synth.predictor_names:
        curve = irf_curve(result.model, name, step=1.0)
        truth = kernel_eval(synth.kernels[name], curve.axes['delay'])
        rmse = float(np.sqrt(np.mean((curve.median - truth) ** 2)))
        predictors[name] = {
            'estimate': curve.median,
            'truth': truth,
            'nrmse': rmse / float(np.max(np.abs(truth))),
        }
        logger.info("%s (%s, noise %.2g): normalized RMSE %.3f", name, synth.kernels[name].family,
                    synth.noise_sd, predictors[name]['nrmse'])

    return {
        'model': result.model,
        'predictors': predictors,
        'epochs': result.epochs,
        'converged': result.converged,
        'restores': result.log.n_restores,
    }


def _summary(fitted: Dict[str, Any]) -> Dict[str, Any]:
    return {
        'nrmse': {name: p['nrmse'] for name, p in fitted['predictors'].items()},
        'epochs': fitted['epochs'],
        'converged': fitted['converged'],
        'restores': fitted['restores'],
    }


def check_recovery(families: List[str], n_events: Optional[int] = None,
                   hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    report = {}
    for family in families:
        fitted = fit_task(synth_task(family, n_events=n_events), hyperparameters=hyperparameters)
        summary = _summary(fitted)
        summary['passed'] = all(v < TOLERANCES[family] for v in summary['nrmse'].values())
        report[family] = summary
    return report


def check_noise_ordering(levels=(0.0, 0.1, 1.0), n_events: Optional[int] = None,
                         hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Mean normalized RMSE should not decrease as the noise SD grows"""
    errors = []
    for noise_sd in levels:
        fitted = fit_task(synth_task(noise_sd=noise_sd, n_events=n_events), hyperparameters=hyperparameters)
        errors.append(float(np.mean([p['nrmse'] for p in fitted['predictors'].values()])))
    return {
        'noise_sd': list(levels),
        'mean_nrmse': errors,
        'passed': bool(np.all(np.diff(errors) >= 0)),
    }


def check_replicates(n_fits: int = 5, n_events: Optional[int] = None,
                     hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Same data and spec, different seeds: pairwise curve deviation relative to the peak truth"""
    synth = synth_task(n_events=n_events)
    fits = [fit_task(synth, seed=seed, hyperparameters=hyperparameters) for seed in range(n_fits)]
    deviation = 0.0
    for a, b in itertools.combinations(fits, 2):
        for name, pa in a['predictors'].items():
            gap = np.max(np.abs(pa['estimate'] - b['predictors'][name]['estimate']))
            deviation = max(deviation, float(gap / np.max(np.abs(pa['truth']))))
    return {'fits': n_fits, 'max_relative_deviation': deviation, 'passed': deviation < 0.1}


def check_band_coverage(n_events: Optional[int] = None, n_samples: int = 100,
                        hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Share of true kernel values on the delay grid that fall inside the fitted 95% band"""
    synth = synth_task(n_events=n_events)
    model = fit_task(synth, hyperparameters=hyperparameters)['model']
    ref = reference_config(model.record)
    coverage = {}
    for name in synth.predictor_names:
        band = uncertainty_band([model], curve_query(model.record, name, ref, step=1.0), n_samples=n_samples,
                                rng=np.random.default_rng(0))
        truth = kernel_eval(synth.kernels[name], band.axes['delay'])
        coverage[name] = float(np.mean((truth >= band.lower) & (truth <= band.upper)))
        logger.info("%s: %.0f%% of the true kernel inside the band", name, 100 * coverage[name])
    return {'coverage': coverage, 'passed': all(c >= 0.8 for c in coverage.values())}


def check_u_shape(n_events: Optional[int] = None, values=(-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5),
                  hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """x1 enters the response squared: the fitted surface at the kernel's peak delay should be convex in x1"""
    payload = {**TASK, 'n_predictors': 2, 'kernels': {
        'x1': {**FAMILY_KERNELS['exponential'], 'transform': 'quadratic'},
        'x2': dict(FAMILY_KERNELS['exponential']),
    }}
    if n_events is not None:
        payload['n_events'] = n_events
    synth = SynthConfig.from_dict(payload)
    model = fit_task(synth, hyperparameters=hyperparameters)['model']
    surface = irf_surface(model, 'x1', values)
    peak = int(np.argmax(kernel_eval(synth.kernels['x1'], surface.axes['delay'])))
    second = np.diff(surface.median[:, peak], n=2)
    return {
        'peak_delay': float(surface.axes['delay'][peak]),
        'second_differences': second.tolist(),
        'passed': bool(np.all(second > 0)),
    }


def _ensemble_likelihoods(spec: ModelSpec, synth: SynthConfig, E: int, root_seed: int) -> LikelihoodMatrix:
    dataset = generate(synth)
    partition = split_data(len(dataset.responses), (0.5, 0.25, 0.25), 0)
    train_responses = dataset.responses.subset(partition['train'])
    record = fit_standardization(dataset.events, train_responses)
    train = assemble_inputs(dataset.events, train_responses, spec, record)
    ensemble = ensemble_fit(spec, train, E, root_seed, record=record)
    test = assemble_inputs(dataset.events, dataset.responses.subset(partition['test']), spec, record)
    test.item_index = partition['test'].copy()
    return LikelihoodMatrix.from_models(ensemble.components, test)


def check_heteroscedasticity(E: int = 3, B: int = 10000, n_events: int = 4000,
                             hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Noise SD driven by x1: the full model should beat a mu-only null"""
    synth = SynthConfig.from_dict({**TASK, 'n_predictors': 2, 'n_events': n_events, 'noise_sd': 0.5,
                                   'noise_modulation': {'predictor': 'x1', 'strength': 1.0}})
    full = ModelSpec.base(synth.predictor_names, history_length=32, hyperparameters=dict(hyperparameters or {}))
    L_null = _ensemble_likelihoods(mu_only(full), synth, E, 0)
    L_full = _ensemble_likelihoods(full, synth, E, 0)
    result = permutation_test(L_null, L_full, B, np.random.default_rng(0))
    # component j of one ensemble is paired with component j of the other
    improvements = L_full.values.sum(axis=0) - L_null.values.sum(axis=0)
    stability = {
        'improvements': improvements.tolist(),
        'mean_improvement': float(np.mean(improvements)),
        'sd_improvement': float(np.std(improvements, ddof=1)) if E > 1 else 0.0,
    }
    stability['stable'] = bool(stability['mean_improvement'] > 0
                               and stability['sd_improvement'] < 0.1 * stability['mean_improvement'])
    return {
        'totals': result.totals,
        'p_value': result.p_value,
        'stability': stability,
        'passed': bool(L_full.total > L_null.total and result.p_value < 0.05),
    }


def check_ensemble_stability(E: int = 10, B: int = 10000, n_events: int = 4000,
                             hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Spread of the per-component improvement over the null against its mean, at full ensemble size"""
    report = check_heteroscedasticity(E, B, n_events, hyperparameters)
    return {**report['stability'], 'passed': report['stability']['stable']}


def check_null_calibration(repetitions: int = 20, E: int = 3, B: int = 10000, n_events: int = 2000,
                           hyperparameters: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Same spec, different root seeds: small p-values should be rare"""
    synth = synth_task(n_events=n_events)
    spec = ModelSpec.base(synth.predictor_names, history_length=32, hyperparameters=dict(hyperparameters or {}))
    p_values = []
    for r in range(repetitions):
        L0 = _ensemble_likelihoods(spec, synth, E, 2 * r)
        L1 = _ensemble_likelihoods(spec, synth, E, 2 * r + 1)
        p_values.append(permutation_test(L0, L1, B, np.random.default_rng(r)).p_value)
    rate = float(np.mean(np.array(p_values) < 0.05))
    return {'p_values': p_values, 'rejection_rate': rate, 'passed': rate <= 0.15}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description='Kernel recovery benchmark on synthetic data')
    parser.add_argument('--check', default='recovery', choices=[
        'recovery', 'families', 'noise', 'replicates', 'bands', 'u_shape', 'heteroscedasticity', 'stability',
        'calibration', 'all'])
    parser.add_argument('--events', type=int, default=None, help='Override the number of events')
    parser.add_argument('--epochs', type=int, default=None, help='Override the epoch cap')
    parser.add_argument('--out', default=None, help='Write the report as JSON')
    args = parser.parse_args(argv)

    setup_logging()
    hyperparameters = {'max_epochs': args.epochs} if args.epochs else None
    report: Dict[str, Any] = {}
    if args.check in ('recovery', 'all'):
        report['recovery'] = check_recovery(['exponential'], args.events, hyperparameters)
    if args.check in ('families', 'all'):
        report['families'] = check_recovery(['normal', 'shifted_gamma'], args.events, hyperparameters)
    if args.check in ('noise', 'all'):
        report['noise'] = check_noise_ordering(n_events=args.events, hyperparameters=hyperparameters)
    if args.check in ('replicates', 'all'):
        report['replicates'] = check_replicates(n_events=args.events, hyperparameters=hyperparameters)
    if args.check in ('bands', 'all'):
        report['bands'] = check_band_coverage(args.events, hyperparameters=hyperparameters)
    if args.check in ('u_shape', 'all'):
        report['u_shape'] = check_u_shape(args.events, hyperparameters=hyperparameters)
    if args.check in ('heteroscedasticity', 'all'):
        report['heteroscedasticity'] = check_heteroscedasticity(hyperparameters=hyperparameters)
    if args.check in ('stability', 'all'):
        report['stability'] = check_ensemble_stability(hyperparameters=hyperparameters)
    if args.check in ('calibration', 'all'):
        report['calibration'] = check_null_calibration(hyperparameters=hyperparameters)

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as f:
            f.write(text)
    print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
