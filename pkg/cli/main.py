"""
CDRNN Command Line
Subcommands: synth, fit, eval, irf, test, ensemble-fit
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pandas as pd

from cli.run_config import PreparedData, RunConfig, RunManifest, prepare_data
from config import VERSION, config
from evaluation.effects import (
    EffectQuery, curve_query, delay_grid, interaction_query, nonstationarity_query, reference_config,
    save_result, surface_query, uncertainty_band,
)
from evaluation.ensemble import ensemble_fit, load_ensemble
from evaluation.significance import LikelihoodMatrix, build_report, eval_loglik, permutation_test
from models.cdrnn import CDRNNModel
from models.trainer import CDRNNTrainer
from utils.errors import CDRNNError, ConfigurationError
from utils.logging_config import setup_logging
from utils.synth import SynthConfig, generate, write_dataset


logger = logging.getLogger(__name__)


def _print(payload: Dict):
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_synth(run: RunConfig, args) -> int:
    synth = SynthConfig.from_dict(run.synth_dict())
    dataset = generate(synth)
    paths = write_dataset(dataset, run.resolve(run.data.events), run.resolve(run.data.responses))
    manifest = RunManifest(command='synth', config_hash=run.source_hash, seeds={'synth': synth.seed},
                           artifacts=paths)
    manifest.write(os.path.dirname(os.path.abspath(paths['events'])))
    _print({'events': len(dataset.events), 'responses': len(dataset.responses), **paths})
    return 0


def cmd_fit(run: RunConfig, args) -> int:
    data = prepare_data(run)
    seed = run.model.seed if args.seed is None else args.seed
    hp = data.spec.hyperparameters
    exploratory = data.batch('exploratory') if hp.convergence_metric == 'exploratory' else None
    trainer = CDRNNTrainer(data.spec, data.record, data.levels, seed=seed)
    result = trainer.train(data.batch('train'), exploratory=exploratory)

    out_dir = run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    checkpoint = trainer.save_model(os.path.join(out_dir, 'model.npz'))
    summary = {'converged': result.converged, 'epochs': result.epochs, 'restores': result.log.n_restores}
    if len(data.partition['exploratory']):
        summary['exploratory'] = trainer.evaluate(data.batch('exploratory'))
    manifest = RunManifest(command='fit', config_hash=run.source_hash,
                           seeds={'model': seed, 'split': run.split.seed},
                           artifacts={'checkpoint': checkpoint, 'log': os.path.join(out_dir, 'model.log.jsonl')})
    manifest.write(out_dir)
    _print(summary)
    return 0


def cmd_eval(run: RunConfig, args) -> int:
    model = CDRNNModel.load(args.model)
    data = prepare_data(run, spec=model.spec, record=model.record, levels=model.levels)
    batch = data.batch(args.partition)
    loglik = eval_loglik(model, batch)

    out_dir = run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, f'loglik_{args.partition}.csv')
    pd.DataFrame({'item': batch.item_index, 'loglik': loglik}).to_csv(table_path, index=False,
                                                                      float_format='%.17g')
    params = model.predict(batch)
    y = batch.record.destandardize_y(batch.y)
    summary = {
        'partition': args.partition,
        'n_items': int(len(loglik)),
        'total_loglik': float(loglik.sum()),
        'mean_loglik': float(loglik.mean()) if len(loglik) else None,
        'mse': float(np.mean((y - params.mu) ** 2)) if len(loglik) else None,
    }
    with open(os.path.join(out_dir, f'eval_{args.partition}.json'), 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    RunManifest(command='eval', config_hash=run.source_hash, seeds={'split': run.split.seed},
                artifacts={'loglik': table_path}).write(out_dir)
    _print(summary)
    return 0


def _queries(run: RunConfig, model: CDRNNModel) -> Dict[str, EffectQuery]:
    q = run.query
    record = model.record
    ref = reference_config(record, delay_grid(q.horizon, q.n_points), q.statistic)
    predictors = q.predictors or list(model.spec.predictor_names)

    def values(name: str) -> np.ndarray:
        k = record.predictor_names.index(name)
        return np.linspace(record.x_min[k], record.x_max[k], q.n_values)

    if q.kind == 'curve':
        return {f'irf_curve_{p}': curve_query(record, p, ref, q.step) for p in predictors}
    if q.kind == 'surface':
        return {f'irf_surface_{p}': surface_query(record, p, values(p), ref) for p in predictors}
    if q.kind == 'interaction':
        if len(predictors) != 2:
            raise ConfigurationError("Interaction queries need exactly two predictors in [query] predictors")
        a, b = predictors
        return {f'interaction_{a}_{b}': interaction_query(record, a, b, values(a), values(b), q.delay, ref)}
    timestamps = np.linspace(record.t_min, record.t_max, q.n_values)
    return {f'nonstationarity_{p}': nonstationarity_query(record, p, q.delay, timestamps, ref, q.step)
            for p in predictors}


def cmd_irf(run: RunConfig, args) -> int:
    if bool(args.model) == bool(args.ensemble):
        raise ConfigurationError("Give exactly one of --model or --ensemble")
    components: List[CDRNNModel] = ([CDRNNModel.load(args.model)] if args.model
                                    else load_ensemble(args.ensemble).components)
    rng = np.random.default_rng(run.query.seed)
    out_dir = run.output_dir
    artifacts = {}
    for name, query in _queries(run, components[0]).items():
        result = uncertainty_band(components, query, run.query.samples, run.query.quantiles, rng)
        for kind, path in save_result(result, out_dir, name, svg=run.query.svg or args.svg).items():
            artifacts[f'{name}.{kind}'] = path
    RunManifest(command='irf', config_hash=run.source_hash, seeds={'query': run.query.seed},
                artifacts=artifacts).write(out_dir)
    _print(artifacts)
    return 0


def _likelihoods(run: RunConfig, ensemble_dir: str):
    ensemble = load_ensemble(ensemble_dir)
    first = ensemble.components[0]
    data: PreparedData = prepare_data(run, spec=first.spec, record=first.record, levels=first.levels)
    batch = data.batch(run.test.partition)
    return LikelihoodMatrix.from_models(ensemble.components, batch), ensemble.manifest


def cmd_test(run: RunConfig, args) -> int:
    L0, manifest_a = _likelihoods(run, args.a)
    L1, manifest_b = _likelihoods(run, args.b)
    result = permutation_test(L0, L1, run.test.iterations, np.random.default_rng(run.test.seed))
    build_report(result, manifest_a, manifest_b)
    out_dir = run.output_dir
    path = result.save(os.path.join(out_dir, 'test_report.json'))
    RunManifest(command='test', config_hash=run.source_hash, seeds={'test': run.test.seed},
                artifacts={'report': path}).write(out_dir)
    _print(result.to_dict())
    return 0


def cmd_ensemble_fit(run: RunConfig, args) -> int:
    data = prepare_data(run)
    size = args.size or run.ensemble.size
    hp = data.spec.hyperparameters
    exploratory = data.batch('exploratory') if hp.convergence_metric == 'exploratory' else None
    ensemble = ensemble_fit(data.spec, data.batch('train'), size, run.ensemble.root_seed, record=data.record,
                            levels=data.levels, exploratory=exploratory, n_jobs=run.ensemble.n_jobs,
                            retries=run.ensemble.retries)
    out_dir = args.out or os.path.join(run.output_dir, 'ensemble')
    path = ensemble.save(out_dir)
    RunManifest(command='ensemble-fit', config_hash=run.source_hash,
                seeds={'root': run.ensemble.root_seed, 'split': run.split.seed},
                artifacts={'manifest': path}).write(out_dir)
    _print({'components': size, 'manifest': path, 'manifest_hash': ensemble.manifest['manifest_hash']})
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'fit': cmd_fit,
    'eval': cmd_eval,
    'irf': cmd_irf,
    'test': cmd_test,
    'ensemble-fit': cmd_ensemble_fit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cdrnn', description='Continuous-time deconvolutional regressive neural networks')
    parser.add_argument('--version', action='version', version=VERSION)
    parser.add_argument('--log-level', default=config.LOG_LEVEL)
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument('config', help='INI run configuration')
        return p

    command('synth', 'Generate a synthetic dataset with known kernels')
    p = command('fit', 'Fit one model')
    p.add_argument('--seed', type=int, default=None)
    p = command('eval', 'Per-item log-likelihoods of a fitted model')
    p.add_argument('--model', required=True)
    p.add_argument('--partition', choices=['train', 'exploratory', 'test'], default='test')
    p = command('irf', 'Export effect-estimate plot data')
    p.add_argument('--model')
    p.add_argument('--ensemble')
    p.add_argument('--svg', action='store_true')
    p = command('test', 'Ensemble paired permutation test of B against A')
    p.add_argument('--a', required=True, help='Null ensemble directory')
    p.add_argument('--b', required=True, help='Alternative ensemble directory')
    p = command('ensemble-fit', 'Fit an ensemble of independently seeded models')
    p.add_argument('--size', type=int, default=None)
    p.add_argument('--out', default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        run = RunConfig.from_ini(args.config)
        return COMMANDS[args.command](run, args)
    except CDRNNError as e:
        print(json.dumps(e.to_dict(), sort_keys=True), file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
