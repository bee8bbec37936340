"""
Ensemble Fitting
Independent fits of one spec under derived seeds, with a manifest describing
every component
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import jsonschema
import numpy as np

from config import VERSION, config
from models.cdrnn import CDRNNModel
from models.spec import ModelSpec, ensure_valid
from models.trainer import CDRNNTrainer, FitResult
from utils.data_loader import AssembledBatch, StandardizationRecord
from utils.errors import CDRNNError, DataError, EnsembleError


logger = logging.getLogger(__name__)

MANIFEST_FILE = 'ensemble.json'

MANIFEST_SCHEMA = {
    'type': 'object',
    'required': ['code_version', 'spec_hash', 'root_seed', 'components', 'manifest_hash'],
    'properties': {
        'code_version': {'type': 'string'},
        'spec_hash': {'type': 'string'},
        'root_seed': {'type': 'integer'},
        'manifest_hash': {'type': 'string'},
        'components': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['index', 'seed', 'checkpoint'],
                'properties': {
                    'index': {'type': 'integer'},
                    'seed': {'type': 'integer'},
                    'checkpoint': {'type': 'string'},
                    'log': {'type': 'string'},
                    'final_loss': {'type': ['number', 'null']},
                    'converged': {'type': 'boolean'},
                    'epochs': {'type': 'integer'},
                    'attempts': {'type': 'integer'},
                },
            },
        },
    },
}


def derive_seeds(root_seed: int, n: int) -> List[int]:
    """Independent component seeds spawned from one root seed"""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(root_seed).spawn(n)]


def _retry_seed(root_seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([root_seed, index, attempt]).generate_state(1)[0])


def spec_hash(spec: ModelSpec) -> str:
    return hashlib.sha256(json.dumps(spec.model_dump(mode='json'), sort_keys=True).encode('utf-8')).hexdigest()


@dataclass
class Ensemble:
    components: List[CDRNNModel]
    manifest: Dict[str, Any]
    results: Optional[List[FitResult]] = None

    def __len__(self) -> int:
        return len(self.components)

    def save(self, out_dir: str) -> str:
        """Checkpoints, training logs and the manifest under out_dir"""
        os.makedirs(out_dir, exist_ok=True)
        for entry, model in zip(self.manifest['components'], self.components):
            model.save(os.path.join(out_dir, entry['checkpoint']))
            if self.results is not None:
                self.results[entry['index']].log.save(os.path.join(out_dir, entry['log']))
        path = os.path.join(out_dir, MANIFEST_FILE)
        tmp = path + '.tmp'
        with open(tmp, 'w', encoding='utf-8') as f:
            json.dump(self.manifest, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        logger.info("Saved %d-component ensemble to %s", len(self), out_dir)
        return path


def load_ensemble(out_dir: str) -> Ensemble:
    path = os.path.join(out_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise DataError("Ensemble manifest not found", file=path)
    with open(path, encoding='utf-8') as f:
        try:
            manifest = json.load(f)
            jsonschema.validate(manifest, MANIFEST_SCHEMA)
        except (ValueError, jsonschema.ValidationError) as e:
            raise DataError(f"Invalid ensemble manifest: {e}", file=path)
    components = [CDRNNModel.load(os.path.join(out_dir, entry['checkpoint'])) for entry in manifest['components']]
    return Ensemble(components=components, manifest=manifest)


def _fit_component(spec: ModelSpec, train: AssembledBatch, record: StandardizationRecord,
                   levels: Dict[str, List[str]], exploratory: Optional[AssembledBatch], root_seed: int,
                   index: int, seed: int, retries: int) -> Tuple[Optional[FitResult], int, Optional[str], int]:
    error = None
    for attempt in range(retries + 1):
        attempt_seed = seed if attempt == 0 else _retry_seed(root_seed, index, attempt)
        try:
            result = CDRNNTrainer(spec, record, levels, attempt_seed).train(train, exploratory=exploratory)
            return result, attempt + 1, None, attempt_seed
        except CDRNNError as e:
            error = str(e)
            logger.warning("Component %d attempt %d failed: %s", index, attempt + 1, error)
    return None, retries + 1, error, seed


def ensemble_fit(spec: ModelSpec, train: AssembledBatch, E: int = config.ENSEMBLE_SIZE, root_seed: int = 0,
                 record: Optional[StandardizationRecord] = None, levels: Optional[Dict[str, List[str]]] = None,
                 exploratory: Optional[AssembledBatch] = None, n_jobs: int = 1, retries: int = 1) -> Ensemble:
    """
    Fit E components that differ only in their derived seeds

    Args:
        spec: Validated model spec
        train: Training windows
        E: Ensemble size
        root_seed: Seed the component seeds are spawned from
        n_jobs: Worker threads; results do not depend on it
        retries: Refits (with fresh seeds) allowed per failing component

    Returns:
        Ensemble with components ordered by index and a manifest
    """
    spec = ensure_valid(spec)
    if E < 1:
        raise EnsembleError(f"Ensemble size must be positive, got {E}")
    record = record or train.record
    levels = levels or {}
    seeds = derive_seeds(root_seed, E)
    logger.info("Fitting %d-component ensemble (root seed %d, %d workers)", E, root_seed, n_jobs)

    args = [(spec, train, record, levels, exploratory, root_seed, i, seeds[i], retries) for i in range(E)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            outcomes = list(pool.map(lambda a: _fit_component(*a), args))
    else:
        outcomes = [_fit_component(*a) for a in args]

    failures = [{'index': i, 'seed': seeds[i], 'error': err} for i, (res, _, err, _) in enumerate(outcomes)
                if res is None]
    if failures:
        raise EnsembleError(f"{len(failures)} of {E} components failed", failures=failures)

    entries = []
    for i, (result, attempts, _, used_seed) in enumerate(outcomes):
        epochs = result.log.of_type('epoch')
        entries.append({
            'index': i,
            'seed': used_seed,
            'checkpoint': f'component_{i}.npz',
            'log': f'component_{i}.log.jsonl',
            'final_loss': epochs[-1]['loss'] if epochs else None,
            'converged': result.converged,
            'epochs': result.epochs,
            'attempts': attempts,
        })
    manifest = {
        'code_version': VERSION,
        'spec_hash': spec_hash(spec),
        'root_seed': int(root_seed),
        'components': entries,
    }
    manifest['manifest_hash'] = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode('utf-8')).hexdigest()
    return Ensemble(components=[r.model for r, _, _, _ in outcomes], manifest=manifest,
                    results=[r for r, _, _, _ in outcomes])
