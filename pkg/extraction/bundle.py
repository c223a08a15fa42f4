"""
bundle.py - Model bundle persistence

A bundle is a zip archive holding every trained stage:

    mimetype                 stored uncompressed, first entry
    manifest.json            versions, charset, stage configs, tensor index, checksums, run history
    weights/<model>.bin      raw little-endian tensors, float32 for parameters

Detector and role models are stored either once under the key 'shared' or
once per chart-type label; the pipeline picks the per-type model when one
exists for the predicted chart type.
"""

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .config import BackboneConfig, DetectorConfig, RecognizerConfig, SRConfig
from .core.pipeline import SHARED
from .core.vocab import ChartType
from .errors import BundleError
from .models.backbone import SwinClassifier
from .models.detector import GridDetector
from .models.recognizer import TextRecognizer
from .models.upscaler import RRDBNet

logger = logging.getLogger(__name__)

MIMETYPE = 'application/x-chartx-bundle'
FORMAT_VERSION = 1

# Bumped whenever a stage's architecture or tensor layout changes.
STAGE_VERSIONS = {
    'chart_type': 1,
    'detector': 1,
    'upscaler': 1,
    'recognizer': 1,
    'text_role': 1,
}

_MODEL_TYPES = {
    'chart_type': (SwinClassifier, BackboneConfig),
    'detector': (GridDetector, DetectorConfig),
    'upscaler': (RRDBNet, SRConfig),
    'recognizer': (TextRecognizer, RecognizerConfig),
    'text_role': (SwinClassifier, BackboneConfig),
}


@dataclass
class RunManifest:
    """
    Record of one training run.

    Attributes:
        stage: Trained stage ('chart-type', 'detector', 'sr', 'recognizer', 'text-role')
        seed: Seed of the run
        config: Stage configuration as a dictionary
        schedule: Training schedule as a dictionary
        dataset_fingerprint: fingerprint() of the training set
        samples: Training samples used
        timings: Wall-clock seconds per phase
        final_loss: Last recorded loss
        key: Bundle key the model was stored under ('shared' or a chart type)
    """

    stage: str
    seed: int
    config: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    dataset_fingerprint: str = ''
    samples: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    final_loss: Optional[float] = None
    key: str = SHARED

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunManifest':
        return cls(**data)


@dataclass
class PipelineBundle:
    """
    All trained stages of one pipeline.

    Any stage may be missing while a bundle is being assembled stage by
    stage; extraction requires a complete bundle.
    """

    chart_type: Optional[SwinClassifier] = None
    detectors: Dict[str, GridDetector] = field(default_factory=dict)
    upscaler: Optional[RRDBNet] = None
    recognizer: Optional[TextRecognizer] = None
    text_roles: Dict[str, SwinClassifier] = field(default_factory=dict)
    runs: List[RunManifest] = field(default_factory=list)

    def missing(self) -> List[str]:
        """Names of the stages without a model."""
        present = {
            'chart_type': self.chart_type is not None,
            'detector': bool(self.detectors),
            'upscaler': self.upscaler is not None,
            'recognizer': self.recognizer is not None,
            'text_role': bool(self.text_roles),
        }
        return [name for name, ok in present.items() if not ok]

    def require_complete(self):
        missing = self.missing()
        if missing:
            raise BundleError(f"bundle is incomplete, missing: {', '.join(missing)}")

    @property
    def charset(self) -> Optional[str]:
        return self.recognizer.config.charset if self.recognizer is not None else None

    def models(self) -> Dict[str, torch.nn.Module]:
        """Every stored model by its archive name."""
        out = {}
        if self.chart_type is not None:
            out['chart_type'] = self.chart_type
        for key, model in sorted(self.detectors.items()):
            out[f'detector/{key}'] = model
        if self.upscaler is not None:
            out['upscaler'] = self.upscaler
        if self.recognizer is not None:
            out['recognizer'] = self.recognizer
        for key, model in sorted(self.text_roles.items()):
            out[f'text_role/{key}'] = model
        return out


def bundle_key(key: Optional[str]) -> str:
    """Validate a per-type key: 'shared' or a chart-type label."""
    if key is None or key == SHARED:
        return SHARED
    return ChartType.from_label(key).label


def _pack(module: torch.nn.Module):
    buffer = io.BytesIO()
    index = {}
    for name, tensor in module.state_dict().items():
        array = tensor.detach().cpu().numpy()
        array = array.astype('<f4') if array.dtype.kind == 'f' else array.astype('<i8')
        index[name] = {'offset': buffer.tell(), 'shape': list(array.shape), 'dtype': array.dtype.str}
        buffer.write(array.tobytes())
    return buffer.getvalue(), index


def _unpack(blob: bytes, index: dict) -> Dict[str, torch.Tensor]:
    state = {}
    for name, entry in index.items():
        dtype = np.dtype(entry['dtype'])
        count = math.prod(entry['shape'])
        if entry['offset'] + count * dtype.itemsize > len(blob):
            raise BundleError(f"tensor {name} runs past the end of its blob")
        array = np.frombuffer(blob, dtype=dtype, count=count, offset=entry['offset'])
        state[name] = torch.from_numpy(array.reshape(entry['shape']).copy())
    return state


def _stage_of(name: str) -> str:
    return name.split('/', 1)[0]


def save_bundle(bundle: PipelineBundle, path: str):
    """
    Write a bundle archive.

    Args:
        bundle: Bundle to store; may be partial
        path: Output .zip path
    """
    models = {}
    blobs = {}
    for name, model in bundle.models().items():
        blob, index = _pack(model)
        blob_name = f'weights/{name.replace("/", "_")}.bin'
        blobs[blob_name] = blob
        models[name] = {
            'config': asdict(model.config),
            'blob': blob_name,
            'sha256': hashlib.sha256(blob).hexdigest(),
            'tensors': index,
        }
    manifest = {
        'format_version': FORMAT_VERSION,
        'library_version': __version__,
        'stage_versions': dict(STAGE_VERSIONS),
        'charset': bundle.charset,
        'models': models,
        'runs': [run.to_dict() for run in bundle.runs],
    }
    with zipfile.ZipFile(path, 'w', zipfile.ZIP_DEFLATED) as archive:
        archive.writestr('mimetype', MIMETYPE, compress_type=zipfile.ZIP_STORED)
        archive.writestr('manifest.json', json.dumps(manifest, indent=2, sort_keys=True))
        for blob_name, blob in blobs.items():
            archive.writestr(blob_name, blob)
    logger.info("Saved bundle with %d models to %s", len(models), path)


def read_manifest(path: str) -> dict:
    """
    Read and check a bundle's manifest without loading weights.

    Raises:
        BundleError: On a damaged archive, a foreign file, a version
            mismatch or a charset disagreement
    """
    try:
        with zipfile.ZipFile(path) as archive:
            names = archive.namelist()
            if not names or names[0] != 'mimetype' or archive.read('mimetype').decode('ascii') != MIMETYPE:
                raise BundleError(f"{path} is not a chart extraction bundle")
            manifest = json.loads(archive.read('manifest.json').decode('utf-8'))
    except FileNotFoundError as e:
        raise BundleError(f"bundle not found: {path}") from e
    except (zipfile.BadZipFile, KeyError, EOFError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BundleError(f"damaged bundle {path}: {e}") from e
    _check_versions(manifest)
    _check_charset(manifest)
    return manifest


def _check_versions(manifest: dict):
    found = manifest.get('format_version')
    if found != FORMAT_VERSION:
        raise BundleError(f"bundle format version {found} is not supported (expected {FORMAT_VERSION})")
    stored = manifest.get('stage_versions', {})
    for name in manifest.get('models', {}):
        stage = _stage_of(name)
        if stage not in STAGE_VERSIONS:
            raise BundleError(f"bundle holds a model for unknown stage {stage!r} "
                              f"(known: {', '.join(STAGE_VERSIONS)})")
        if stored.get(stage) != STAGE_VERSIONS[stage]:
            raise BundleError(f"{stage} model version {stored.get(stage)} is incompatible "
                              f"with this library's version {STAGE_VERSIONS[stage]}")


def _check_charset(manifest: dict):
    recognizer = manifest.get('models', {}).get('recognizer')
    if recognizer is None:
        return
    if manifest.get('charset') != recognizer['config'].get('charset'):
        raise BundleError("manifest charset does not match the recognizer charset")


def load_bundle(path: str) -> PipelineBundle:
    """
    Load a bundle written by save_bundle.

    Every blob is checksummed before any model is built, so a damaged
    archive never yields a partially loaded bundle.

    Raises:
        BundleError: On damage, checksum failure, version or charset mismatch
    """
    manifest = read_manifest(path)
    blobs = {}
    try:
        with zipfile.ZipFile(path) as archive:
            for name, entry in manifest['models'].items():
                blob = archive.read(entry['blob'])
                if hashlib.sha256(blob).hexdigest() != entry['sha256']:
                    raise BundleError(f"checksum mismatch for {name} in {path}")
                blobs[name] = blob
    except (zipfile.BadZipFile, KeyError, EOFError, OSError) as e:
        raise BundleError(f"damaged bundle {path}: {e}") from e

    bundle = PipelineBundle(runs=[RunManifest.from_dict(run) for run in manifest.get('runs', [])])
    for name, entry in manifest['models'].items():
        stage = _stage_of(name)
        model_cls, config_cls = _MODEL_TYPES[stage]
        try:
            model = model_cls(config_cls(**entry['config']))
            model.load_state_dict(_unpack(blobs[name], entry['tensors']))
        except (TypeError, RuntimeError, ValueError) as e:
            raise BundleError(f"cannot rebuild {name} from {path}: {e}") from e
        model.eval()
        key = name.split('/', 1)[1] if '/' in name else None
        if stage == 'detector':
            bundle.detectors[key] = model
        elif stage == 'text_role':
            bundle.text_roles[key] = model
        else:
            setattr(bundle, stage, model)
    logger.info("Loaded bundle %s (%s)", path, ', '.join(manifest['models']))
    return bundle


def describe_bundle(path: str) -> dict:
    """Summary of a bundle for inspect-bundle: versions, models, charset, runs."""
    manifest = read_manifest(path)
    models = {}
    for name, entry in manifest['models'].items():
        parameters = sum(math.prod(t['shape']) for t in entry['tensors'].values())
        models[name] = {'parameters': parameters, 'sha256': entry['sha256']}
    stages = {_stage_of(name) for name in manifest['models']}
    return {
        'format_version': manifest['format_version'],
        'library_version': manifest.get('library_version'),
        'stage_versions': manifest['stage_versions'],
        'charset': manifest.get('charset'),
        'models': models,
        'missing': [s for s in STAGE_VERSIONS if s not in stages],
        'runs': manifest.get('runs', []),
    }
