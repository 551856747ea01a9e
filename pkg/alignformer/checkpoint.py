"""Named-tensor checkpoints: a JSON manifest plus one float32 blob.

A checkpoint is a directory holding ``manifest.json`` and ``tensors.bin``.
The manifest lists every tensor's name, shape and byte offset into the blob;
the blob concatenates the tensors as little-endian float32, row-major, in
manifest order.
"""

import json
import logging
from pathlib import Path

import numpy as np

from .errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT = 'alignformer-checkpoint/1'
MANIFEST = 'manifest.json'
BLOB = 'tensors.bin'
_DTYPE = np.dtype('<f4')


def save_checkpoint(path, arrays, metadata=None):
    """Write ``arrays`` (name -> array, in order) and ``metadata`` to ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        data = np.ascontiguousarray(value, dtype=_DTYPE)
        entries.append({'name': name, 'shape': list(data.shape), 'offset': offset})
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        'format': FORMAT,
        'tensors': entries,
        'total_bytes': offset,
        'metadata': metadata or {},
    }
    (path / BLOB).write_bytes(b''.join(chunks))
    (path / MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + '\n', encoding='utf-8'
    )
    logger.debug(
        'wrote checkpoint %s (%d tensors, %d bytes)', path, len(entries), offset
    )
    return path


def load_checkpoint(path):
    """Read a checkpoint directory.

    Returns:
        tuple: ``(arrays, metadata)`` where ``arrays`` maps names to float32
        arrays in manifest order.

    Raises:
        CheckpointError: If files are missing or inconsistent.
    """
    path = Path(path)
    manifest_path = path / MANIFEST
    blob_path = path / BLOB
    if not manifest_path.is_file() or not blob_path.is_file():
        raise CheckpointError(f'no checkpoint at {path}')
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise CheckpointError(f'{manifest_path}: {e}') from e
    if manifest.get('format') != FORMAT:
        raise CheckpointError(
            f'{manifest_path}: unsupported format {manifest.get("format")!r}'
        )
    blob = blob_path.read_bytes()
    expected = manifest.get('total_bytes')
    if len(blob) != expected:
        raise CheckpointError(
            f'{blob_path}: expected {expected} bytes, found {len(blob)}'
        )
    arrays = {}
    try:
        entries = [
            (e['name'], tuple(e['shape']), int(e['offset']))
            for e in manifest['tensors']
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f'{manifest_path}: malformed tensor table ({e})') from e
    for name, shape, start in entries:
        count = int(np.prod(shape)) if shape else 1
        end = start + count * _DTYPE.itemsize
        if end > len(blob):
            raise CheckpointError(f'{blob_path}: tensor {name!r} runs past the blob')
        data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=start)
        arrays[name] = data.reshape(shape).astype(np.float32)
    return arrays, manifest.get('metadata', {})
