import os
import json
import hashlib
from pathlib import Path
import numpy as np

from .config import OUTPUT_DIR


def ensure_dir_exists(directory=None) -> Path:
    """Creates the directory (default: the output root) if it doesn't exist."""
    path = Path(directory or OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def make_json_serializable(obj):
    """Recursively converts numpy types, tuples, sets and paths to JSON-friendly values."""
    if isinstance(obj, (set, tuple)):
        return [make_json_serializable(elem) for elem in obj]
    elif isinstance(obj, dict):
        return {str(k): make_json_serializable(v) for k, v in obj.items()}
    elif isinstance(obj, list):
        return [make_json_serializable(elem) for elem in obj]
    elif isinstance(obj, Path):
        return str(obj)
    elif isinstance(obj, float) and (obj == float('inf') or obj == float('-inf')):
        return str(obj)
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.bool_):
        return bool(obj)
    else:
        return obj


def save_report_local(report_data: dict, name: str, directory=None) -> str:
    """Saves a JSON report and returns the file path."""
    directory = ensure_dir_exists(directory)
    file_path = directory / f"{name}.json"
    with open(file_path, 'w') as f:
        json.dump(make_json_serializable(report_data), f, indent=2, sort_keys=True)
    return str(file_path)


def get_report_local(file_path) -> dict:
    """Loads and parses a JSON report from the local filesystem."""
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Report file not found: {file_path}")
    with open(file_path, 'r') as f:
        return json.load(f)


def save_array(array: np.ndarray, file_path) -> str:
    """Writes one array in .npy format, whatever the extension."""
    file_path = Path(file_path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'wb') as f:
        np.save(f, np.ascontiguousarray(array), allow_pickle=False)
    return str(file_path)


def load_array(file_path, mmap=False) -> np.ndarray:
    if not os.path.exists(file_path):
        raise FileNotFoundError(f"Array file not found: {file_path}")
    return np.load(file_path, mmap_mode='r' if mmap else None, allow_pickle=False)


def save_array_with_sidecar(array: np.ndarray, file_path, metadata: dict) -> str:
    """Array container plus a `<name>.json` metadata record next to it."""
    path = save_array(array, file_path)
    sidecar = Path(file_path).with_suffix('.json')
    with open(sidecar, 'w') as f:
        json.dump(make_json_serializable(metadata), f, indent=2, sort_keys=True)
    return path


def load_sidecar(file_path) -> dict:
    return get_report_local(Path(file_path).with_suffix('.json'))


def hash_file(file_path, chunk_size=1 << 20) -> str:
    digest = hashlib.sha256()
    with open(file_path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            digest.update(chunk)
    return digest.hexdigest()


def hash_config(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    payload = json.dumps(make_json_serializable(config), sort_keys=True)
    return hashlib.sha256(payload.encode('utf8')).hexdigest()


def hash_path(path) -> str:
    """File digest, or for a directory a digest over every file's relative name and content."""
    path = Path(path)
    if path.is_file():
        return hash_file(path)
    digest = hashlib.sha256()
    for child in sorted(p for p in path.rglob('*') if p.is_file()):
        digest.update(child.relative_to(path).as_posix().encode('utf8'))
        digest.update(hash_file(child).encode('utf8'))
    return digest.hexdigest()
