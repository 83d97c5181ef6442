"""
Dataset files, run configuration and result artifacts
=====================================================
Dataset CSV layout: header row ``stratum,case,<covariates in block order>``,
one row per subject. Block sizes come from the caller or from a sidecar file
``<data>.blocks`` holding e.g. ``50,50``; without either the covariates form a
single block.
"""

import hashlib
import json
import os
import platform
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from clr_data import MatchedDataset, validate
from clr_errors import DataValidationError, InvalidArgumentError, UsageError

PathLike = Union[str, Path]

REQUIRED_COLUMNS = ("stratum", "case")


# ============================================================================
# 1. Dataset files
# ============================================================================

def parse_block_sizes(text: str) -> List[int]:
    try:
        sizes = [int(tok) for tok in str(text).replace(";", ",").split(",") if tok.strip()]
    except ValueError:
        raise InvalidArgumentError(f"block sizes must be comma-separated integers, got {text!r}")
    if not sizes or any(s <= 0 for s in sizes):
        raise InvalidArgumentError(f"block sizes must be positive integers, got {text!r}")
    return sizes


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".blocks")


def parse_dataset(path: PathLike, block_sizes: Optional[Sequence[int]] = None) -> MatchedDataset:
    """Read and validate a dataset CSV. Every error names its location."""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"stratum": str}, float_precision="round_trip",
                            skip_blank_lines=False)
    except FileNotFoundError:
        raise UsageError(f"data file not found: {path}")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"{path}: malformed CSV: {exc}")

    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise DataValidationError(f"{path}: missing column(s) {', '.join(missing)}")
    covariate_names = [c for c in frame.columns if c not in REQUIRED_COLUMNS]
    if not covariate_names:
        raise DataValidationError(f"{path}: no covariate columns")

    # Blank lines are read as empty rows so each row keeps its line number in the file.
    blank = frame.isna().all(axis=1).to_numpy()
    line_of = np.flatnonzero(~blank) + 2
    frame = frame.loc[~blank].reset_index(drop=True)

    problems: List[str] = []
    if frame["stratum"].isna().any():
        first = int(np.flatnonzero(frame["stratum"].isna())[0])
        problems.append(f"line {line_of[first]}: empty stratum id")
    case = pd.to_numeric(frame["case"], errors="coerce")
    bad_case = ~case.isin([0, 1])
    if bad_case.any():
        first = int(np.flatnonzero(bad_case)[0])
        problems.append(
            f"line {line_of[first]}: case must be 0 or 1, got {frame['case'].iloc[first]!r}"
        )

    columns = []
    for name in covariate_names:
        values = pd.to_numeric(frame[name], errors="coerce")
        bad = values.isna() | ~np.isfinite(values.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            problems.append(
                f"line {line_of[first]}, column {name!r}: non-numeric or non-finite value "
                f"{frame[name].iloc[first]!r}"
            )
        columns.append(values.to_numpy(dtype=float, na_value=np.nan))
    if problems:
        raise DataValidationError(f"{path}: " + "; ".join(problems), problems)

    if block_sizes is None:
        sidecar = sidecar_path(path)
        if sidecar.exists():
            block_sizes = parse_block_sizes(sidecar.read_text(encoding="utf-8").strip())
        else:
            block_sizes = [len(covariate_names)]

    data = MatchedDataset.from_labels(
        frame["stratum"].astype(str).tolist(),
        case.astype(int).to_numpy(),
        np.column_stack(columns),
        tuple(block_sizes),
        tuple(covariate_names),
    )
    report = validate(data)
    if not report.is_valid:
        raise DataValidationError(f"{path}: " + "; ".join(report.violations), report.violations)
    return data


def dataset_frame(data: MatchedDataset) -> pd.DataFrame:
    rows = [r for s in data.strata for r in s.rows]
    frame = pd.DataFrame(data.covariates[rows], columns=list(data.column_names))
    frame.insert(0, "case", [int(i == 0) for s in data.strata for i in range(s.size)])
    frame.insert(0, "stratum", [s.id for s in data.strata for _ in range(s.size)])
    return frame


def write_dataset(data: MatchedDataset, path: PathLike) -> None:
    """Write the CSV (case row first in each stratum) and its ``.blocks`` sidecar."""
    path = Path(path)
    dataset_frame(data).to_csv(path, index=False)
    sidecar_path(path).write_text(",".join(str(b) for b in data.block_sizes) + "\n",
                                  encoding="utf-8")


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ============================================================================
# 2. Penalty vector lists
# ============================================================================

def parse_vector(text: str) -> np.ndarray:
    try:
        values = np.array([float(tok) for tok in text.split(",") if tok.strip()])
    except ValueError:
        raise InvalidArgumentError(f"expected comma-separated numbers, got {text!r}")
    if values.size == 0:
        raise InvalidArgumentError("empty vector")
    return values


def parse_lambda_grid(spec: str) -> np.ndarray:
    """Penalty vectors from ``"5,1;5,2;..."`` or from a CSV file (one vector per row)."""
    candidate = Path(spec)
    if candidate.suffix.lower() == ".csv" or candidate.is_file():
        if not candidate.is_file():
            raise UsageError(f"lambda grid file not found: {candidate}")
        grid = pd.read_csv(candidate, header=None, comment="#", float_precision="round_trip")
        if grid.shape[0] and not np.issubdtype(grid.dtypes.iloc[0], np.number):
            # A header row was present.
            grid = pd.read_csv(candidate, comment="#", float_precision="round_trip")
        try:
            return grid.to_numpy(dtype=float)
        except ValueError:
            raise InvalidArgumentError(f"{candidate}: penalty vectors must be numeric")
    rows = [parse_vector(chunk) for chunk in spec.split(";") if chunk.strip()]
    if not rows or len({r.size for r in rows}) != 1:
        raise InvalidArgumentError(f"penalty vectors must all have the same length: {spec!r}")
    return np.vstack(rows)


# ============================================================================
# 3. Run configuration files
# ============================================================================

def config_file_arguments(path: PathLike, boolean_flags: Sequence[str] = ()) -> List[str]:
    """Turn a flat ``key=value`` file into command-line tokens.

    Keys are flag names with underscores (``lambda_grid`` -> ``--lambda-grid``).
    Boolean keys listed in ``boolean_flags`` accept true/false.
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    tokens: List[str] = []
    for key, value in dotenv_values(path).items():
        flag = "--" + key.strip().replace("_", "-")
        if key in boolean_flags:
            truthy = str(value).strip().lower()
            if truthy in ("1", "true", "yes", "on"):
                tokens.append(flag)
            elif truthy in ("0", "false", "no", "off"):
                tokens.append("--no-" + flag[2:])
            else:
                raise UsageError(f"{path}: {key} must be true or false, got {value!r}")
        elif value is None:
            raise UsageError(f"{path}: key {key!r} has no value")
        else:
            tokens.extend([flag, value])
    return tokens


# ============================================================================
# 4. Artifacts and manifest
# ============================================================================

def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


class ArtifactStage:
    """Stage result files in a temp directory; promote them only on success.

    Each file is moved into the output directory with ``os.replace``, so a
    final path never holds a partially written file.
    """

    def __init__(self, out_dir: PathLike):
        self.out_dir = Path(out_dir)
        self.stage_dir: Optional[Path] = None
        self.files: List[str] = []

    def __enter__(self) -> "ArtifactStage":
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.stage_dir = Path(tempfile.mkdtemp(prefix=f".{self.out_dir.name}.", dir=self.out_dir.parent))
        return self

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.stage_dir / name

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False)
        return target

    def write_json(self, name: str, payload: dict) -> Path:
        target = self.path(name)
        with open(target, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, ensure_ascii=False, default=_json_default)
        return target

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                for name in self.files:
                    os.replace(self.stage_dir / name, self.out_dir / name)
        finally:
            shutil.rmtree(self.stage_dir, ignore_errors=True)
        return False


def library_versions() -> Dict[str, str]:
    import joblib
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "joblib": joblib.__version__,
    }


@dataclass
class RunManifest:
    """Everything needed to reproduce a run, written as ``manifest.json``."""

    command: str
    version: str
    parameters: Dict[str, object]
    started: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    inputs: Dict[str, str] = field(default_factory=dict)
    results: Dict[str, object] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    _clock: float = field(default_factory=time.perf_counter, repr=False)

    def add_input(self, path: PathLike) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def to_dict(self) -> dict:
        self.timings.setdefault("elapsed_seconds", round(time.perf_counter() - self._clock, 6))
        return {
            "command": self.command,
            "version": self.version,
            "started": self.started,
            "parameters": self.parameters,
            "inputs": self.inputs,
            "results": self.results,
            "warnings": self.warnings,
            "timings": self.timings,
            "libraries": library_versions(),
        }
