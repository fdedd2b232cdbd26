"""Multimodal dataset and result I/O.

Datasets are a JSON manifest plus one header-less CSV per modality (rows are
voxels, columns are subjects, ``NA`` marks a missing cell).  A subject is
either fully observed or fully missing within a modality.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NA_TOKEN = "NA"
SUMMARY_COLUMNS = ("setting", "missing_pct", "method", "replicate", "metric", "component", "value")


class DatasetError(ValueError):
    """A dataset or manifest violates the interchange contract."""


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    n_voxels: int
    data_path: str


@dataclass(frozen=True)
class DatasetManifest:
    n_subjects: int
    modalities: tuple[ModalitySpec, ...]
    subject_ids: tuple[str, ...]

    def __post_init__(self):
        if self.n_subjects < 1:
            raise DatasetError("n_subjects must be positive")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise DatasetError(f"duplicate modality names in {names}")
        for m in self.modalities:
            if m.n_voxels < 1:
                raise DatasetError(f"modality {m.name!r} has n_voxels < 1")
        if len(self.subject_ids) != self.n_subjects:
            raise DatasetError(
                f"{len(self.subject_ids)} subject ids for n_subjects={self.n_subjects}")

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "modalities": [
                {"name": m.name, "n_voxels": m.n_voxels, "data_path": m.data_path}
                for m in self.modalities
            ],
            "subject_ids": list(self.subject_ids),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetManifest":
        try:
            mods = tuple(
                ModalitySpec(str(m["name"]), int(m["n_voxels"]), str(m["data_path"]))
                for m in raw["modalities"]
            )
            return cls(int(raw["n_subjects"]), mods, tuple(str(s) for s in raw["subject_ids"]))
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"malformed manifest: {exc}") from exc


@dataclass(frozen=True)
class MaskedModality:
    """One modality: voxels x subjects values with NaN in missing columns.

    With ``imputed=True`` the unobserved columns carry filled-in values
    instead of NaN and ``observed`` still records the original availability.
    """

    name: str
    values: np.ndarray
    observed: np.ndarray = field(default=None)
    imputed: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DatasetError(f"modality {self.name!r}: values must be 2-D")
        nan = np.isnan(values)
        col_missing = nan.all(axis=0)
        if self.observed is None:
            observed = ~col_missing
        else:
            observed = np.array(self.observed, dtype=bool)
            if observed.shape != (values.shape[1],):
                raise DatasetError(f"modality {self.name!r}: mask length mismatch")
            if self.imputed:
                if nan.any():
                    raise DatasetError(f"modality {self.name!r}: imputed values contain NaN")
            else:
                values[:, ~observed] = np.nan
                nan = np.isnan(values)
        partial = nan[:, observed].any(axis=0)
        if partial.any():
            cols = np.flatnonzero(observed)[partial].tolist()
            raise DatasetError(f"modality {self.name!r}: partially missing subject columns {cols}")
        if np.isinf(values).any():
            raise DatasetError(f"modality {self.name!r}: infinite values")
        values.setflags(write=False)
        observed.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "observed", observed)

    @property
    def n_voxels(self) -> int:
        return self.values.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.values.shape[1]

    @property
    def missing_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.observed)

    @property
    def is_complete(self) -> bool:
        return bool(self.observed.all())


def _parse_cell(token: str, where: str) -> float:
    token = token.strip()
    if token == NA_TOKEN:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise DatasetError(f"unparseable cell {token!r} at {where}") from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite cell {token!r} at {where}")
    return value


def read_matrix_csv(path: str | os.PathLike) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            rows.append([_parse_cell(tok, f"{path}:{i + 1}:{j + 1}") for j, tok in enumerate(row)])
    if not rows:
        raise DatasetError(f"{path}: empty matrix file")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise DatasetError(f"{path}: ragged rows")
    return np.array(rows, dtype=float)


def _fmt(x: float) -> str:
    # repr() is the shortest string that round-trips exactly
    return NA_TOKEN if math.isnan(x) else repr(float(x))


def write_matrix_csv(path: str | os.PathLike, values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(values, dtype=float):
            writer.writerow([_fmt(x) for x in row])


def load_dataset(manifest_path: str | os.PathLike):
    """Read a manifest and its modality files.

    Returns ``(manifest, [MaskedModality, ...])``.
    """
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    manifest = DatasetManifest.from_dict(raw)
    mods = []
    for spec in manifest.modalities:
        path = Path(spec.data_path)
        if not path.is_absolute():
            path = manifest_path.parent / path
        values = read_matrix_csv(path)
        if values.shape != (spec.n_voxels, manifest.n_subjects):
            raise DatasetError(
                f"modality {spec.name!r}: file shape {values.shape} != manifest "
                f"({spec.n_voxels}, {manifest.n_subjects})")
        mods.append(MaskedModality(spec.name, values))
    observed_any = np.any([m.observed for m in mods], axis=0)
    if not observed_any.all():
        bad = [manifest.subject_ids[i] for i in np.flatnonzero(~observed_any)]
        raise DatasetError(f"subjects missing in every modality: {bad}")
    return manifest, mods


def save_dataset(out_dir: str | os.PathLike, modalities: Sequence[MaskedModality],
                 subject_ids: Sequence[str] | None = None) -> Path:
    """Write modalities in the CSV+JSON format; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = modalities[0].n_subjects
    if subject_ids is None:
        subject_ids = [f"s{i + 1:03d}" for i in range(n)]
    specs = []
    for m in modalities:
        fname = f"{m.name}.csv"
        write_matrix_csv(out_dir / fname, m.values)
        specs.append(ModalitySpec(m.name, m.n_voxels, fname))
    manifest = DatasetManifest(n, tuple(specs), tuple(subject_ids))
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


# results ------------------------------------------------------------------

def _pct_tag(pct: float) -> str:
    return f"pct{round(pct * 100):02d}"


def record_path(out_dir: str | os.PathLike, setting: str, missing_pct: float,
                method: str, replicate: int) -> Path:
    return (Path(out_dir) / "records" / setting / _pct_tag(missing_pct) / method
            / f"replicate_{replicate}.json")


def write_record(path: Path, rows: Iterable[dict], extra: dict | None = None) -> None:
    payload = {"rows": [dict(r) for r in rows]}
    if extra:
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_record(path: Path) -> dict:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload.get("rows"), list):
        raise DatasetError(f"{path}: record has no rows list")
    for row in payload["rows"]:
        if set(row) != set(SUMMARY_COLUMNS):
            raise DatasetError(f"{path}: row keys {sorted(row)} do not match the schema")
    return payload


def write_summary_csv(path: str | os.PathLike, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in rows:
            writer.writerow([
                r["setting"], repr(float(r["missing_pct"])), r["method"], int(r["replicate"]),
                r["metric"], int(r["component"]), repr(float(r["value"])),
            ])


def read_summary_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
            raise DatasetError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            {
                "setting": r["setting"],
                "missing_pct": float(r["missing_pct"]),
                "method": r["method"],
                "replicate": int(r["replicate"]),
                "metric": r["metric"],
                "component": int(r["component"]),
                "value": float(r["value"]),
            }
            for r in reader
        ]


def save_results(out_dir: str | os.PathLike, report) -> None:
    """Write one JSON record per (setting, pct, method, replicate) plus ``summary.csv``.

    ``report`` is an :class:`filica.evaluation.EvalReport`; aggregates go to
    ``aggregates.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple, list[dict]] = {}
    for r in report.rows:
        key = (r["setting"], r["missing_pct"], r["method"], r["replicate"])
        groups.setdefault(key, []).append(r)
    for key, rows in groups.items():
        write_record(record_path(out_dir, *key), rows)
    write_summary_csv(out_dir / "summary.csv", report.rows)
    write_aggregates_csv(out_dir / "aggregates.csv", report.aggregates)


def write_aggregates_csv(path: str | os.PathLike, aggregates: dict) -> None:
    stats = ("n", "mean", "sd", "q1", "median", "q3")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("setting", "missing_pct", "method", "metric", "component") + stats)
        for key in sorted(aggregates):
            agg = aggregates[key]
            setting, pct, method, metric, comp = key
            writer.writerow([setting, repr(float(pct)), method, metric, comp]
                            + [agg["n"]] + [repr(float(agg[s])) for s in stats[1:]])


def load_results(out_dir: str | os.PathLike) -> list[dict]:
    """Rows from every JSON record under ``out_dir``, in canonical order."""
    rows = []
    for path in sorted((Path(out_dir) / "records").rglob("replicate_*.json")):
        rows.extend(read_record(path)["rows"])
    return sort_rows(rows)


def sort_rows(rows: Iterable[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: (r["setting"], r["missing_pct"], r["method"],
                                       r["replicate"], r["metric"], r["component"]))
