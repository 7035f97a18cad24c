"""
artifacts.py

CSV persistence with a one-line provenance header. Every table the simulator
writes goes through here so the config digest, seed and tool version travel
with the numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from app import __version__
from app.exceptions import ArtifactError

FLOAT_FORMAT = "%.9g"
ENCODING = "utf-8"


@dataclass(frozen=True, slots=True)
class Provenance:
    digest: str
    seed: int
    version: str = __version__

    def header(self) -> str:
        return f"# digest={self.digest};seed={self.seed};version={self.version}"

    @classmethod
    def parse(cls, line: str) -> "Provenance":
        body = line.lstrip("#").strip()
        try:
            fields = dict(part.split("=", 1) for part in body.split(";"))
            return cls(fields["digest"], int(fields["seed"]), fields["version"])
        except (KeyError, ValueError) as exc:
            raise ArtifactError(f"Malformed provenance header: {line!r}") from exc


def write_csv(df: pd.DataFrame, path: Path | str, prov: Provenance) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", encoding=ENCODING, newline="") as fh:
            fh.write(prov.header() + "\n")
            df.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise ArtifactError(f"Cannot write {target}: {exc}") from exc
    return target


def append_csv(df: pd.DataFrame, path: Path | str) -> Path:
    """Add rows to a table written by write_csv; columns must match."""
    target = Path(path)
    if not target.exists():
        raise ArtifactError(f"Cannot append to missing artifact {target}")
    try:
        with target.open("a", encoding=ENCODING, newline="") as fh:
            df.to_csv(fh, index=False, header=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    except OSError as exc:
        raise ArtifactError(f"Cannot append to {target}: {exc}") from exc
    return target


def read_provenance(path: Path | str) -> Provenance:
    target = Path(path)
    if not target.exists():
        raise ArtifactError(f"Missing artifact {target}")
    with target.open("r", encoding=ENCODING) as fh:
        first = fh.readline()
    if not first.startswith("#"):
        raise ArtifactError(f"{target} has no provenance header")
    return Provenance.parse(first)


def read_csv(path: Path | str) -> tuple[pd.DataFrame, Provenance]:
    prov = read_provenance(path)
    try:
        df = pd.read_csv(path, comment="#", encoding=ENCODING)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ArtifactError(f"Cannot read {path}: {exc}") from exc
    return df, prov
