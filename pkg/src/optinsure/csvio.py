"""CSV artifacts with a reproducibility manifest header.

Every file starts with ``#`` lines recording the command, the SHA-256 of the
canonical configuration text, the seed, path and step counts, and library
versions.  Floats are written with 17 significant digits so values survive a
text round trip bit for bit.
"""

from __future__ import annotations

import csv
import io
import platform
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy


def package_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


@dataclass(frozen=True)
class Manifest:
    command: str
    config_sha256: str
    seed: int
    paths: int
    steps: int

    def lines(self) -> list[str]:
        return [
            "# optinsure run manifest",
            f"# command = {self.command}",
            f"# config_sha256 = {self.config_sha256}",
            f"# seed = {self.seed}",
            f"# paths = {self.paths}",
            f"# steps = {self.steps}",
            f"# versions = optinsure {package_version()}; numpy {np.__version__}; "
            f"scipy {scipy.__version__}; python {platform.python_version()}",
        ]


def format_value(v: object) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def render_csv(manifest: Manifest, columns: Sequence[str], rows: Iterable[Mapping[str, object] | Sequence]) -> str:
    buf = io.StringIO()
    for line in manifest.lines():
        buf.write(line + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        values = [row[c] for c in columns] if isinstance(row, Mapping) else row
        writer.writerow([format_value(v) for v in values])
    return buf.getvalue()


def write_csv(
    path: Path, manifest: Manifest, columns: Sequence[str], rows: Iterable[Mapping[str, object] | Sequence]
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_csv(manifest, columns, rows))
    return path


def read_csv(path: Path) -> tuple[list[str], list[dict[str, str]]]:
    """Return (manifest lines, rows as dicts of strings)."""
    text = Path(path).read_text().splitlines()
    header = [line for line in text if line.startswith("#")]
    body = [line for line in text if not line.startswith("#")]
    return header, list(csv.DictReader(body))
