"""Bundled reference environments, placements, targets, and scenarios.

Assets ship inside the package so CLI examples and the test suite work
without any setup. Reference them from scenario files (or CLI
arguments) as "asset:NAME", e.g. "asset:arena_env".
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

ASSET_PREFIX = "asset:"


def asset_path(name: str) -> Path:
    """Filesystem path of a bundled asset by bare name (no .json)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    ref = resources.files("tdoa_forge") / "assets" / fname
    with resources.as_file(ref) as p:
        path = Path(p)
    if not path.exists():
        raise FileNotFoundError(
            f"no bundled asset {name!r}; available: {', '.join(list_assets())}"
        )
    return path


def list_assets() -> list[str]:
    """Bare names of every bundled asset, sorted."""
    base = resources.files("tdoa_forge") / "assets"
    return sorted(
        entry.name[: -len(".json")]
        for entry in base.iterdir()
        if entry.name.endswith(".json")
    )


def resolve_ref(ref: str, base_dir: Path | None = None) -> Path:
    """Turn an asset reference or path string into a concrete path.

    "asset:NAME" resolves into the bundled assets; anything else is a
    filesystem path, taken relative to base_dir when not absolute.
    """
    if ref.startswith(ASSET_PREFIX):
        return asset_path(ref[len(ASSET_PREFIX):])
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p
