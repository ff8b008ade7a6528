"""Command line entry point (same as ``python -m megatron.cli``)."""
from __future__ import annotations

from megatron.cli import main


if __name__ == "__main__":
    raise SystemExit(main())
