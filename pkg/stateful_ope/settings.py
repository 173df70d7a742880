# Copyright (c) 2024 stateful-ope contributors
# This file is part of stateful-ope.
#
#     stateful-ope is free software: you can redistribute it and/or modify
#     it under the terms of the GNU General Public License as published by
#     the Free Software Foundation, either version 3 of the License, or
#     (at your option) any later version.
#
#     stateful-ope is distributed in the hope that it will be useful,
#     but WITHOUT ANY WARRANTY; without even the implied warranty of
#     MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
#     GNU General Public License for more details.
#
#     You should have received a copy of the GNU General Public License
#     along with stateful-ope.  If not, see <https:#www.gnu.org/licenses/>.
#
"""Runtime config / env vars."""

import os
from dataclasses import dataclass, field


def parse_bool(value: str) -> bool:
    """Parse boolean values from environment variables."""
    return value.lower() in {"1", "true", "yes"} if value else False


def parse_int(value: str, default: int) -> int:
    """Parse a positive integer from an environment variable."""
    try:
        parsed = int(value)
    except (TypeError, ValueError):
        return default
    return parsed if parsed > 0 else default


@dataclass
class Settings:
    """Defaults for the command line, overridable from the environment."""

    DEBUG: bool = field(default_factory=lambda: parse_bool(os.getenv("DEBUG", "false")))
    WORKERS: int = field(
        default_factory=lambda: parse_int(os.getenv("STATEFUL_OPE_WORKERS", "1"), 1)
    )
    OUTPUT_DIR: str = field(
        default_factory=lambda: os.getenv("STATEFUL_OPE_OUTPUT_DIR", "results")
    )
