import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tepalab.lab import Lab  # noqa: E402


@pytest.fixture(scope="session")
def lab(request):
    """The standard desk-scale lab; built artifacts persist in the pytest cache."""
    logging.getLogger("tepalab").setLevel(logging.INFO)
    return Lab(cache_dir=request.config.cache.mkdir("tepalab-lab"))
