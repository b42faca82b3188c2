import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

SESSION_START = time.monotonic()


def pytest_collection_modifyitems(session, config, items):
    # the acceptance module runs last so its runtime check sees the whole suite
    items.sort(key=lambda item: item.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py" in item.nodeid)
