import os
import sys

import pytest

os.environ.setdefault("PYTEST_DISABLE_PLUGIN_AUTOLOAD", "1")
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))
sys.path.append(os.path.abspath(os.path.dirname(__file__)))


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """A two-language corpus (one low, one very-low) generated once per session."""
    from helpers import toy_run_config

    from polyadapt.data.corpus import TierPlan, generate_corpus, make_languages

    cfg = toy_run_config()
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(make_languages(cfg.data), TierPlan.from_config(cfg.data), cfg.data, root)
    return root
