from __future__ import annotations

import pytest

from datagen import make_blob_tree


@pytest.fixture(scope="session")
def blob_tree(tmp_path_factory):
    """12 images per class; shared read-only across tests."""
    return make_blob_tree(tmp_path_factory.mktemp("blobs"), 12, seed=1)
