import pytest

from twopass_slu import active_backend, available_backends, use_backend


@pytest.fixture(params=available_backends())
def any_backend(request):
    """Run a test once per kernel backend (compiled and pure Python)."""
    prev = active_backend()
    use_backend(request.param)
    yield request.param
    use_backend(prev)
