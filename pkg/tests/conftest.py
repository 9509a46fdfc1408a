from __future__ import annotations

import socket
import threading
import time

import pytest
import uvicorn

from relay_switch.mock_server import create_app


def _free_port() -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
        sock.bind(('127.0.0.1', 0))
        return sock.getsockname()[1]


@pytest.fixture
def serve_script():
    """Start a mock completions server for a Script in a background thread; returns its base URL."""
    running = []

    def start(script, strip_stop: bool = False) -> str:
        port = _free_port()
        config = uvicorn.Config(create_app(script, strip_stop=strip_stop), host='127.0.0.1', port=port,
                                log_level='warning')
        server = uvicorn.Server(config)
        thread = threading.Thread(target=server.run, daemon=True)
        thread.start()
        deadline = time.monotonic() + 10
        while not server.started:
            if time.monotonic() > deadline:
                raise RuntimeError('mock server did not start')
            time.sleep(0.01)
        running.append((server, thread))
        return f'http://127.0.0.1:{port}'

    yield start
    for server, thread in running:
        server.should_exit = True
        thread.join(timeout=5)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for name in ('RELAYGEN_LARGE_URL', 'RELAYGEN_SMALL_URL', 'RELAYGEN_API_KEY',
                 'RELAYGEN_LARGE_MODEL', 'RELAYGEN_SMALL_MODEL'):
        monkeypatch.delenv(name, raising=False)
