import socket
import sys
import threading
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from anyword.protocol import serve_connection  # noqa: E402
from anyword.textgraph import parse_expression  # noqa: E402
from anyword.toy import ToyDenoiser, gaussian_field  # noqa: E402

FIG5 = "the boy in a blue sweatshirt holding a donut"

# filled in by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def fig5():
    return parse_expression(FIG5)


@pytest.fixture
def fig5_denoiser():
    fields = {
        "boy": gaussian_field((5, 5), 1.5),
        "sweatshirt": gaussian_field((6, 5), 1.0),
        "blue": gaussian_field((6, 5), 1.0),
        "donut": gaussian_field((11, 11), 1.5),
    }
    return ToyDenoiser(fields)


@pytest.fixture
def serve():
    """Start a loopback server for a protocol handler; returns its tcp:// URI."""
    listeners = []

    def start(handler):
        lst = socket.create_server(("127.0.0.1", 0))
        listeners.append(lst)

        def loop():
            while True:
                try:
                    conn, _ = lst.accept()
                except OSError:
                    return
                threading.Thread(target=serve_connection, args=(conn, handler), daemon=True).start()

        threading.Thread(target=loop, daemon=True).start()
        return f"tcp://127.0.0.1:{lst.getsockname()[1]}"

    yield start
    for lst in listeners:
        lst.close()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
