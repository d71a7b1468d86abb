import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class StubServer:
    """Local HTTP server that answers POSTs from a scripted queue.

    Each queued item is ``(status, body)`` or a callable taking the decoded
    request and returning one.  The last item repeats once the queue runs dry.
    """

    def __init__(self):
        self.script = []
        self.requests = []
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                raw = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                req = {"path": self.path, "headers": dict(self.headers), "json": json.loads(raw or b"null")}
                with stub._lock:
                    stub.requests.append(req)
                    item = stub.script.pop(0) if len(stub.script) > 1 else stub.script[0]
                status, body = item(req) if callable(item) else item
                data = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self._server.server_address[1]}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def respond(self, *items):
        self.script = list(items)
        self.requests = []
        return self

    def close(self):
        self._server.shutdown()
        self._server.server_close()


@pytest.fixture
def stub_server():
    server = StubServer()
    yield server
    server.close()


@pytest.fixture(autouse=True)
def _no_api_key(monkeypatch):
    monkeypatch.delenv("SCENE_RAG_API_KEY", raising=False)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion; it stays FAIL unless the test body completes."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    class Recorder:
        def start(self, number, title):
            self.number = number
            results[number] = [title, "FAIL", ""]

        def note(self, detail):
            results[self.number][2] = detail

        def passed(self):
            results[self.number][1] = "PASS"

    return Recorder()


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail = results[number]
        line = f"{status} criterion {number}: {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)
