import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class _Quiet(ThreadingHTTPServer):
    daemon_threads = True

    def handle_error(self, request, client_address):
        # clients that time out leave broken pipes behind
        pass


class MockServer:
    """Completion endpoint whose replies are set per test; records every request body."""

    def __init__(self):
        self.requests = []
        self.reply = lambda body: {"choices": [{"text": "true", "finish_reason": "stop"}]}
        self.status = 200
        self.raw = None
        self.delay = 0.0
        srv = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(n))
                srv.requests.append({"path": self.path, "body": body, "auth": self.headers.get("Authorization")})
                if srv.delay:
                    threading.Event().wait(srv.delay)
                data = srv.raw if srv.raw is not None else json.dumps(srv.reply(body)).encode()
                self.send_response(srv.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *a):
                pass

        self.httpd = _Quiet(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, args=(0.02,), daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server():
    s = MockServer()
    yield s
    s.close()


def pytest_terminal_summary(terminalreporter):
    import _support

    if not _support.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_support.ACCEPTANCE):
        ok, detail = _support.ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}")
