"""Shared fixtures: a deterministic scripted chat-completions endpoint that
plays both the trace generator and the judge panel.

The script keys on marker tokens, not model identity, so any judge panel
pointed at it is unanimous: a step containing FLAW-* scores 0.0, SHAKY
scores 0.5, anything else 1.0. The generator side derives each trace's shape
(which step is flawed, whether the final answer is right) from an md5 of the
question and condition, so repeated runs are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

_ADD = re.compile(r"Add (\d+) and (\d+)")
_GENERATED_STEP = re.compile(r" Generated Step: (.*)")

_ERROR_NAMES = {
    "FLAW-CALC": "Numerical Miscalculation",
    "FLAW-FACT": "Factual Error",
    "FLAW-LEAP": "Logical Leap",
}


class ChatScript:
    """Pure functions behind the mock endpoint, importable by tests that
    need to recompute what the server will say."""

    @staticmethod
    def condition_of(messages: list[dict]) -> str:
        system = next((m["content"] for m in messages if m["role"] == "system"), "")
        user = next((m["content"] for m in messages if m["role"] == "user"), "")
        if user.startswith("Context: "):
            return "rag"
        if system.startswith("Verify each step"):
            return "verification"
        if "review your reasoning" in system:
            return "self_critique"
        return "baseline"

    @staticmethod
    def trace_for(question: str, condition: str) -> str:
        match = _ADD.search(question)
        if match is None:
            return "Step 1: I cannot parse the task.\nAnswer: 0"
        a, b = int(match.group(1)), int(match.group(2))
        digest = hashlib.md5(f"{question}|{condition}".encode("utf-8")).digest()
        shape = digest[0] % 4
        correct = digest[1] % 3 != 0
        total = a + b if correct else a + b + 1
        if shape == 0:
            step1 = f"Step 1: We must add {a} and {b}."
        elif shape == 1:
            step1 = f"Step 1: Since {a} doubled is {a + b}, FLAW-CALC applies."
        elif shape == 2:
            step1 = f"Step 1: Every sum here lands above 100, a FLAW-LEAP."
        else:
            step1 = f"Step 1: The total is likely near {a + b}, on SHAKY ground."
        return f"{step1}\nStep 2: Therefore {a} + {b} = {total}.\nAnswer: {total}"

    @staticmethod
    def judge_score(step_text: str) -> str:
        if "FLAW" in step_text:
            return "0.0"
        if "SHAKY" in step_text:
            return "0.5"
        return "1.0"

    @staticmethod
    def error_name(step_text: str) -> str:
        for marker, name in _ERROR_NAMES.items():
            if marker in step_text:
                return name
        return "Other"

    @staticmethod
    def respond(messages: list[dict]) -> str:
        if any(m["role"] == "system" for m in messages):
            user = next(m["content"] for m in messages if m["role"] == "user")
            condition = ChatScript.condition_of(messages)
            question = user.split("  ", 1)[1] if condition == "rag" else user
            return ChatScript.trace_for(question, condition)
        prompt = messages[0]["content"]
        step_match = _GENERATED_STEP.search(prompt)
        step_text = step_match.group(1) if step_match else ""
        if "Score the 'Generated Step'" in prompt:
            return ChatScript.judge_score(step_text)
        if "classify the primary error" in prompt:
            return ChatScript.error_name(step_text)
        if "misuses the" in prompt:
            return "Misapplication" if "FLAW" in step_text else "Correct"
        return "1.0"


class _ChatHandler(BaseHTTPRequestHandler):
    def do_POST(self):
        if self.path != "/chat/completions":
            self.send_error(404)
            return
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        content = ChatScript.respond(body["messages"])
        payload = json.dumps(
            {"choices": [{"message": {"content": content}}]}
        ).encode("utf-8")
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def chat_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ChatHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_address[1]}", ChatScript
    finally:
        server.shutdown()
        thread.join()
