""" Line-oriented adapter for a model served by an external process.

Each request is one JSON line carrying the patch as base64-encoded float32
little-endian bytes; each response is one line. Requests are serialized with a
lock, so a single adapter can be shared by concurrent pipeline workers.
"""
import base64
import json
import logging
import shlex
import subprocess
import threading

import numpy as np

logger = logging.getLogger(__name__)

CLOSE_TIMEOUT_S = 10


def encode_patch(pixels):
    pixels = np.ascontiguousarray(pixels, dtype="<f4")
    return {"shape": list(pixels.shape), "dtype": "float32",
            "data": base64.b64encode(pixels.tobytes()).decode("ascii")}


def decode_patch(payload):
    data = base64.b64decode(payload["data"])
    return np.frombuffer(data, dtype="<f4").reshape(payload["shape"])


class LineProcess:
    """ A long-running child process answering one line per request line.

    Arguments
    ----------
    command : <class 'str'>
        command line of the model server
    error_cls : <class 'type'>
        exception raised when the process fails or answers nothing
    """

    def __init__(self, command, error_cls):
        self.command = command
        self.error_cls = error_cls
        self._lock = threading.Lock()
        self._proc = None

    def _ensure_started(self):
        if self._proc is None or self._proc.poll() is not None:
            logger.info("Starting model process: %s", self.command)
            try:
                self._proc = subprocess.Popen(shlex.split(self.command), stdin=subprocess.PIPE,
                                              stdout=subprocess.PIPE, text=True, bufsize=1)
            except OSError as err:
                raise self.error_cls(f"cannot start model process {self.command!r}: {err}") from err

    def request(self, source_id, knee_side, pixels):
        """ Sends one patch and returns the raw response line. """

        message = {"source_id": source_id, "knee_side": knee_side, "patch": encode_patch(pixels)}
        with self._lock:
            self._ensure_started()
            try:
                self._proc.stdin.write(json.dumps(message) + "\n")
                self._proc.stdin.flush()
                line = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as err:
                raise self.error_cls(f"model process {self.command!r} failed: {err}") from err
        if not line.strip():
            raise self.error_cls(f"model process {self.command!r} returned no answer")
        return line.strip()

    def close(self):
        with self._lock:
            if self._proc is not None and self._proc.poll() is None:
                self._proc.stdin.close()
                try:
                    self._proc.wait(timeout=CLOSE_TIMEOUT_S)
                except subprocess.TimeoutExpired:
                    logger.warning("Model process %s did not exit; killing it", self.command)
                    self._proc.kill()
                    self._proc.wait()
            self._proc = None
