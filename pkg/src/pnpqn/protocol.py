"""Binary wire protocol for out-of-process denoisers, and its client.

All integers and floats are little-endian.

request::

    "PNPX" | version u8 = 1 | opcode u8 | sigma f32 | C u32 | H u32 | W u32 | C*H*W f32

response::

    "PNPX" | status u8 | payload

On ``status == 0`` the payload is ``C*H*W`` f32 for opcode 1 (denoise) and a
single f32 for opcode 2 (potential). A non-zero status carries no payload.
"""
import logging
import shlex
import socket
import struct
import subprocess

import numpy as np

from .denoisers import Regularizer
from .errors import PnPError, ProtocolError, TransportError

logger = logging.getLogger(__name__)

MAGIC = b"PNPX"
VERSION = 1
OP_DENOISE = 1
OP_POTENTIAL = 2

STATUS_OK = 0
STATUS_PROTOCOL_ERROR = 1
STATUS_BAD_OPCODE = 2
STATUS_DECLINED = 3
STATUS_INTERNAL = 4

_REQ_HEADER = struct.Struct("<4sBBfIII")
_RESP_HEADER = struct.Struct("<4sB")
_MAX_ELEMENTS = 1 << 28


class PotentialUnavailable(PnPError):
    """The server declined a potential evaluation (opcode 2)."""


def read_exact(stream, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise TransportError(f"connection closed after {len(buf)} of {n} expected bytes")
        buf += chunk
    return bytes(buf)


def encode_request(opcode, sigma, x):
    x = np.ascontiguousarray(x, dtype="<f4")
    if x.ndim != 3:
        raise ProtocolError(f"payload must be (C, H, W), got shape {x.shape}")
    c, h, w = x.shape
    return _REQ_HEADER.pack(MAGIC, VERSION, opcode, float(sigma), c, h, w) + x.tobytes()


def decode_request(stream):
    """Read one request; returns ``(opcode, sigma, array)``."""
    head = read_exact(stream, _REQ_HEADER.size)
    magic, version, opcode, sigma, c, h, w = _REQ_HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    n = c * h * w
    if n == 0 or n > _MAX_ELEMENTS:
        raise ProtocolError(f"invalid payload dimensions {c}x{h}x{w}")
    payload = read_exact(stream, 4 * n)
    return opcode, sigma, np.frombuffer(payload, dtype="<f4").reshape(c, h, w)


def encode_response(status, payload=None):
    head = _RESP_HEADER.pack(MAGIC, status)
    if status != STATUS_OK or payload is None:
        return head
    if np.ndim(payload) == 0:
        return head + struct.pack("<f", float(payload))
    return head + np.ascontiguousarray(payload, dtype="<f4").tobytes()


def decode_response(stream, opcode, shape):
    """Read one response; returns ``(status, value)``."""
    head = read_exact(stream, _RESP_HEADER.size)
    magic, status = _RESP_HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad response magic {magic!r} (status byte {status})")
    if status != STATUS_OK:
        return status, None
    if opcode == OP_POTENTIAL:
        return status, struct.unpack("<f", read_exact(stream, 4))[0]
    n = int(np.prod(shape))
    data = read_exact(stream, 4 * n)
    return status, np.frombuffer(data, dtype="<f4").reshape(shape)


class StdioTransport:
    """Spawn a denoiser process and talk to it over its stdin/stdout pipes."""

    def __init__(self, cmd):
        self.cmd = cmd if isinstance(cmd, (list, tuple)) else shlex.split(cmd)
        try:
            self.proc = subprocess.Popen(self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        except OSError as exc:
            raise TransportError(f"cannot spawn denoiser {self.cmd!r}: {exc}") from exc
        self.reader = self.proc.stdout
        self.writer = self.proc.stdin

    def send(self, data):
        try:
            self.writer.write(data)
            self.writer.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"denoiser process {self.cmd!r} closed its input: {exc}") from exc

    def close(self):
        for f in (self.writer, self.reader):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
        if self.proc.stderr is not None:
            self.proc.stderr.close()


class TCPTransport:
    def __init__(self, host, port, timeout=30.0):
        try:
            self.sock = socket.create_connection((host, int(port)), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to denoiser at {host}:{port}: {exc}") from exc
        self.reader = self.sock.makefile("rb")
        self.writer = self.sock.makefile("wb")

    def send(self, data):
        try:
            self.writer.write(data)
            self.writer.flush()
        except OSError as exc:
            raise TransportError(f"denoiser connection lost: {exc}") from exc

    def close(self):
        for f in (self.writer, self.reader):
            try:
                f.close()
            except OSError:
                pass
        self.sock.close()


def open_transport(cmd=None, address=None):
    if (cmd is None) == (address is None):
        raise ValueError("give exactly one of cmd or address")
    if cmd is not None:
        return StdioTransport(cmd)
    host, _, port = address.rpartition(":")
    return TCPTransport(host or "127.0.0.1", port)


class DenoiserClient:
    """Request/response session over one transport; requests are serialized."""

    def __init__(self, transport):
        self.transport = transport
        self.closed = False

    def request(self, opcode, sigma, x):
        if self.closed:
            raise TransportError("denoiser connection already closed")
        x = np.asarray(x)
        self.transport.send(encode_request(opcode, sigma, x))
        try:
            return decode_response(self.transport.reader, opcode, x.shape)
        except ProtocolError:
            self.close()
            raise

    def denoise(self, x, sigma):
        status, out = self.request(OP_DENOISE, sigma, x)
        if status != STATUS_OK:
            raise ProtocolError(f"denoise request failed with status {status}")
        return out

    def potential(self, x, sigma):
        status, val = self.request(OP_POTENTIAL, sigma, x)
        if status == STATUS_DECLINED:
            raise PotentialUnavailable("server declined potential evaluation")
        if status != STATUS_OK:
            raise ProtocolError(f"potential request failed with status {status}")
        return val

    def close(self):
        if not self.closed:
            self.closed = True
            self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ExternalDenoiser(Regularizer):
    """Gradient-step denoiser served by another process.

    The server returns ``D_sigma(x)`` and ``g_sigma(x)``; relaxation by
    ``alpha`` happens here. ``lipschitz`` is the assumed Lipschitz constant of
    ``grad g_sigma`` and only enters the weak-convexity bound. Payloads travel
    as float32.
    """

    smooth = True
    strength_dependent = True

    def __init__(self, client, sigma_d, alpha=1.0, lipschitz=1.0):
        super().__init__()
        self.client = client
        self.sigma_d = float(sigma_d)
        self.alpha = float(alpha)
        self.lipschitz = float(lipschitz)

    def prox_step(self, v, gamma):
        self.calls["prox"] += 1
        d = self.client.denoise(v, self.sigma_d).astype(np.float64)
        return (1.0 - self.alpha) * v + self.alpha * d

    def envelope_term(self, v, gamma):
        self.calls["potential"] += 1
        return self.alpha * float(self.client.potential(v, self.sigma_d)) / gamma

    def weak_convexity(self):
        aL = self.alpha * self.lipschitz
        return aL / (aL + 1.0)

    def modulus(self, gamma):
        return self.weak_convexity() / gamma

    def with_strength(self, sigma_d):
        return ExternalDenoiser(self.client, sigma_d, self.alpha, self.lipschitz)
