import io
import re
import struct
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnpqn import protocol as P
from pnpqn.denoisers import CosineGradStep
from pnpqn.errors import ProtocolError, TransportError

SERVER = [sys.executable, "-m", "pnpqn.echo_server"]


@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.floats(0, 1, width=32), st.sampled_from([1, 2]))
def test_request_round_trip(c, h, w, sigma, op):
    x = np.arange(c * h * w, dtype=np.float32).reshape(c, h, w) / 7
    opcode, s, got = P.decode_request(io.BytesIO(P.encode_request(op, sigma, x)))
    assert opcode == op and s == pytest.approx(sigma)
    assert got.tobytes() == x.tobytes()


def test_header_layout():
    frame = P.encode_request(P.OP_DENOISE, 0.5, np.zeros((3, 2, 4), np.float32))
    assert frame[:4] == b"PNPX" and frame[4] == 1 and frame[5] == 1
    assert struct.unpack("<f", frame[6:10])[0] == 0.5
    assert struct.unpack("<III", frame[10:22]) == (3, 2, 4)
    assert len(frame) == 22 + 4 * 24


@pytest.mark.parametrize("patch, match", [
    ((0, b"NOPE"), "magic"),
    ((4, b"\x02"), "version"),
    ((10, struct.pack("<I", 0)), "dimensions"),
])
def test_malformed_requests(patch, match):
    frame = bytearray(P.encode_request(P.OP_DENOISE, 0.1, np.zeros((1, 2, 2), np.float32)))
    off, data = patch
    frame[off:off + len(data)] = data
    with pytest.raises(ProtocolError, match=match):
        P.decode_request(io.BytesIO(bytes(frame)))


def test_truncated_frame_is_transport_error():
    frame = P.encode_request(P.OP_DENOISE, 0.1, np.zeros((1, 2, 2), np.float32))
    with pytest.raises(TransportError):
        P.decode_request(io.BytesIO(frame[:-3]))


def test_response_round_trip():
    x = np.ones((1, 2, 2), np.float32)
    status, out = P.decode_response(io.BytesIO(P.encode_response(P.STATUS_OK, x)), P.OP_DENOISE, x.shape)
    assert status == 0 and np.array_equal(out, x)
    status, val = P.decode_response(io.BytesIO(P.encode_response(P.STATUS_OK, np.float32(2.5))), P.OP_POTENTIAL, x.shape)
    assert val == 2.5
    status, val = P.decode_response(io.BytesIO(P.encode_response(P.STATUS_DECLINED)), P.OP_POTENTIAL, x.shape)
    assert status == P.STATUS_DECLINED and val is None


def test_stdio_echo_is_bit_exact(rng):
    x = rng.uniform(size=(3, 5, 7)).astype(np.float32)
    with P.DenoiserClient(P.StdioTransport(SERVER)) as client:
        assert client.denoise(x, 0.1).tobytes() == x.tobytes()
        assert client.potential(x, 0.1) == 0.0


def test_corrupt_magic_closes_client():
    client = P.DenoiserClient(P.StdioTransport(SERVER + ["--corrupt-magic"]))
    with pytest.raises(ProtocolError, match="magic"):
        client.denoise(np.zeros((1, 2, 2), np.float32), 0.1)
    assert client.closed
    with pytest.raises(TransportError):
        client.denoise(np.zeros((1, 2, 2), np.float32), 0.1)


def test_declined_potential():
    with P.DenoiserClient(P.StdioTransport(SERVER + ["--decline-potential"])) as client:
        with pytest.raises(P.PotentialUnavailable):
            client.potential(np.zeros((1, 2, 2), np.float32), 0.1)
        # the session survives a declined request
        assert client.denoise(np.ones((1, 2, 2), np.float32), 0.1).shape == (1, 2, 2)


def test_server_answers_bad_frames():
    bad_op = bytearray(P.encode_request(P.OP_DENOISE, 0.1, np.zeros((1, 1, 1), np.float32)))
    bad_op[5] = 9
    out = subprocess.run(SERVER, input=bytes(bad_op) + b"JUNKJUNKJUNKJUNKJUNKJUNK", capture_output=True, timeout=30).stdout
    assert out[:5] == b"PNPX" + bytes([P.STATUS_BAD_OPCODE])
    assert out[5:10] == b"PNPX" + bytes([P.STATUS_PROTOCOL_ERROR])


def test_missing_command():
    with pytest.raises(TransportError):
        P.StdioTransport(["/nonexistent/denoiser-binary"])


def test_open_transport_requires_one_target():
    with pytest.raises(ValueError):
        P.open_transport()


def test_tcp_session_and_external_denoiser(rng):
    proc = subprocess.Popen(SERVER + ["--model", "cosine", "--port", "0"], stderr=subprocess.PIPE, text=True)
    try:
        line = proc.stderr.readline()
        port = int(re.search(r":(\d+)$", line.strip()).group(1))
        client = P.DenoiserClient(P.open_transport(address=f"127.0.0.1:{port}"))
        ext = P.ExternalDenoiser(client, sigma_d=0.05, alpha=0.5, lipschitz=0.9)
        local = CosineGradStep(0.9, alpha=0.5)
        x = rng.uniform(size=(1, 4, 4))
        x32 = x.astype(np.float32).astype(np.float64)
        assert np.allclose(ext.prox_step(x, 1.0), local.prox_step(x32, 1.0), atol=1e-6)
        assert ext.envelope_term(x, 0.5) == pytest.approx(local.envelope_term(x32, 0.5), rel=1e-5)
        assert ext.modulus(0.5) == pytest.approx(local.modulus(0.5))
        client.close()
    finally:
        proc.kill()
        proc.wait()
        proc.stderr.close()


def test_tcp_connection_refused():
    with pytest.raises(TransportError):
        P.TCPTransport("127.0.0.1", 1)
