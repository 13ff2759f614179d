"""Reference denoiser server for the wire protocol.

    python3 -m pnpqn.echo_server                 # identity denoiser on stdio
    python3 -m pnpqn.echo_server --model cosine  # analytic gradient-step denoiser
    python3 -m pnpqn.echo_server --port 9000     # serve one TCP client at a time

``--corrupt-magic`` and ``--decline-potential`` exist to exercise client
error paths.
"""
import argparse
import socket
import sys

import numpy as np

from . import protocol as P
from .denoisers import CosineGradStep, QuadraticGradStep
from .errors import ProtocolError, TransportError


def make_model(name, lipschitz, omega):
    if name == "echo":
        return None
    if name == "cosine":
        return CosineGradStep(lipschitz=lipschitz, omega=omega)
    if name == "quadratic":
        return QuadraticGradStep(lipschitz=lipschitz)
    raise SystemExit(f"unknown model {name!r}")


def handle(opcode, x, model, args):
    if opcode == P.OP_DENOISE:
        out = x if model is None else model.denoise(x.astype(np.float64))
        return P.STATUS_OK, out
    if opcode == P.OP_POTENTIAL:
        if args.decline_potential:
            return P.STATUS_DECLINED, None
        val = 0.0 if model is None else model.potential(x.astype(np.float64))
        return P.STATUS_OK, np.float32(val)
    return P.STATUS_BAD_OPCODE, None


def serve(reader, writer, model, args):
    """Answer requests until EOF or a malformed frame."""
    while True:
        try:
            opcode, _sigma, x = P.decode_request(reader)
        except TransportError:
            return
        except ProtocolError:
            writer.write(P.encode_response(P.STATUS_PROTOCOL_ERROR))
            writer.flush()
            return
        status, out = handle(opcode, x, model, args)
        frame = P.encode_response(status, out)
        if args.corrupt_magic:
            frame = b"XXXX" + frame[4:]
        writer.write(frame)
        writer.flush()


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--model", default="echo", choices=["echo", "cosine", "quadratic"])
    parser.add_argument("--lipschitz", type=float, default=0.9)
    parser.add_argument("--omega", type=float, default=2 * np.pi / 0.25)
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--corrupt-magic", action="store_true")
    parser.add_argument("--decline-potential", action="store_true")
    args = parser.parse_args(argv)
    model = make_model(args.model, args.lipschitz, args.omega)

    if args.port is None:
        serve(sys.stdin.buffer, sys.stdout.buffer, model, args)
        return 0
    with socket.create_server((args.host, args.port)) as srv:
        print(f"listening on {args.host}:{srv.getsockname()[1]}", file=sys.stderr, flush=True)
        while True:
            conn, _ = srv.accept()
            with conn, conn.makefile("rb") as r, conn.makefile("wb") as w:
                serve(r, w, model, args)


if __name__ == "__main__":
    sys.exit(main())
