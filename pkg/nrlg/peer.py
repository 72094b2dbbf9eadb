"""
Reference noise-predictor peer speaking the external denoiser protocol.

Serves the analytic Gaussian-prior predictor over stdin/stdout; extra modes
produce the misbehaviours the client must detect.

    python -m nrlg.peer --prior-mean 0.5 --prior-var 0.01
    python -m nrlg.peer --mode zero
"""

import logging
import sys
from typing import BinaryIO, Optional

import click
import numpy as np

from . import protocol
from .denoiser import GaussianPrior, analytic_predict_noise
from .errors import NRLGError, TransportError
from .schedule import linear_schedule


logger = logging.getLogger(__name__)

MODES = ("analytic", "zero", "nan", "wrong-shape", "bad-version", "reject", "bad-reply")


def serve(
    stdin: BinaryIO,
    stdout: BinaryIO,
    mode: str = "analytic",
    prior_mean: float = 0.5,
    prior_var: float = 0.01,
    prior_mean_file: Optional[str] = None,
    prior_var_file: Optional[str] = None,
) -> int:
    """Answer one handshake and then predictions until the client hangs up."""
    hello = protocol.decode_handshake(protocol.read_frame(stdin))
    logger.info(f"peer handshake: T={hello.num_steps}, shape={hello.shape}, mode={mode}")

    if mode == "bad-version":
        protocol.write_frame(stdout, protocol.encode_handshake_reply(version=hello.version + 1))
        return 0
    if mode == "reject" or hello.version != protocol.PROTOCOL_VERSION:
        protocol.write_frame(stdout, protocol.encode_handshake_reply(status=protocol.STATUS_REJECTED))
        return 0
    protocol.write_frame(stdout, protocol.encode_handshake_reply())

    schedule = linear_schedule(hello.num_steps, hello.beta_start, hello.beta_end)
    if prior_mean_file and prior_var_file:
        prior = GaussianPrior.from_files(prior_mean_file, prior_var_file)
    else:
        prior = GaussianPrior.isotropic(hello.shape, prior_mean, prior_var)

    while True:
        try:
            body = protocol.read_frame(stdin)
        except TransportError:
            return 0
        t, x_t = protocol.decode_predict_request(body, hello.shape)
        if mode == "zero":
            eps = np.zeros(hello.shape)
        elif mode == "nan":
            eps = np.full(hello.shape, np.nan)
        elif mode == "wrong-shape":
            eps = np.zeros(int(np.prod(hello.shape)) + 1)
        elif mode == "bad-reply":
            protocol.write_frame(stdout, b"\x07")
            continue
        else:
            eps = analytic_predict_noise(prior, schedule, x_t.astype(np.float64), t)
        protocol.write_frame(stdout, protocol.encode_predict_response(eps))


@click.command()
@click.option("--mode", type=click.Choice(MODES), default="analytic", help="Peer behaviour")
@click.option("--prior-mean", type=float, default=0.5, help="Isotropic prior mean")
@click.option("--prior-var", type=float, default=0.01, help="Isotropic prior variance")
@click.option("--prior-mean-file", type=click.Path(exists=True), help="Prior mean tensor file")
@click.option("--prior-var-file", type=click.Path(exists=True), help="Prior variance tensor file")
def main(mode, prior_mean, prior_var, prior_mean_file, prior_var_file):
    """Serve noise predictions on stdin/stdout."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    try:
        code = serve(sys.stdin.buffer, sys.stdout.buffer, mode, prior_mean, prior_var,
                     prior_mean_file, prior_var_file)
    except NRLGError as e:
        logger.error(f"peer error: {e}")
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
