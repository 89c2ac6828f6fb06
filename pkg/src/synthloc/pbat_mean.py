"""Reference external scorer: answers a PBAT v1 request with each patch's mean pixel value.

Usage: python -m synthloc.pbat_mean REQUEST RESPONSE
"""

import sys
from pathlib import Path

from .scoring import decode_request, encode_response


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 2:
        print(__doc__, file=sys.stderr)
        return 2
    patches = decode_request(Path(args[0]).read_bytes())
    means = patches.reshape(len(patches), -1).mean(axis=1) if len(patches) else patches.reshape(0)
    Path(args[1]).write_bytes(encode_response(means))
    return 0


if __name__ == "__main__":
    sys.exit(main())
