"""Reference child process for the external classifier protocol.

Run as ``python -m renalwsi.stub_classifier``. It answers with the color
heuristic, or misbehaves on purpose when ``--fault`` is given so the bridge's
error handling can be exercised.
"""

import argparse
import json
import sys
import time

from .classifier import HeuristicColorClassifier, decode_patch_png
from .tiler import Patch, PatchCoord

FAULTS = ("none", "invalid-probs", "bad-id", "bad-type", "exit", "hang")


def serve(stdin, stdout, fault="none", fault_after=0):
    model = HeuristicColorClassifier()
    handled = 0
    for line in stdin:
        msg = json.loads(line)
        kind = msg.get("type")
        if kind == "hello":
            reply = {"type": "ready"}
        elif kind == "classify":
            pixels = decode_patch_png(msg["png_b64"])
            probs = [float(p) for p in model.classify(Patch(PatchCoord(0, 0), pixels, 1.0))]
            reply = {"type": "probs", "id": msg["id"], "probs": probs}
            if handled >= fault_after:
                if fault == "invalid-probs":
                    reply["probs"] = [0.8, 0.0, 0.0, 0.0, 0.0]
                elif fault == "bad-id":
                    reply["id"] = msg["id"] + 1
                elif fault == "bad-type":
                    reply["type"] = "logits"
                elif fault == "exit":
                    return 3
                elif fault == "hang":
                    time.sleep(3600)
            handled += 1
        else:
            reply = {"type": "error", "message": f"unknown message type {kind!r}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--fault", choices=FAULTS, default="none")
    parser.add_argument("--fault-after", type=int, default=0, help="answer this many patches correctly first")
    args = parser.parse_args(argv)
    return serve(sys.stdin, sys.stdout, args.fault, args.fault_after)


if __name__ == "__main__":
    sys.exit(main())
