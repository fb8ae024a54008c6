"""Line-JSON request loop shared by the model workers.

Each request is one JSON object per line on stdin; each reply is one JSON
object per line on stdout with "ok" set. Anything a model library prints goes
to stderr so it cannot corrupt the reply stream.
"""

import json
import sys
import traceback


def serve(handlers):
    out = sys.stdout
    sys.stdout = sys.stderr
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            op = request.get("op")
            if op == "shutdown":
                break
            if op not in handlers:
                raise ValueError(f"unknown op {op!r}")
            reply = handlers[op](request) or {}
            reply["ok"] = True
        except Exception as e:  # reported to the parent, which decides
            traceback.print_exc(file=sys.stderr)
            reply = {"ok": False, "error": f"{type(e).__name__}: {e}"}
        out.write(json.dumps(reply) + "\n")
        out.flush()


def device(options):
    import torch

    wanted = options.get("device")
    if wanted:
        return torch.device(wanted)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
