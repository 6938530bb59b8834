"""Minimal external agent for the protocol tests.

usage: echo_agent.py MODE [LOGFILE]

zeros      answer every observation with (0, 0)
log        like zeros, and append each received observation to LOGFILE as JSON
garbage    answer the first observation with a non-JSON line
silent     never answer an observation
exit       exit right after the handshake
"""

import json
import sys


def main() -> None:
    mode = sys.argv[1]
    log = open(sys.argv[2], "a") if mode == "log" else None
    for line in sys.stdin:
        msg = json.loads(line)
        if msg["type"] == "hello":
            print(json.dumps({"type": "ready"}), flush=True)
            if mode == "exit":
                return
        elif msg["type"] == "obs":
            if mode == "garbage":
                print("this is not json", flush=True)
                continue
            if mode == "silent":
                continue
            if log is not None:
                log.write(json.dumps(msg["data"]) + "\n")
                log.flush()
            print(json.dumps({"type": "act", "tick": msg["tick"], "u": [0.0, 0.0]}), flush=True)
        elif msg["type"] == "close":
            break


if __name__ == "__main__":
    main()
