import json
import re
import sys

for line in sys.stdin:
    text = json.loads(line)["text"]
    data = text.encode("utf-8")
    offsets = [[m.start(), m.end()] for m in re.finditer(rb"\S+", data)]
    sys.stdout.write(json.dumps({"count": len(offsets), "offsets": offsets}) + "\n")
    sys.stdout.flush()
