"""Independent reference implementations used to freeze and cross-check values.

Nothing here imports the package under test.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import subprocess
from pathlib import Path
from typing import Any

# -- canonical JSON ----------------------------------------------------------------

_SHORT_ESCAPES = {'"': '\\"', "\\": "\\\\", "\b": "\\b", "\f": "\\f", "\n": "\\n", "\r": "\\r", "\t": "\\t"}


def _string(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch in _SHORT_ESCAPES:
            out.append(_SHORT_ESCAPES[ch])
        elif ord(ch) < 0x20:
            out.append("\\u%04x" % ord(ch))
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def canonical_text(doc: Any) -> str:
    """Sorted keys by codepoint, no whitespace, minimal escaping, integers only."""
    if doc is None:
        return "null"
    if doc is True:
        return "true"
    if doc is False:
        return "false"
    if isinstance(doc, int):
        return str(doc)
    if isinstance(doc, str):
        return _string(doc)
    if isinstance(doc, (list, tuple)):
        return "[" + ",".join(canonical_text(x) for x in doc) + "]"
    if isinstance(doc, dict):
        keys = sorted(doc, key=lambda k: [ord(c) for c in k])
        return "{" + ",".join(_string(k) + ":" + canonical_text(doc[k]) for k in keys) + "}"
    raise TypeError(f"oracle cannot encode {type(doc).__name__}")


def canonical_bytes(doc: Any) -> bytes:
    return canonical_text(doc).encode("utf-8")


def sha256sum(data: bytes) -> str:
    """Digest from the coreutils binary when present, hashlib otherwise."""
    exe = shutil.which("sha256sum")
    if exe is None:
        return hashlib.sha256(data).hexdigest()
    out = subprocess.run([exe], input=data, capture_output=True, check=True).stdout
    return out.split()[0].decode()


def sha256sum_many(blobs: list[bytes]) -> list[str]:
    """Hash many blobs with one sha256sum process (one file per blob)."""
    import tempfile

    exe = shutil.which("sha256sum")
    if exe is None:
        return [hashlib.sha256(b).hexdigest() for b in blobs]
    with tempfile.TemporaryDirectory() as tmp:
        paths = []
        for i, b in enumerate(blobs):
            p = Path(tmp) / f"{i:05d}.json"
            p.write_bytes(b)
            paths.append(str(p))
        out = subprocess.run([exe, *paths], capture_output=True, check=True).stdout.decode()
    return [line.split()[0] for line in out.splitlines()]


NODE_CANONICAL = r"""
const fs = require('fs');
const cps = s => Array.from(s).map(c => c.codePointAt(0));
function cmp(a, b) {
  const x = cps(a), y = cps(b);
  for (let i = 0; i < Math.min(x.length, y.length); i++) if (x[i] !== y[i]) return x[i] - y[i];
  return x.length - y.length;
}
function canon(v) {
  if (v === null || typeof v !== 'object') return JSON.stringify(v);
  if (Array.isArray(v)) return '[' + v.map(canon).join(',') + ']';
  return '{' + Object.keys(v).sort(cmp).map(k => JSON.stringify(k) + ':' + canon(v[k])).join(',') + '}';
}
const docs = JSON.parse(fs.readFileSync(0, 'utf8'));
process.stdout.write(JSON.stringify(docs.map(d => require('crypto').createHash('sha256').update(canon(d), 'utf8').digest('hex'))));
"""


def node_hashes(docs: list[Any]) -> list[str] | None:
    """SHA-256 of each document canonicalized by node, or None without node."""
    exe = shutil.which("node")
    if exe is None:
        return None
    proc = subprocess.run([exe, "-e", NODE_CANONICAL], input=json.dumps(docs).encode(), capture_output=True, check=True)
    return json.loads(proc.stdout)


# -- Ed25519 public key derivation (RFC 8032) ---------------------------

_P = 2**255 - 19
_L = 2**252 + 27742317777372353535851937790883648493
_D = (-121665 * pow(121666, _P - 2, _P)) % _P
_I = pow(2, (_P - 1) // 4, _P)


def _recover_x(y: int, sign: int) -> int:
    x2 = (y * y - 1) * pow(_D * y * y + 1, _P - 2, _P)
    x = pow(x2, (_P + 3) // 8, _P)
    if (x * x - x2) % _P != 0:
        x = x * _I % _P
    if x & 1 != sign:
        x = _P - x
    return x


_BY = 4 * pow(5, _P - 2, _P) % _P
_B = (_recover_x(_BY, 0), _BY, 1, _recover_x(_BY, 0) * _BY % _P)


def _add(p, q):
    x1, y1, z1, t1 = p
    x2, y2, z2, t2 = q
    a = (y1 - x1) * (y2 - x2) % _P
    b = (y1 + x1) * (y2 + x2) % _P
    c = 2 * t1 * t2 * _D % _P
    d = 2 * z1 * z2 % _P
    e, f, g, h = b - a, d - c, d + c, b + a
    return (e * f % _P, g * h % _P, f * g % _P, e * h % _P)


def _mul(s: int, p):
    q = (0, 1, 1, 0)
    while s > 0:
        if s & 1:
            q = _add(q, p)
        p = _add(p, p)
        s >>= 1
    return q


def ed25519_public_key(secret: bytes) -> bytes:
    h = hashlib.sha512(secret).digest()
    a = int.from_bytes(h[:32], "little")
    a &= (1 << 254) - 8
    a |= 1 << 254
    x, y, z, _ = _mul(a, _B)
    zi = pow(z, _P - 2, _P)
    x, y = x * zi % _P, y * zi % _P
    return (y | ((x & 1) << 255)).to_bytes(32, "little")


def account_address(seed: bytes) -> str:
    """Address for an account seed: secret = sha256(seed), address = sha256(pubkey)[:20]."""
    pub = ed25519_public_key(hashlib.sha256(seed).digest())
    return "0x" + hashlib.sha256(pub).digest()[:20].hex()


# -- chain journal -------------------------------------------------------------------


def count_journal_events(path: Path) -> dict[str, int]:
    """Count contract events per type straight from the chain journal file."""
    counts: dict[str, int] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        for receipt in record.get("receipts", []):
            for event in receipt["events"]:
                counts[event["event_type"]] = counts.get(event["event_type"], 0) + 1
    return counts


# -- interpreter hand-trace ------------------------------------------------------------


def expected_states(n_records: int) -> int:
    """Receive Messages, then three task states per record."""
    return 1 + 3 * n_records


def expected_transitions(n_records: int) -> int:
    """One fan-out per record, two in-iteration edges per record, one join if any ran."""
    return n_records + 2 * n_records + (1 if n_records else 0)
