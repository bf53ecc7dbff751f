"""Minimal AES (128/192/256): key schedule, single-block ECB.

Only what the victims and the schedule locator need — no modes, no
padding, no timing hygiene. The schedule generator is the part that
matters: the locator scores millions of candidate windows and must be
able to bail out after the first few expanded words.
"""

from __future__ import annotations

from typing import Iterator

__all__ = [
    "SCHEDULE_BYTES", "expand_key", "expanded_words",
    "encrypt_block", "decrypt_block",
]

SBOX = bytes.fromhex(
    "637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0"
    "b7fd9326363ff7cc34a5e5f171d8311504c723c31896059a071280e2eb27b275"
    "09832c1a1b6e5aa0523bd6b329e32f8453d100ed20fcb15b6acbbe394a4c58cf"
    "d0efaafb434d338545f9027f503c9fa851a3408f929d38f5bcb6da2110fff3d2"
    "cd0c13ec5f974417c4a77e3d645d197360814fdc222a908846eeb814de5e0bdb"
    "e0323a0a4906245cc2d3ac629195e479e7c8376d8dd54ea96c56f4ea657aae08"
    "ba78252e1ca6b4c6e8dd741f4bbd8b8a703eb5664803f60e613557b986c11d9e"
    "e1f8981169d98e949b1e87e9ce5528df8ca1890dbfe6426841992d0fb054bb16"
)
INV_SBOX = bytes(256)
_inv = bytearray(256)
for _i, _v in enumerate(SBOX):
    _inv[_v] = _i
INV_SBOX = bytes(_inv)

RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)

SCHEDULE_BYTES = {16: 176, 24: 208, 32: 240}
_ROUNDS = {16: 10, 24: 12, 32: 14}


def expanded_words(key: bytes) -> Iterator[bytes]:
    """Yield the key schedule one 4-byte word at a time, key words first.

    Lazy on purpose: a consumer comparing the schedule against observed
    bytes can stop after a handful of words instead of paying for the
    whole expansion.
    """
    nk = len(key) // 4
    if len(key) not in SCHEDULE_BYTES:
        raise ValueError("key must be 16, 24 or 32 bytes")
    total_words = SCHEDULE_BYTES[len(key)] // 4
    words = [key[4 * i:4 * i + 4] for i in range(nk)]
    yield from words
    sbox = SBOX
    for i in range(nk, total_words):
        temp = words[i - 1]
        if i % nk == 0:
            temp = bytes((
                sbox[temp[1]] ^ RCON[i // nk - 1],
                sbox[temp[2]],
                sbox[temp[3]],
                sbox[temp[0]],
            ))
        elif nk == 8 and i % nk == 4:
            temp = bytes((sbox[temp[0]], sbox[temp[1]],
                          sbox[temp[2]], sbox[temp[3]]))
        prev = words[i - nk]
        word = bytes((prev[0] ^ temp[0], prev[1] ^ temp[1],
                      prev[2] ^ temp[2], prev[3] ^ temp[3]))
        words.append(word)
        yield word


def expand_key(key: bytes) -> bytes:
    """Full expanded schedule: 176/208/240 bytes for AES-128/192/256."""
    return b"".join(expanded_words(key))


def _xtime(a: int) -> int:
    a <<= 1
    if a & 0x100:
        a ^= 0x11B
    return a


def _mul(a: int, b: int) -> int:
    out = 0
    while b:
        if b & 1:
            out ^= a
        a = _xtime(a)
        b >>= 1
    return out


def _add_round_key(state: bytearray, rk: bytes) -> None:
    for i in range(16):
        state[i] ^= rk[i]


def _sub_shift(state: bytearray, box: bytes, inverse: bool) -> None:
    for i in range(16):
        state[i] = box[state[i]]
    s = list(state)
    for row in range(1, 4):
        shift = -row if inverse else row
        for col in range(4):
            state[row + 4 * col] = s[row + 4 * ((col + shift) % 4)]


def _mix_columns(state: bytearray, inverse: bool) -> None:
    coef = (14, 11, 13, 9) if inverse else (2, 3, 1, 1)
    for col in range(4):
        a = state[4 * col:4 * col + 4]
        for row in range(4):
            state[4 * col + row] = (
                _mul(a[0], coef[(4 - row) % 4]) ^ _mul(a[1], coef[(5 - row) % 4])
                ^ _mul(a[2], coef[(6 - row) % 4]) ^ _mul(a[3], coef[(7 - row) % 4])
            )


def encrypt_block(key: bytes, block: bytes) -> bytes:
    if len(block) != 16:
        raise ValueError("block must be 16 bytes")
    schedule = expand_key(key)
    rounds = _ROUNDS[len(key)]
    state = bytearray(block)
    _add_round_key(state, schedule[:16])
    for rnd in range(1, rounds):
        _sub_shift(state, SBOX, inverse=False)
        _mix_columns(state, inverse=False)
        _add_round_key(state, schedule[16 * rnd:16 * rnd + 16])
    _sub_shift(state, SBOX, inverse=False)
    _add_round_key(state, schedule[16 * rounds:16 * rounds + 16])
    return bytes(state)


def decrypt_block(key: bytes, block: bytes) -> bytes:
    if len(block) != 16:
        raise ValueError("block must be 16 bytes")
    schedule = expand_key(key)
    rounds = _ROUNDS[len(key)]
    state = bytearray(block)
    _add_round_key(state, schedule[16 * rounds:16 * rounds + 16])
    for rnd in range(rounds - 1, 0, -1):
        _sub_shift(state, INV_SBOX, inverse=True)
        _add_round_key(state, schedule[16 * rnd:16 * rnd + 16])
        _mix_columns(state, inverse=True)
    _sub_shift(state, INV_SBOX, inverse=True)
    _add_round_key(state, schedule[:16])
    return bytes(state)
