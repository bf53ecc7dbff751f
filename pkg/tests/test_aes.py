"""Cipher correctness against published vectors and a library oracle."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evictleak import aes

# FIPS-197 appendix C: key/plaintext/ciphertext triples.
VECTORS = [
    ("000102030405060708090a0b0c0d0e0f",
     "00112233445566778899aabbccddeeff",
     "69c4e0d86a7b0430d8cdb78070b4c55a"),
    ("000102030405060708090a0b0c0d0e0f1011121314151617",
     "00112233445566778899aabbccddeeff",
     "dda97ca4864cdfe06eaf70a0ec0d7191"),
    ("000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f",
     "00112233445566778899aabbccddeeff",
     "8ea2b7ca516745bfeafc49904b496089"),
]


@pytest.mark.parametrize("key,plain,cipher", VECTORS)
def test_published_cipher_vectors(key, plain, cipher):
    key, plain, cipher = (bytes.fromhex(s) for s in (key, plain, cipher))
    assert aes.encrypt_block(key, plain) == cipher
    assert aes.decrypt_block(key, cipher) == plain


def test_expansion_golden_first_and_last_words():
    # FIPS-197 appendix A.1.
    key = bytes.fromhex("2b7e151628aed2a6abf7158809cf4f3c")
    words = list(aes.expanded_words(key))
    assert len(words) == 44
    assert words[4] == bytes.fromhex("a0fafe17")
    assert words[9] == bytes.fromhex("7a96b943")
    assert words[10] == bytes.fromhex("5935807a")
    assert words[43] == bytes.fromhex("b6630ca6")
    schedule = aes.expand_key(key)
    assert len(schedule) == aes.SCHEDULE_BYTES[16] == 176
    assert schedule[:16] == key
    assert schedule[-4:] == (0xB6630CA6).to_bytes(4, "big")


def test_schedule_sizes():
    assert aes.SCHEDULE_BYTES == {16: 176, 24: 208, 32: 240}
    for key_bytes, total in aes.SCHEDULE_BYTES.items():
        assert len(aes.expand_key(bytes(key_bytes))) == total


def test_rejects_bad_key_and_block_lengths():
    with pytest.raises(ValueError):
        aes.expand_key(bytes(15))
    with pytest.raises(ValueError):
        aes.encrypt_block(bytes(16), bytes(15))
    with pytest.raises(ValueError):
        aes.decrypt_block(bytes(16), bytes(17))


def test_sbox_tables_are_inverse_permutations():
    assert sorted(aes.SBOX) == list(range(256))
    assert all(aes.INV_SBOX[aes.SBOX[x]] == x for x in range(256))


@settings(max_examples=60, deadline=None)
@given(key=st.binary(min_size=16, max_size=16) | st.binary(min_size=24, max_size=24)
       | st.binary(min_size=32, max_size=32),
       block=st.binary(min_size=16, max_size=16))
def test_decrypt_inverts_encrypt(key, block):
    assert aes.decrypt_block(key, aes.encrypt_block(key, block)) == block


@settings(max_examples=40, deadline=None)
@given(key=st.binary(min_size=16, max_size=16),
       block=st.binary(min_size=16, max_size=16))
def test_matches_library_cipher(key, block):
    ciphers = pytest.importorskip("cryptography.hazmat.primitives.ciphers")
    cipher = ciphers.Cipher(ciphers.algorithms.AES(key), ciphers.modes.ECB())
    enc = cipher.encryptor()
    assert aes.encrypt_block(key, block) == enc.update(block) + enc.finalize()
