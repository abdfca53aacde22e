import pytest
from hypothesis import given
from hypothesis import strategies as st

from rdmasim.gid import GID_LEN, Gid


def test_text_form():
    gid = Gid(bytes(range(16)))
    assert gid.text == "00:01:02:03:04:05:06:07:08:09:0a:0b:0c:0d:0e:0f"


@given(st.binary(min_size=GID_LEN, max_size=GID_LEN))
def test_text_round_trip(raw):
    gid = Gid(raw)
    assert Gid.from_text(gid.text) == gid


@pytest.mark.parametrize("bad", [b"", b"\x00" * 15, b"\x00" * 17])
def test_wrong_length_rejected(bad):
    with pytest.raises(ValueError):
        Gid(bad)


@pytest.mark.parametrize("text", [
    "00:01",
    "zz:" + ":".join(["00"] * 15),
    "000:" + ":".join(["00"] * 15),
])
def test_malformed_text_rejected(text):
    with pytest.raises(ValueError):
        Gid.from_text(text)


def test_host_gids_are_distinct():
    gids = {Gid.for_host(i) for i in range(64)}
    assert len(gids) == 64
