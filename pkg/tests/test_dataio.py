import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpillum.dataio import (
    PfmEndiannessError,
    PfmImage,
    PfmParseError,
    load_pfm,
    parse_pfm,
    read_image,
    rng_stream,
    save_pfm,
)
from dpillum.envmap import direction
from dpillum.sky import SkyParams, gen_corpus, gen_sky, load_corpus
from dpillum.tonemap import PRESETS


def test_round_trip_random(tmp_path):
    img = np.random.default_rng(0).standard_normal((16, 32, 3)).astype(np.float32)
    save_pfm(tmp_path / "a.pfm", img)
    back = load_pfm(tmp_path / "a.pfm").data
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, img)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.sampled_from([1, 3])),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_round_trip_any_finite_float(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pfm") / "x.pfm"
    save_pfm(p, img)
    back = load_pfm(p).data
    assert back.tobytes() == np.ascontiguousarray(img).tobytes()


def test_single_pixel_layout(tmp_path):
    save_pfm(tmp_path / "z.pfm", np.zeros((1, 1, 1), dtype=np.float32))
    raw = (tmp_path / "z.pfm").read_bytes()
    assert raw == b"Pf\n1 1\n-1.0\n" + b"\x00" * 4
    assert len(raw) == 12 + 4


def test_rows_are_stored_bottom_up(tmp_path):
    img = np.array([[[1.0]], [[2.0]]], dtype=np.float32)  # top row 1, bottom row 2
    save_pfm(tmp_path / "r.pfm", img)
    raw = (tmp_path / "r.pfm").read_bytes()
    assert struct.unpack("<2f", raw[-8:]) == (2.0, 1.0)


def test_big_endian_rejected():
    buf = b"PF\n1 1\n1.0\n" + b"\x00" * 12
    with pytest.raises(PfmEndiannessError):
        parse_pfm(buf)


@pytest.mark.parametrize("buf, offset", [
    (b"P6\n1 1\n-1.0\n", 0),
    (b"PF\n1 x\n-1.0\n", 3),
    (b"PF\n1 1\nabc\n", 7),
    (b"PF\n2 2\n-1.0\n" + b"\x00" * 10, 22),
])
def test_malformed_reports_offset(buf, offset):
    with pytest.raises(PfmParseError) as info:
        parse_pfm(buf)
    assert info.value.offset == offset
    assert f"offset {offset}" in str(info.value)


def test_image_validation():
    with pytest.raises(ValueError):
        PfmImage(np.zeros((2, 2, 2)))


def test_rng_streams():
    a = rng_stream(3, "x").random(5)
    np.testing.assert_array_equal(a, rng_stream(3, "x").random(5))
    assert not np.array_equal(a, rng_stream(3, "y").random(5))
    assert not np.array_equal(a, rng_stream(4, "x").random(5))
    with pytest.raises(ValueError):
        rng_stream(-1, "x")


# -- sky generator -----------------------------------------------------------------

def test_clear_sky_is_azimuthally_constant():
    env = gen_sky(SkyParams(sun_intensity=0.0, cloud_octaves=0), 16, 32)
    np.testing.assert_array_equal(env, np.repeat(env[:, :1], 32, axis=1))
    assert np.all(env >= 0)


@pytest.mark.parametrize("az, el", [(0.5, 0.3), (2.2, 0.9), (5.0, 0.1)])
def test_brightest_texel_is_in_sun(az, el):
    p = SkyParams(sun_azimuth=az, sun_elevation=el, sun_radius=0.25, sun_intensity=30.0)
    H, W = 16, 32
    env = gen_sky(p, H, W)
    i, j = np.unravel_index(np.argmax(env.sum(axis=2)), (H, W))
    d = direction(np.pi * (i + 0.5) / H, 2 * np.pi * (j + 0.5) / W)
    sun = direction(np.pi / 2 - el, az)
    ang = np.arccos(np.clip(d @ sun, -1, 1))
    texel = np.pi / H  # a texel's angular size
    assert ang <= p.sun_radius + texel


def test_sky_determinism_and_validation():
    p = SkyParams(seed=5)
    np.testing.assert_array_equal(gen_sky(p, 8, 16), gen_sky(p, 8, 16))
    with pytest.raises(ValueError):
        SkyParams(sun_intensity=-1)
    with pytest.raises(ValueError):
        SkyParams(sun_elevation=2.0)


def test_corpus(tmp_path):
    m = gen_corpus(7, 1, 8, 16, PRESETS["outdoor"], tmp_path / "a")
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["manifest.json", "sky_0000.pfm"]
    assert set(m) >= {"version", "seed", "tonemap", "maps", "corpus_median"}
    assert SkyParams.from_dict(m["maps"][0]["params"]).seed == m["maps"][0]["params"]["seed"]
    gen_corpus(7, 3, 8, 16, PRESETS["outdoor"], tmp_path / "b")
    gen_corpus(7, 3, 8, 16, PRESETS["outdoor"], tmp_path / "c")
    for name in ("manifest.json", "sky_0000.pfm", "sky_0002.pfm"):
        assert (tmp_path / "b" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    maps, manifest = load_corpus(tmp_path / "b")
    assert len(maps) == 3 and maps[0].shape == (8, 16, 3)
    values = np.concatenate([x.ravel() for x in maps])
    assert manifest["corpus_median"] == pytest.approx(float(np.median(values)))
    with pytest.raises(ValueError):
        gen_corpus(7, 0, 8, 16, PRESETS["outdoor"], tmp_path / "d")


def test_read_image_is_float64(tmp_path):
    save_pfm(tmp_path / "x.pfm", np.ones((2, 3, 3)))
    assert read_image(tmp_path / "x.pfm").dtype == np.float64
