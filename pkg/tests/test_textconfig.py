import numpy as np
import pytest
from hypothesis import given, strategies as st

from tendonarm.textconfig import ConfigError, check_keys, parse_file, parse_text


def test_sections_entries_and_lines():
    doc = parse_text("# head\n[a]\nx = 1\n\n[b c]\ny = 2 3   # trailing\n")
    assert [s.name for s in doc.sections] == ["a", "b c"]
    b = doc.require("b c")
    assert b.get("y").line == 6
    np.testing.assert_array_equal(b.vector("y", 2), [2.0, 3.0])
    assert doc.with_prefix("b")[0] is b


@pytest.mark.parametrize("text, line, fragment", [
    ("[a]\nnovalue\n", 2, "key = value"),
    ("x = 1\n", 1, "outside"),
    ("[a\n", 1, "section header"),
    ("[a]\n = 3\n", 2, "empty key"),
])
def test_syntax_errors_carry_line(text, line, fragment):
    with pytest.raises(ConfigError) as ei:
        parse_text(text, "f.cfg")
    assert ei.value.line == line
    assert fragment in str(ei.value)
    assert str(ei.value).startswith(f"f.cfg:{line}:")


def test_typed_getters_report_the_offending_line():
    sec = parse_text("[a]\nx = 1\nn = abc\nv = 1 2\nb = maybe\nf = inf\n").require("a")
    with pytest.raises(ConfigError, match="number") as ei:
        sec.float("n")
    assert ei.value.line == 3
    with pytest.raises(ConfigError, match="integer"):
        sec.int("n")
    with pytest.raises(ConfigError, match="3 values"):
        sec.vector("v", 3)
    with pytest.raises(ConfigError, match="boolean"):
        sec.bool("b")
    with pytest.raises(ConfigError, match="finite"):
        sec.float("f")
    assert sec.float("missing", 2.5) == 2.5
    with pytest.raises(ConfigError, match="missing key"):
        sec.float("missing")


def test_duplicates_and_unknown_keys():
    doc = parse_text("[a]\nx = 1\nx = 2\n[a]\n")
    with pytest.raises(ConfigError, match="duplicate key") as ei:
        doc.sections[0].get("x")
    assert ei.value.line == 3
    with pytest.raises(ConfigError, match="duplicate section"):
        doc.section("a")
    with pytest.raises(ConfigError, match="unknown key 'x'"):
        check_keys(doc.sections[0], {"y"})


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        parse_file("/nonexistent/x.cfg")


keys = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,8}", fullmatch=True)
values = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(st.dictionaries(keys, values, min_size=1, max_size=8))
def test_float_roundtrip(d):
    text = "[s]\n" + "".join(f"{k} = {v!r}\n" for k, v in d.items())
    sec = parse_text(text).require("s")
    for k, v in d.items():
        assert sec.float(k) == v
