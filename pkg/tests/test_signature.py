import pytest

from opdiff.errors import ArityMismatch, IndexOutOfRange, ShapeMismatch
from opdiff.signature import FunctionSignature, check_compose, nabla_signature, parse_signature

S = parse_signature


def test_render_and_parse_round_trip():
    for text in ["F[f[],f[]]", "F[f[],f[3],f[2,3]]", "F[f[2,3],f[3]]"]:
        assert str(S(text)) == text


def test_of_constructor():
    sig = FunctionSignature.of((2,), (3,), ())
    assert str(sig) == "F[f[2],f[3],f[]]"
    assert sig.arity == 2
    assert sig.ret == (2,)


def test_compose_substitutes_inner_arguments():
    assert str(check_compose(S("F[f[],f[3]]"), [S("F[f[3],f[2]]")])) == "F[f[],f[2]]"


def test_compose_binary_pointwise():
    out = check_compose(S("F[f[],f[],f[]]"), [S("F[f[],f[5]]"), S("F[f[],f[5]]")])
    assert str(out) == "F[f[],f[5]]"


def test_compose_shape_mismatch_names_slot():
    with pytest.raises(ShapeMismatch, match="0"):
        check_compose(S("F[f[],f[3]]"), [S("F[f[2],f[4]]")])


def test_compose_arity_mismatch():
    with pytest.raises(ArityMismatch):
        check_compose(S("F[f[],f[],f[]]"), [S("F[f[],f[]]")])


def test_compose_inners_must_share_arguments():
    with pytest.raises(ShapeMismatch):
        check_compose(S("F[f[],f[],f[]]"), [S("F[f[],f[]]"), S("F[f[],f[2]]")])


def test_compose_with_identity_keeps_signature():
    f = S("F[f[2],f[3]]")
    ident = S("F[f[3],f[3]]")
    assert check_compose(f, [ident]) == f


@pytest.mark.parametrize("sig, argnum, expected", [
    ("F[f[],f[3]]", 0, "F[f[3],f[3]]"),
    ("F[f[],f[]]", 0, "F[f[],f[]]"),
    ("F[f[2],f[3]]", 0, "F[f[2,3],f[3]]"),
    ("F[f[],f[],f[4]]", 1, "F[f[4],f[],f[4]]"),
])
def test_nabla_signature(sig, argnum, expected):
    assert str(nabla_signature(S(sig), argnum)) == expected


def test_nabla_twice_appends_twice():
    s = nabla_signature(nabla_signature(S("F[f[],f[3]]"), 0), 0)
    assert str(s) == "F[f[3,3],f[3]]"


def test_nabla_signature_bad_index():
    with pytest.raises(IndexOutOfRange):
        nabla_signature(S("F[f[],f[]]"), 1)


def test_rejects_negative_dims():
    with pytest.raises(ShapeMismatch):
        FunctionSignature.of((-1,), ())


def test_parse_rejects_garbage():
    with pytest.raises(ShapeMismatch):
        parse_signature("G[f[]]")
