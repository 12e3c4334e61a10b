import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icl_lista.errors import ConfigError, ParseError
from icl_lista.instances import (InstanceConfig, SparseInstance, derive_seed, deserialize_instance,
                                 instance_from_json, instance_to_json, restrict_columns,
                                 sample_batch, sample_instance, serialize_instance)


def test_desk_shapes_and_sparsity():
    inst = sample_instance(InstanceConfig(d=20, n_measurements=10, sparsity=3), seed=0)
    assert inst.X.shape == (10, 20)
    assert np.count_nonzero(inst.beta_star) == 3
    np.testing.assert_array_equal(inst.y, inst.X @ inst.beta_star)
    assert inst.y_query == inst.x_query @ inst.beta_star


def test_zero_sparsity_gives_zero_observations():
    inst = sample_instance(InstanceConfig(sparsity=0), seed=3)
    assert not inst.beta_star.any()
    assert not inst.y.any()


def test_same_seed_bit_identical():
    cfg = InstanceConfig()
    assert serialize_instance(sample_instance(cfg, 11)) == serialize_instance(sample_instance(cfg, 11))


def test_different_seeds_differ():
    cfg = InstanceConfig()
    assert sample_instance(cfg, 1) != sample_instance(cfg, 2)


@pytest.mark.parametrize("kwargs", [
    dict(sparsity=4, support_set=(0, 1, 2)),
    dict(sparsity=0, support_set=(0, 1)),
    dict(sparsity=21),
    dict(support_set=(0, 0, 1)),
    dict(support_set=(25,)),
    dict(x_variances=(1.0,) * 19),
    dict(x_variances=(0.0,) + (1.0,) * 19),
    dict(noise_std=-1.0),
    dict(d=0),
])
def test_invalid_configs_rejected(kwargs):
    with pytest.raises(ConfigError):
        InstanceConfig(**kwargs)


def test_support_respected():
    cfg = InstanceConfig(support_set=tuple(range(10)))
    for inst in sample_batch(cfg, 50, seed=5):
        assert np.all(np.flatnonzero(inst.beta_star) < 10)


def test_batch_elements_are_derived_instances():
    cfg = InstanceConfig()
    batch = sample_batch(cfg, 3, seed=9)
    assert batch[0] == sample_instance(cfg, derive_seed(9, 0))
    assert batch[2] == sample_instance(cfg, derive_seed(9, 2))
    assert not np.array_equal(batch[0].X, batch[1].X)
    assert not np.array_equal(batch[1].X, batch[2].X)


def test_batch_count_validated():
    with pytest.raises(ConfigError):
        sample_batch(InstanceConfig(), 0, seed=0)


def test_fixed_x_mode_shares_matrix():
    batch = sample_batch(InstanceConfig(), 5, seed=4, fixed_x=True)
    for inst in batch[1:]:
        np.testing.assert_array_equal(inst.X, batch[0].X)
    assert len({inst.beta_star.tobytes() for inst in batch}) == 5


def test_negative_index_streams_are_distinct():
    seeds = {derive_seed(0, i) for i in range(-5, 5)}
    assert len(seeds) == 10


def test_column_second_moments_match_variances():
    var = tuple(np.linspace(0.5, 3.0, 8))
    cfg = InstanceConfig(d=8, n_measurements=20000, sparsity=2, x_variances=var)
    X = sample_instance(cfg, seed=2).X
    np.testing.assert_allclose((X**2).mean(axis=0), var, rtol=0.05)
    assert cfg.sigma_d == pytest.approx(np.sqrt(0.5))


def test_noise_added_when_configured():
    inst = sample_instance(InstanceConfig(noise_std=0.1), seed=1)
    resid = inst.y - inst.X @ inst.beta_star
    assert 0 < np.abs(resid).max() < 1.0


def test_restrict_columns_zeroes_complement(rng):
    X = rng.standard_normal((4, 6))
    R = restrict_columns(X, [1, 3])
    np.testing.assert_array_equal(R[:, [1, 3]], X[:, [1, 3]])
    assert not R[:, [0, 2, 4, 5]].any()


def test_config_dict_round_trip():
    cfg = InstanceConfig(d=12, sparsity=2, support_set=(5, 1, 3), x_variances=(2.0,) * 12)
    assert InstanceConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.support_set == (1, 3, 5)
    with pytest.raises(ConfigError):
        InstanceConfig.from_dict({"bogus": 1})


# -- serialization ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), d=st.integers(1, 12), n=st.integers(1, 12), s=st.integers(0, 3))
def test_binary_round_trip(seed, d, n, s):
    cfg = InstanceConfig(d=d, n_measurements=n, sparsity=min(s, d))
    inst = sample_instance(cfg, seed)
    back = deserialize_instance(serialize_instance(inst))
    assert back == inst
    assert back.X.tobytes() == inst.X.tobytes()


def test_truncated_payload_rejected(desk_instance):
    payload = serialize_instance(desk_instance)
    with pytest.raises(ParseError) as exc:
        deserialize_instance(payload[:-3])
    assert exc.value.offset is not None
    with pytest.raises(ParseError):
        deserialize_instance(payload[:5])


def test_header_dimension_mismatch_rejected(desk_instance):
    payload = bytearray(serialize_instance(desk_instance))
    struct.pack_into("<I", payload, 6, desk_instance.d + 1)
    with pytest.raises(ParseError, match="does not match header"):
        deserialize_instance(bytes(payload))


def test_bad_magic_and_version(desk_instance):
    payload = serialize_instance(desk_instance)
    with pytest.raises(ParseError, match="magic"):
        deserialize_instance(b"XXXX" + payload[4:])
    with pytest.raises(ParseError, match="version"):
        deserialize_instance(payload[:4] + struct.pack("<H", 9) + payload[6:])


def test_sparsity_header_checked(desk_instance):
    payload = bytearray(serialize_instance(desk_instance))
    struct.pack_into("<I", payload, 14, 5)
    with pytest.raises(ParseError, match="sparsity"):
        deserialize_instance(bytes(payload))


def test_json_round_trip(desk_instance):
    text = instance_to_json(desk_instance)
    assert set(json.loads(text)) == {"d", "n", "s", "x", "beta_star", "y", "x_query", "y_query"}
    assert instance_from_json(text) == desk_instance


def test_json_malformed():
    with pytest.raises(ParseError):
        instance_from_json("{not json")
    with pytest.raises(ParseError):
        instance_from_json(json.dumps({"d": 2, "n": 1, "x": [[1, 2]], "beta_star": [1],
                                       "y": [1], "x_query": [1, 2], "y_query": 0}))


def test_instance_properties(desk_instance):
    assert desk_instance.X_tilde.shape == (11, 20)
    assert desk_instance.y_tilde[-1] == desk_instance.y_query
    assert isinstance(desk_instance, SparseInstance)
    assert desk_instance.sparsity == 3
