"""Zero-weight packing and the packed stream format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zskp import netmodel, packer
from zskp.packer import (
    FormatError,
    PackedEntry,
    PackedWeightTile,
    PackError,
    deserialize_layer,
    deserialize_network,
    kernel_to_tile,
    pack_layer,
    pack_network,
    pack_tile,
    serialize_layer,
    serialize_network,
    serialize_tile,
    unpack_tile,
)

tiles_strategy = st.lists(st.integers(-127, 127), min_size=16, max_size=16).map(
    lambda v: np.array(v, dtype=np.int16).reshape(4, 4)
)


class TestPackTile:
    def test_all_zero(self):
        assert pack_tile(np.zeros((4, 4))).entries == ()

    def test_fully_dense(self):
        p = pack_tile(np.ones((4, 4)))
        assert [e.offset for e in p.entries] == list(range(16))

    def test_dense_3x3_offsets(self):
        # independent enumeration of offsets 4i+j for i, j in 0..2
        want = sorted(4 * i + j for i in range(3) for j in range(3))
        assert want == [0, 1, 2, 4, 5, 6, 8, 9, 10]
        p = pack_tile(kernel_to_tile(np.ones((3, 3))))
        assert [e.offset for e in p.entries] == want

    def test_kernel_embedding_zeroes_outside_support(self):
        t = kernel_to_tile(np.full((2, 2), 3))
        assert t[0, 1] == 3 and t[0, 2] == 0 and t[2, 0] == 0

    def test_oversized_kernel_rejected(self):
        with pytest.raises(PackError):
            kernel_to_tile(np.ones((5, 5)))


class TestUnpackTile:
    def test_empty(self):
        assert np.count_nonzero(unpack_tile(PackedWeightTile(()))) == 0

    @given(tiles_strategy)
    @settings(max_examples=200)
    def test_roundtrip(self, tile):
        assert np.array_equal(unpack_tile(pack_tile(tile)), tile)

    def test_duplicate_offset_rejected(self):
        with pytest.raises(FormatError):
            PackedWeightTile((PackedEntry(3, 1), PackedEntry(3, 2)))

    def test_descending_offsets_rejected(self):
        with pytest.raises(FormatError):
            PackedWeightTile((PackedEntry(5, 1), PackedEntry(2, 2)))

    def test_zero_weight_rejected(self):
        with pytest.raises(FormatError):
            PackedEntry(0, 0)


class TestGroups:
    def test_group_cycles_floor(self, rng):
        w = np.zeros((4, 1, 3, 3), dtype=np.int16)
        w[0, 0, 0, 0] = 1
        pl = pack_layer(w)
        assert pl.groups[0].cycles == 4

    def test_dense_3x3_group_cycles(self):
        w = np.ones((4, 1, 3, 3), dtype=np.int16)
        pl = pack_layer(w)
        assert len(pl.groups) == 1
        assert pl.groups[0].cycles == 9
        assert pl.groups[0].entry_count == 36

    def test_cycles_max_rule(self, rng):
        for _ in range(50):
            w = np.where(
                rng.random((4, 2, 4, 4)) < 0.5, rng.integers(1, 127, (4, 2, 4, 4)), 0
            ).astype(np.int16)
            pl = pack_layer(w)
            for g in pl.groups:
                nnz = [np.count_nonzero(w[4 * g.filter_group + s, g.channel]) for s in range(4)]
                assert g.cycles == max(4, max(nnz))

    def test_padding_to_multiple_of_four(self):
        w = np.ones((5, 2, 3, 3), dtype=np.int16)
        pl = pack_layer(w)
        assert pl.out_channels == 8
        assert len(pl.groups) == 2 * 2  # 2 filter groups x 2 channels
        last = pl.group(1, 0)
        assert last.tiles[0].nnz == 9  # filter 4 is real
        assert all(t.nnz == 0 for t in last.tiles[1:])  # filters 5..7 padded

    def test_pack_order(self):
        w = np.ones((8, 3, 1, 1), dtype=np.int16)
        pl = pack_layer(w)
        keys = [(g.filter_group, g.channel) for g in pl.groups]
        assert keys == [(fg, c) for fg in range(2) for c in range(3)]

    def test_unquantized_rejected(self):
        with pytest.raises(PackError):
            pack_layer(np.ones((1, 1, 3, 3), dtype=np.float32))

    def test_dense_vgg_layer_all_groups_nine(self, rng):
        m = netmodel.NetworkModel(
            (8, 8, 8),
            [netmodel.ConvLayer("c", 8, 8, 3)],
            {"c": rng.uniform(0.5, 1.0, size=(8, 8, 3, 3)).astype(np.float32)},
        )
        packed = pack_network(netmodel.quantize_network(m))
        assert all(g.cycles == 9 for g in packed["c"].groups)

    def test_total_entries_equals_nonzero(self, rng):
        w = rng.normal(size=(6, 3, 3, 3)).astype(np.float32)
        m = netmodel.NetworkModel((3, 8, 8), [netmodel.ConvLayer("c", 3, 6, 3)], {"c": w})
        pruned, rep = netmodel.prune_magnitude(m, threshold=0.7)
        q = netmodel.quantize_network(pruned)
        packed = pack_network(q)
        assert packed["c"].total_entries == rep.per_layer["c"].nonzero

    def test_nnz_matrix(self):
        w = np.zeros((4, 2, 3, 3), dtype=np.int16)
        w[1, 0, :2, :2] = 5
        pl = pack_layer(w)
        nnz = pl.nnz_matrix()
        assert nnz.shape == (4, 2)
        assert nnz[1, 0] == 4 and nnz.sum() == 4


class TestSerialization:
    def test_empty_tile_is_count_byte(self):
        assert serialize_tile(PackedWeightTile(())) == b"\x00"

    def test_entry_bytes(self):
        t = PackedWeightTile((PackedEntry(5, -34),))
        assert serialize_tile(t) == bytes([0x01, 0x05, 0xA2])

    def test_layer_header(self):
        pl = pack_layer(np.ones((1, 1, 1, 1), dtype=np.int16), layer_index=7)
        data = serialize_layer(pl)
        assert data[:4] == b"ZSKP"
        assert data[4] == 1
        assert data[5:9] == (7).to_bytes(4, "little")

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            deserialize_layer(b"NOPE" + bytes(10), 1, 1)

    def test_truncated(self):
        pl = pack_layer(np.ones((4, 2, 3, 3), dtype=np.int16))
        data = serialize_layer(pl)
        with pytest.raises(FormatError, match="truncated"):
            deserialize_layer(data[:-1], 2, 4)

    def test_count_over_16_rejected(self):
        data = b"ZSKP" + bytes([1]) + (0).to_bytes(4, "little") + bytes([17])
        with pytest.raises(FormatError, match="16"):
            deserialize_layer(data, 1, 4)

    def test_trailing_bytes_rejected(self):
        pl = pack_layer(np.ones((4, 1, 1, 1), dtype=np.int16))
        data = serialize_layer(pl) + b"x"
        with pytest.raises(FormatError, match="trailing"):
            deserialize_layer(data, 1, 4)

    def test_roundtrip_random(self, rng):
        for _ in range(50):
            f = int(rng.integers(1, 9))
            c = int(rng.integers(1, 5))
            k = int(rng.integers(1, 5))
            w = np.where(
                rng.random((f, c, k, k)) < 0.6, rng.integers(-127, 128, (f, c, k, k)), 0
            ).astype(np.int16)
            pl = pack_layer(w, layer_index=int(rng.integers(0, 100)))
            data = serialize_layer(pl)
            pl2 = deserialize_layer(data, c, f)
            assert serialize_layer(pl2) == data
            assert pl2.groups == pl.groups
            assert pl2.layer_index == pl.layer_index

    def test_network_container_roundtrip(self, rng):
        m = netmodel.NetworkModel(
            (2, 8, 8),
            [
                netmodel.ConvLayer("a", 2, 3, 3),
                netmodel.PadLayer("p", 1),
                netmodel.ConvLayer("b", 3, 5, 2),
            ],
            {
                "a": rng.normal(size=(3, 2, 3, 3)).astype(np.float32),
                "b": rng.normal(size=(5, 3, 2, 2)).astype(np.float32),
            },
        )
        packed = pack_network(netmodel.quantize_network(m))
        blob = serialize_network(packed)
        back = deserialize_network(blob)
        assert set(back) == {"a", "b"}
        assert serialize_network(back) == blob

    def test_unpack_then_dense_conv_equals_original(self, rng):
        # packing loses nothing the convolution can see
        from zskp.numerics import LayerQuant
        from zskp.oracle import conv2d_ref

        w = np.where(
            rng.random((4, 2, 3, 3)) < 0.5, rng.integers(-30, 31, (4, 2, 3, 3)), 0
        ).astype(np.int16)
        pl = pack_layer(w)
        rebuilt = np.zeros_like(w)
        for g in pl.groups:
            for s in range(4):
                f = 4 * g.filter_group + s
                if f < 4:
                    rebuilt[f, g.channel] = unpack_tile(g.tiles[s])[:3, :3]
        x = rng.integers(-20, 21, size=(2, 6, 6)).astype(np.int16)
        q = LayerQuant(1.0, 2, False)
        assert np.array_equal(conv2d_ref(x, rebuilt, None, q), conv2d_ref(x, w, None, q))
