import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from stcl.encoder import ToyEncoder
from stcl.formats import (
    EmbeddingSet,
    FormatError,
    ids_path,
    load_areas,
    load_checkpoint,
    load_embeddings,
    load_manifest,
    load_metadata,
    load_tensor,
    save_areas,
    save_checkpoint,
    save_embeddings,
    save_manifest,
    save_metadata,
    save_tensor,
    sidecar_path,
)
from stcl.pairs import mine_temporal_pairs
from stcl.synth import SynthConfig, generate_city

HEADER = "id,lat,lon,heading_deg,capture_year,capture_month,city,area_id\n"


class TestMetadata:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + "a,41.1,-87.6,90,2018,6,chicago,A\nb,41.2,-87.5,0,2019,1,chicago,\nc,0,0,359.5,2020,12,x,B\n")
        recs = load_metadata(p)
        assert [r.id for r in recs] == ["a", "b", "c"]
        assert recs[1].area_id is None and recs[0].capture_time == (2018, 6)

    def test_heading_360_names_row(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(HEADER + "a,41.1,-87.6,90,2018,6,c,\nb,41.1,-87.6,360.0,2018,6,c,\n")
        with pytest.raises(FormatError, match="row 3"):
            load_metadata(p)

    def test_bad_header_and_duplicates(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("id,lat\n")
        with pytest.raises(FormatError, match="row 1"):
            load_metadata(p)
        p.write_text(HEADER + "a,0,0,0,2018,1,c,\na,1,1,0,2018,1,c,\n")
        with pytest.raises(FormatError, match="duplicate"):
            load_metadata(p)
        p.write_text(HEADER + "a,95,0,0,2018,1,c,\n")
        with pytest.raises(FormatError, match="row 2"):
            load_metadata(p)

    def test_round_trip(self, tmp_path):
        recs = generate_city(SynthConfig(n_areas=2, locations_per_area=3)).records
        save_metadata(recs, tmp_path / "m.csv")
        assert load_metadata(tmp_path / "m.csv") == recs

    def test_areas_round_trip(self, tmp_path):
        areas = generate_city(SynthConfig(n_areas=2, locations_per_area=2)).areas
        save_areas(areas, tmp_path / "a.json")
        assert load_areas(tmp_path / "a.json").polygons == areas.polygons
        (tmp_path / "bad.json").write_text('{"areas": [{"id": "z", "ring": [[0, 0], [1, 1]]}]}')
        with pytest.raises(ValueError, match="z"):
            load_areas(tmp_path / "bad.json")


class TestEmbeddings:
    def test_bitwise_round_trip(self, tmp_path, rng):
        emb = EmbeddingSet([f"r{i}" for i in range(10)], rng.normal(size=(10, 8)))
        save_embeddings(emb, tmp_path / "a.emb")
        raw = (tmp_path / "a.emb").read_bytes()
        assert len(raw) == 16 + 4 * 80 and raw[:8] == b"STCLEMB1" and struct.unpack("<II", raw[8:16]) == (10, 8)
        loaded = load_embeddings(tmp_path / "a.emb", normalize=False)
        np.testing.assert_array_equal(loaded.matrix, emb.matrix.astype("<f4"))
        save_embeddings(loaded, tmp_path / "b.emb")
        assert (tmp_path / "b.emb").read_bytes() == raw
        assert ids_path(tmp_path / "a.emb").read_text().splitlines() == emb.ids

    def test_normalization_flag(self, tmp_path, rng):
        save_embeddings(EmbeddingSet(["a", "b"], rng.normal(size=(2, 3)) * 5), tmp_path / "a.emb")
        loaded = load_embeddings(tmp_path / "a.emb")
        assert loaded.renormalized
        np.testing.assert_allclose(np.linalg.norm(loaded.matrix, axis=1), 1.0, atol=1e-12)
        save_embeddings(loaded, tmp_path / "b.emb")
        assert not load_embeddings(tmp_path / "b.emb").renormalized

    def test_empty(self, tmp_path):
        save_embeddings(EmbeddingSet([], np.empty((0, 4))), tmp_path / "e.emb")
        assert len((tmp_path / "e.emb").read_bytes()) == 16
        assert len(load_embeddings(tmp_path / "e.emb")) == 0

    def test_corruptions(self, tmp_path, rng):
        p = tmp_path / "a.emb"
        save_embeddings(EmbeddingSet(["a", "b"], rng.normal(size=(2, 3))), p)
        raw = p.read_bytes()
        p.write_bytes(b"XXXXEMB1" + raw[8:])
        with pytest.raises(FormatError, match="magic"):
            load_embeddings(p)
        p.write_bytes(raw[:-4])
        with pytest.raises(FormatError, match="bytes"):
            load_embeddings(p)
        p.write_bytes(raw)
        ids_path(p).write_text("a\n")
        with pytest.raises(FormatError, match="ids"):
            load_embeddings(p)

    def test_duplicate_ids(self):
        with pytest.raises(ValueError):
            EmbeddingSet(["a", "a"], np.eye(2))

    @settings(max_examples=20, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(st.integers(0, 20), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, tmp_path, n, d, seed):
        emb = EmbeddingSet([f"x{i}" for i in range(n)], np.random.default_rng(seed).normal(size=(n, d)).astype("<f4"))
        save_embeddings(emb, tmp_path / "p.emb")
        back = load_embeddings(tmp_path / "p.emb", normalize=False)
        assert back.ids == emb.ids
        np.testing.assert_array_equal(back.matrix, emb.matrix)


class TestManifest:
    def test_round_trip(self, tmp_path):
        city = generate_city(SynthConfig(n_areas=2, locations_per_area=4))
        m = mine_temporal_pairs(city.records, pairs_per_location=3, seed=4, source_dataset="synth")
        save_manifest(m, tmp_path / "m.csv", {"note": 1})
        back = load_manifest(tmp_path / "m.csv")
        assert back.pairs == m.pairs
        assert (back.seed, back.source_dataset, back.constraint_summary) == (4, "synth", m.constraint_summary)
        first = (tmp_path / "m.csv").read_bytes()
        save_manifest(back, tmp_path / "m.csv", {"note": 1})
        assert (tmp_path / "m.csv").read_bytes() == first
        assert sidecar_path(tmp_path / "m.csv").exists()

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n")
        with pytest.raises(FormatError):
            load_manifest(tmp_path / "m.csv")


class TestBlocked:
    def test_checkpoint_round_trip(self, tmp_path):
        enc = ToyEncoder.init(6, (5, 4), 3, seed=2)
        enc.set_flat(enc.get_flat().astype("<f4"))
        save_checkpoint(enc, tmp_path / "c.bin", seed=2, config={"epochs": 3})
        back, header = load_checkpoint(tmp_path / "c.bin")
        np.testing.assert_array_equal(back.get_flat(), enc.get_flat())
        assert header["layer_sizes"] == [6, 5, 4, 3] and header["seed"] == 2 and header["config"] == {"epochs": 3}
        raw = (tmp_path / "c.bin").read_bytes()
        save_checkpoint(back, tmp_path / "d.bin", seed=2, config={"epochs": 3})
        assert (tmp_path / "d.bin").read_bytes() == raw
        assert raw[:8] == b"STCLCKP1"

    def test_checkpoint_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "c.bin")

    def test_tensor_round_trip(self, tmp_path, rng):
        attn = rng.random((2, 3, 5, 5)).astype("<f4")
        save_tensor(tmp_path / "t.bin", "attention", attn, 2, 2, 16, class_token=True)
        header, back = load_tensor(tmp_path / "t.bin")
        np.testing.assert_array_equal(back, attn)
        assert (header["layers"], header["heads"], header["rows"], header["class_token"]) == (2, 3, 2, True)
        with pytest.raises(ValueError):
            save_tensor(tmp_path / "x.bin", "bogus", attn, 2, 2)
