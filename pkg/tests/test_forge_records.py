import json
from collections import defaultdict

import pytest

from bridgelm.forge.records import (
    FULL_SCALE_SOURCES,
    AnnotationStore,
    IngestConfigError,
    IngestError,
    consensus,
    ingest,
    ingest_all,
    merge_by_image,
)


def write(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


class TestIngest:
    def test_empty_file(self, tmp_path):
        store = ingest("vqav2", write(tmp_path / "e.jsonl", []))
        assert len(store) == 0 and store.counts()["vqav2"] == 0

    def test_three_rows_two_images(self, fixtures):
        store = ingest("vqa", fixtures / "sources" / "vqav2.jsonl")
        assert store.counts()["vqav2"] == 3
        assert store.image_counts()["vqav2"] == 2

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(IngestConfigError):
            ingest("flickr", write(tmp_path / "x.jsonl", []))

    def test_malformed_tolerated_under_one_percent(self, tmp_path):
        rows = [{"image_id": i, "caption": f"c{i}"} for i in range(200)] + ["{not json"]
        store = ingest("caption", write(tmp_path / "c.jsonl", rows))
        assert store.counts()["coco_caption"] == 200 and len(store.malformed) == 1

    def test_malformed_over_one_percent_fails(self, tmp_path):
        rows = [{"image_id": i, "caption": "c"} for i in range(10)] + [{"image_id": 1}]
        with pytest.raises(IngestError):
            ingest("caption", write(tmp_path / "c.jsonl", rows))

    def test_aokvqa_requires_rationale(self, tmp_path):
        rows = [{"image_id": 1, "question": "q", "answer": "a", "rationales": []}]
        with pytest.raises(IngestError):
            ingest("aokvqa", write(tmp_path / "a.jsonl", rows))

    def test_integer_image_ids_become_strings(self, tmp_path):
        store = ingest("caption", write(tmp_path / "c.jsonl", [{"image_id": 42, "caption": "x"}]))
        assert store.image_ids() == {"42"}

    def test_full_scale_provenance_constant(self):
        # documented magnitude only; the full source is never loaded
        assert FULL_SCALE_SOURCES["vqav2"] == (123_287, 658_111)


def test_consensus_majority_then_earliest():
    assert consensus(["tan", "brown", "brown"]) == "brown"
    assert consensus(["a", "b"]) == "a"
    assert consensus([]) == ""


class TestMerge:
    def test_caption_only_image(self, tmp_path):
        rows = [{"image_id": "c", "caption": f"cap {i}"} for i in range(5)]
        ctx = merge_by_image(ingest("caption", write(tmp_path / "c.jsonl", rows)))["c"]
        assert ctx.captions == [f"cap {i}" for i in range(5)]
        assert not any(ctx.statement_groups()) and not ctx.rationales

    def test_all_sources_populated(self, fixtures):
        store = ingest_all({k: fixtures / "sources" / f"{k}.jsonl" for k in ("vqav2", "okvqa", "aokvqa", "visdial", "coco_caption")})
        merged = merge_by_image(store)
        assert list(merged) == sorted(merged)
        ctx = merged["coco-000139"]
        assert ctx.vqav2_qas == [("What color is the couch?", "brown"), ("Is the television on?", "no")]
        assert ctx.okvqa_qas == [("What is this room used for?", "relaxing")]

    def test_matches_bruteforce_groupby(self, fixtures):
        kinds = ("vqav2", "okvqa", "aokvqa", "visdial", "coco_caption")
        store = ingest_all({k: fixtures / "sources" / f"{k}.jsonl" for k in kinds})
        oracle = defaultdict(lambda: defaultdict(list))
        for k in kinds:
            for line in (fixtures / "sources" / f"{k}.jsonl").read_text().splitlines():
                row = json.loads(line)
                img = str(row["image_id"])
                if k == "coco_caption":
                    oracle[img]["captions"].append(row["caption"])
                else:
                    oracle[img][k].append(row["question"])
                if k == "aokvqa":
                    oracle[img]["rationales"].extend(row["rationales"])
        merged = merge_by_image(store)
        assert set(merged) == set(oracle)
        for img, ctx in merged.items():
            assert [q for q, _ in ctx.vqav2_qas] == oracle[img]["vqav2"]
            assert [q for q, _ in ctx.okvqa_qas] == oracle[img]["okvqa"]
            assert [q for q, _ in ctx.aokvqa_qas] == oracle[img]["aokvqa"]
            assert [q for q, _ in ctx.visdial_qas] == oracle[img]["visdial"]
            assert ctx.rationales == oracle[img]["rationales"]
            assert ctx.captions == oracle[img]["captions"]

    def test_deterministic(self, fixtures):
        kinds = ("vqav2", "okvqa", "aokvqa", "visdial", "coco_caption")
        a = merge_by_image(ingest_all({k: fixtures / "sources" / f"{k}.jsonl" for k in kinds}))
        b = merge_by_image(ingest_all({k: fixtures / "sources" / f"{k}.jsonl" for k in reversed(kinds)}))
        assert a == b

    def test_only_view(self, fixtures):
        store = ingest("vqav2", fixtures / "sources" / "vqav2.jsonl")
        assert AnnotationStore().only("vqav2").counts()["vqav2"] == 0
        assert store.only("okvqa").counts()["vqav2"] == 0
