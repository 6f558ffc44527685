from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from harmonizer.corpus import (
    CorpusParseError,
    SchemaError,
    compose_embedding_text,
    dump_jsonl,
    flatten_permissible_values,
    load_corpus,
    parse_generic_tabular,
    parse_nih_json,
    parse_sdoh_csv,
    read_jsonl,
    select_designation,
)

SDOH_HEADER = [
    "SDOH Domain Name",
    "Screening Tool Name",
    "Question Concept (from the screening tool)",
    "Answer Concept (from screening tool)",
]


def cde(tiny_id, designations=None, definitions=None, pvs=None, steward="NINDS"):
    obj = {"tinyId": tiny_id, "stewardOrg": {"name": steward}}
    if designations is not None:
        obj["designations"] = designations
    if definitions is not None:
        obj["definitions"] = [{"definition": d} for d in definitions]
    if pvs is not None:
        obj["valueDomain"] = {"permissibleValues": pvs}
    return obj


def write_json(tmp_path, objs, name="cdes.json"):
    p = tmp_path / name
    p.write_text(json.dumps(objs), encoding="utf-8")
    return p


def write_csv(tmp_path, rows, name="table.csv"):
    import csv

    p = tmp_path / name
    with open(p, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)
    return p


# -- designation / values / composition --------------------------------------


def test_preferred_designation_wins():
    designations = [{"designation": "Alpha"}, {"designation": "State", "tags": ["Preferred Question Text"]}]
    assert select_designation(designations) == "State"


def test_first_designation_without_tags():
    assert select_designation([{"designation": "Age"}, {"designation": "Age at visit"}]) == "Age"


def test_missing_definitions_gives_empty(tmp_path):
    corpus = parse_nih_json(write_json(tmp_path, [cde("X1", [{"designation": "Age"}])]))
    assert corpus.records[0].definition == ""
    assert corpus.records[0].composed_text == "Age"


def test_flatten_codes_and_values():
    pvs = [
        {"permissibleValue": "AL", "valueMeaningName": "Alabama"},
        {"permissibleValue": "AK", "valueMeaningName": "Alaska"},
    ]
    assert flatten_permissible_values(pvs) == "AL: Alabama, AK: Alaska"


def test_flatten_empty_and_codeless():
    assert flatten_permissible_values([]) == ""
    assert flatten_permissible_values(None) == ""
    assert flatten_permissible_values([{"valueMeaningName": "Yes"}, {"valueMeaningName": "No"}]) == "Yes, No"


def test_flatten_keeps_concept_code_suffix_verbatim():
    pvs = [{"permissibleValue": "AL", "valueMeaningName": "Alabama C43479"}]
    assert flatten_permissible_values(pvs) == "AL: Alabama C43479"


def test_flatten_custom_keys():
    pvs = [{"code": "1", "label": "Male"}]
    assert flatten_permissible_values(pvs, value_key="label", code_key="code") == "1: Male"


@pytest.mark.parametrize(
    "fields, expected",
    [
        (
            ("Age", "The number of years or months (if 24 months or younger).", ""),
            "Age The number of years or months (if 24 months or younger).",
        ),
        (("", "", ""), ""),
        (("Educational Attainment", "", "Yes, No"), "Educational Attainment Yes, No"),
        (("  a\tb ", "\n c", "d  "), "a b c d"),
    ],
)
def test_compose(fields, expected):
    assert compose_embedding_text(*fields) == expected


@given(st.text(), st.text(), st.text())
def test_compose_has_no_edge_or_double_spaces(a, b, c):
    out = compose_embedding_text(a, b, c)
    assert out == out.strip()
    assert "  " not in out
    assert compose_embedding_text(out, "", "") == out


# -- NIH JSON ----------------------------------------------------------------


def test_nih_full_record(tmp_path):
    objs = [
        cde(
            "PDjBiGXjO",
            [{"designation": "Age"}],
            ["The number of years or months (if 24 months or younger)."],
            [],
        ),
        cde(
            "st1",
            [{"designation": "Alpha"}, {"designation": "State", "tags": ["Preferred Question Text"]}],
            ["US state of residence"],
            [{"permissibleValue": "AL", "valueMeaningName": "Alabama"}],
            steward="NCI",
        ),
    ]
    corpus = parse_nih_json(write_json(tmp_path, objs))
    assert corpus.ids == ["PDjBiGXjO", "st1"]
    a, b = corpus.records
    assert a.composed_text == "Age The number of years or months (if 24 months or younger)."
    assert b.designation == "State"
    assert b.steward_org == "NCI"
    assert b.composed_text == "State US state of residence AL: Alabama"
    assert corpus.skipped == 0


def test_nih_json_lines(tmp_path):
    p = tmp_path / "cdes.jsonl"
    p.write_text("\n".join(json.dumps(cde(f"id{k}", [{"designation": f"d{k}"}])) for k in range(3)) + "\n")
    assert parse_nih_json(p).ids == ["id0", "id1", "id2"]


def test_nih_skips_missing_and_duplicate_ids(tmp_path):
    objs = [cde("a", [{"designation": "x"}]), {"designations": []}, cde("a"), cde("b"), {"tinyId": ""}]
    corpus = parse_nih_json(write_json(tmp_path, objs))
    assert corpus.ids == ["a", "b"]
    assert corpus.skipped == 3
    assert corpus.skipped + len(corpus.records) == len(objs)


def test_nih_malformed_json_reports_byte_offset(tmp_path):
    p = tmp_path / "bad.json"
    raw = '[{"tinyId": "é1"}, {"tinyId": }]'
    p.write_text(raw, encoding="utf-8")
    with pytest.raises(CorpusParseError) as info:
        parse_nih_json(p)
    # the error sits at the "}" after the colon; "é" is two bytes in UTF-8
    assert info.value.offset == raw.index(": }") + 2 + 1


def test_nih_invalid_utf8(tmp_path):
    p = tmp_path / "latin1.json"
    raw = b'[{"tinyId": "caf\xe9"}]'
    p.write_bytes(raw)
    with pytest.raises(CorpusParseError) as info:
        parse_nih_json(p)
    assert info.value.offset == raw.index(b"\xe9") == 16


def test_nih_unreadable_file(tmp_path):
    with pytest.raises(OSError):
        parse_nih_json(tmp_path / "nope.json")


def test_explode_designations(tmp_path):
    objs = [cde("A", [{"designation": "First"}, {"designation": "Second"}], ["def"])]
    corpus = parse_nih_json(write_json(tmp_path, objs), explode_designations=True)
    assert corpus.ids == ["A.0", "A.1"]
    assert [r.composed_text for r in corpus.records] == ["First def", "Second def"]


def test_reparse_is_deterministic(tmp_path):
    objs = [cde(f"c{k}", [{"designation": f" Q {k} "}], [f"d\t{k}"]) for k in range(20)]
    p = write_json(tmp_path, objs)
    assert dump_jsonl(parse_nih_json(p)) == dump_jsonl(parse_nih_json(p))


@given(
    st.lists(
        st.lists(st.tuples(st.text(max_size=8), st.booleans()), max_size=4),
        min_size=1,
        max_size=5,
    )
)
def test_preferred_tag_property(all_designations):
    for entries in all_designations:
        ds = [{"designation": d, "tags": ["Preferred Question Text"] if t else []} for d, t in entries]
        chosen = select_designation(ds)
        if any(t for _, t in entries):
            assert any(d["designation"] == chosen and d["tags"] for d in ds)


# -- SDOH CSV ----------------------------------------------------------------


def test_sdoh_row(tmp_path):
    p = write_csv(
        tmp_path,
        [
            SDOH_HEADER,
            ["Food Insecurity", "Medicare THA", "Do you always have enough money to buy the food you need", "Yes; No"],
            ["Housing Instability", "AHC", "Are you worried about losing your housing?", ""],
        ],
    )
    corpus = parse_sdoh_csv(p)
    a, b = corpus.records
    assert a.composed_text == "Do you always have enough money to buy the food you need Yes; No"
    assert a.ground_truth == "Food Insecurity"
    assert a.screening_tool == "Medicare THA"
    assert b.composed_text == "Are you worried about losing your housing?"
    assert corpus.ground_truth == ["Food Insecurity", "Housing Instability"]
    assert corpus.ids == ["sdoh-1", "sdoh-2"]


def test_sdoh_missing_column(tmp_path):
    p = write_csv(tmp_path, [SDOH_HEADER[1:], ["t", "q", "a"]])
    with pytest.raises(SchemaError) as info:
        parse_sdoh_csv(p)
    assert info.value.column == "SDOH Domain Name"


def test_sdoh_ragged_rows_skipped(tmp_path):
    p = write_csv(tmp_path, [SDOH_HEADER, ["d", "t", "q", "a"], ["d", "t"], ["d2", "t", "q2", "a2", "x"]])
    corpus = parse_sdoh_csv(p)
    assert len(corpus.records) == 1
    assert corpus.skipped == 2


def test_sdoh_column_override(tmp_path):
    p = write_csv(tmp_path, [["Domain", "Q", "A"], ["Stress", "Do you feel stressed?", "Often"]])
    corpus = parse_sdoh_csv(p, columns={"domain": "Domain", "question": "Q", "answer": "A"})
    assert corpus.records[0].composed_text == "Do you feel stressed? Often"


# -- generic tabular and jsonl -----------------------------------------------


def test_generic_tabular_tsv_and_truth(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("id\tdesignation\ttopic\nr1\tHello  world\tgreet\nr1\tdup\tx\n\tnone\tx\n", encoding="utf-8")
    corpus = parse_generic_tabular(p, ground_truth_column="topic")
    assert corpus.ids == ["r1"]
    assert corpus.records[0].composed_text == "Hello world"
    assert corpus.ground_truth == ["greet"]
    assert corpus.skipped == 2


def test_generic_requires_id(tmp_path):
    p = write_csv(tmp_path, [["designation"], ["x"]])
    with pytest.raises(SchemaError):
        parse_generic_tabular(p)


def test_jsonl_roundtrip(tmp_path):
    p = write_csv(
        tmp_path,
        [SDOH_HEADER, ["Stress", "", "Do you feel stressed?", "Often"]],
    )
    original = load_corpus(p, "sdoh_csv")
    out = tmp_path / "corpus.jsonl"
    out.write_text(dump_jsonl(original), encoding="utf-8")
    obj = json.loads(out.read_text().splitlines()[0])
    assert set(obj) == {"id", "steward_org", "designation", "definition", "permissible_values",
                        "composed_text", "ground_truth"}
    assert obj["ground_truth"] == "Stress"
    again = read_jsonl(out)
    assert again.texts == original.texts
    assert again.ground_truth == ["Stress"]


def test_load_corpus_unknown_kind(tmp_path):
    with pytest.raises(ValueError):
        load_corpus(tmp_path / "x", "excel")
