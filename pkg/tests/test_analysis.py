from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_gateway
from repodistill.analysis import (
    ELISION_MARKER,
    FileClassification,
    classify_file,
    excerpt_text,
    load_classifications,
    locate_main_readme,
    resolve_mentions,
    save_classifications,
    select_context_files,
    summarize_purpose,
    summarize_purpose_from_tree,
)
from repodistill.errors import MalformedResponse
from repodistill.ingest import FileRecord


def record(path: str, *, size: int = 10, is_text: bool = True) -> FileRecord:
    return FileRecord(
        relative_path=path, byte_size=size, content_digest=f"d-{path}", is_text=is_text
    )


def classification(
    path: str,
    relevance: int,
    *,
    coarse: str = "code",
    fine: str | None = "library_code",
    size: int = 10,
) -> FileClassification:
    return FileClassification(
        file=record(path, size=size),
        coarse_class=coarse,
        fine_class=fine,
        relevance=relevance,
    )


# --- locate_main_readme -------------------------------------------------------

def test_readme_depth_rule() -> None:
    files = [record("docs/README.md"), record("README.md")]
    assert locate_main_readme(files).relative_path == "README.md"


def test_readme_case_and_extension_insensitive() -> None:
    files = [record("readme.rst")]
    assert locate_main_readme(files).relative_path == "readme.rst"
    assert locate_main_readme([record("ReadMe")]).relative_path == "ReadMe"


def test_readme_absent() -> None:
    assert locate_main_readme([record("main.py")]) is None


def test_readme_tie_breaks_shortest_then_lexicographic() -> None:
    files = [record("b/README.md"), record("a/README.md"), record("a/readme.longer.md")]
    assert locate_main_readme(files).relative_path == "a/README.md"


# --- classification schema ----------------------------------------------------

def test_classification_legality_table() -> None:
    FileClassification(record("x.py"), "code", "existing_example", 5)
    FileClassification(record("x"), "other", None, 1)
    with pytest.raises(ValueError):
        FileClassification(record("x"), "code", None, 3)  # code needs fine class
    with pytest.raises(ValueError):
        FileClassification(record("x"), "data", "readme", 3)  # data takes none
    with pytest.raises(ValueError):
        FileClassification(record("x"), "documentation", "entry_point", 3)
    with pytest.raises(ValueError):
        FileClassification(record("x"), "script", "utility", 7)  # relevance bound
    with pytest.raises(ValueError):
        FileClassification(record("x"), "script", "utility", 0)


# --- summarize_purpose ----------------------------------------------------------

def test_purpose_from_scripted_response() -> None:
    def script(request):
        return json.dumps(
            {
                "summary": "molecular dynamics simulator",
                "key_files": ["examples/run.py"],
            }
        )

    purpose = summarize_purpose(
        "MD sim readme", make_gateway(script), model_id="test-model"
    )
    assert purpose.summary == "molecular dynamics simulator"
    assert purpose.key_file_mentions == ["examples/run.py"]


def test_purpose_nonexistent_mention_dropped() -> None:
    def script(request):
        return json.dumps(
            {"summary": "sim", "key_files": ["examples/run.py", "ghost.py"]}
        )

    purpose = summarize_purpose("readme", make_gateway(script), model_id="test-model")
    files = [record("examples/run.py")]
    purpose = resolve_mentions(purpose, files)
    assert purpose.key_file_mentions == ["examples/run.py"]


def test_purpose_unparseable_twice_raises() -> None:
    gateway = make_gateway(lambda request: "not json at all")
    with pytest.raises(MalformedResponse):
        summarize_purpose("readme", gateway, model_id="test-model")


def test_purpose_repair_retry_succeeds() -> None:
    calls = []

    def script(request):
        calls.append(request.user_text)
        if len(calls) == 1:
            return "garble"
        return json.dumps({"summary": "fixed on retry", "key_files": []})

    purpose = summarize_purpose("readme", make_gateway(script), model_id="test-model")
    assert purpose.summary == "fixed on retry"
    assert len(calls) == 2
    assert "could not be parsed" in calls[1]


def test_purpose_requires_nonempty_readme() -> None:
    with pytest.raises(ValueError):
        summarize_purpose("", make_gateway(), model_id="test-model")


def test_purpose_from_tree_fallback() -> None:
    seen = []

    def script(request):
        seen.append(request.user_text)
        return json.dumps({"summary": "inferred from tree", "key_files": []})

    purpose = summarize_purpose_from_tree(
        [record("src/a.py"), record("src/b.py")],
        make_gateway(script),
        model_id="test-model",
    )
    assert purpose.summary == "inferred from tree"
    assert purpose.source_readme is None
    assert "src/a.py" in seen[0]


# --- classify_file --------------------------------------------------------------

def test_classify_empty_file_short_circuits() -> None:
    gateway = make_gateway(lambda request: pytest.fail("no LLM call expected"))
    result = classify_file(
        record("empty.txt", size=0), "", gateway, model_id="test-model-mini"
    )
    assert (result.coarse_class, result.relevance) == ("other", 1)
    assert gateway.ledger.entries == []


def test_classify_binary_short_circuits() -> None:
    gateway = make_gateway(lambda request: pytest.fail("no LLM call expected"))
    result = classify_file(
        record("blob.bin", size=9, is_text=False),
        "",
        gateway,
        model_id="test-model-mini",
    )
    assert (result.coarse_class, result.fine_class, result.relevance) == ("data", None, 1)


def test_classify_scripted_fixture() -> None:
    def script(request):
        assert "examples/demo.py" in request.user_text
        return json.dumps(
            {
                "coarse_class": "code",
                "fine_class": "existing_example",
                "relevance": 5,
                "special_compute": False,
                "critical_info": None,
            }
        )

    result = classify_file(
        record("examples/demo.py"),
        "print('demo')",
        make_gateway(script),
        model_id="test-model-mini",
    )
    assert result.coarse_class == "code"
    assert result.fine_class == "existing_example"
    assert result.relevance == 5


def test_classify_out_of_range_relevance_repairs_then_falls_back() -> None:
    calls = []

    def script(request):
        calls.append(request)
        return json.dumps(
            {
                "coarse_class": "code",
                "fine_class": "library_code",
                "relevance": 7,
                "special_compute": False,
                "critical_info": None,
            }
        )

    result = classify_file(
        record("src/x.py"), "code", make_gateway(script), model_id="test-model-mini"
    )
    assert len(calls) == 2  # repair retry happened
    assert (result.coarse_class, result.relevance) == ("other", 1)


def test_classify_repair_can_rescue() -> None:
    responses = iter(
        [
            "not json",
            json.dumps(
                {
                    "coarse_class": "script",
                    "fine_class": "utility",
                    "relevance": 2,
                    "special_compute": True,
                    "critical_info": "needs bash",
                }
            ),
        ]
    )
    result = classify_file(
        record("tools/x.sh"),
        "#!/bin/bash",
        make_gateway(lambda request: next(responses)),
        model_id="test-model-mini",
    )
    assert result.fine_class == "utility"
    assert result.special_compute is True
    assert result.critical_info == "needs bash"


def test_classify_includes_purpose_summary_in_prompt() -> None:
    seen = []

    def script(request):
        seen.append(request.user_text)
        return json.dumps(
            {
                "coarse_class": "other",
                "fine_class": None,
                "relevance": 1,
                "special_compute": False,
                "critical_info": None,
            }
        )

    classify_file(
        record("x.cfg"),
        "k=v",
        make_gateway(script),
        model_id="test-model-mini",
        purpose_summary="a chemistry toolkit",
    )
    assert "a chemistry toolkit" in seen[0]


# --- excerpting -----------------------------------------------------------------

def test_excerpt_keeps_small_text_intact() -> None:
    assert excerpt_text("short", 100) == "short"


def test_excerpt_respects_allowance_and_keeps_head_tail() -> None:
    text = "H" * 600 + "M" * 600 + "T" * 600
    result = excerpt_text(text, 200)
    assert len(result.encode("utf-8")) <= 200
    assert result.startswith("H")
    assert result.endswith("T")
    assert ELISION_MARKER in result


def test_excerpt_tiny_allowance_head_truncates() -> None:
    result = excerpt_text("abcdefgh" * 10, 5)
    assert len(result.encode("utf-8")) <= 5
    assert result == "abcde"


@settings(max_examples=100, deadline=None)
@given(st.text(max_size=400), st.integers(min_value=1, max_value=200))
def test_excerpt_never_exceeds_allowance(text, allowance) -> None:
    assert len(excerpt_text(text, allowance).encode("utf-8")) <= allowance


# --- select_context_files --------------------------------------------------------

def contents_for(classifications, sizes=None) -> dict[str, str]:
    contents = {}
    for item in classifications:
        size = item.file.byte_size if sizes is None else sizes[item.file.relative_path]
        contents[item.file.relative_path] = "x" * size
    return contents


def test_select_all_fit_relevance_order() -> None:
    items = [
        classification("low.py", 2, size=10),
        classification("high.py", 5, size=10),
        classification("mid.py", 3, size=10),
    ]
    selection = select_context_files(items, contents_for(items), budget_bytes=1000)
    assert [c.file.relative_path for c, _t in selection.chosen] == [
        "high.py",
        "mid.py",
        "low.py",
    ]
    assert selection.total_bytes == 30


def test_select_forced_readme_first_and_excerpted_when_budget_small() -> None:
    readme = classification(
        "README.md", 1, coarse="documentation", fine="readme", size=500
    )
    other = classification("src/a.py", 5, size=10)
    items = [other, readme]
    selection = select_context_files(items, contents_for(items), budget_bytes=100)
    first, first_text = selection.chosen[0]
    assert first.file.relative_path == "README.md"
    assert len(first_text.encode("utf-8")) <= 100
    assert selection.total_bytes <= 100


def test_select_greedy_rel5_excerpt_rel3_skip() -> None:
    # files (rel 5, 10 KiB), (rel 3, 10 KiB), budget 12 KiB:
    # first taken whole, second skipped
    five = classification("five.py", 5, size=10 * 1024)
    three = classification("three.py", 3, size=10 * 1024)
    items = [three, five]
    selection = select_context_files(items, contents_for(items), budget_bytes=12 * 1024)
    chosen_paths = [c.file.relative_path for c, _t in selection.chosen]
    assert chosen_paths == ["five.py"]
    assert selection.total_bytes == 10 * 1024

    # a second rel-5 file is excerpted into the remaining budget instead
    five_b = classification("five_b.py", 5, size=10 * 1024)
    items = [five, five_b]
    selection = select_context_files(items, contents_for(items), budget_bytes=12 * 1024)
    chosen = {c.file.relative_path: text for c, text in selection.chosen}
    assert set(chosen) == {"five.py", "five_b.py"}
    assert selection.total_bytes <= 12 * 1024
    assert ELISION_MARKER in chosen["five_b.py"]


def test_select_deterministic_under_permutation() -> None:
    rng = random.Random(0)
    items = [
        classification(f"f{i:02d}.py", rng.randint(1, 5), size=rng.randint(1, 400))
        for i in range(20)
    ]
    contents = contents_for(items)
    base = select_context_files(items, contents, budget_bytes=1500)
    for _ in range(5):
        shuffled = items[:]
        rng.shuffle(shuffled)
        again = select_context_files(shuffled, contents, budget_bytes=1500)
        assert [(c.file.relative_path, t) for c, t in again.chosen] == [
            (c.file.relative_path, t) for c, t in base.chosen
        ]


def test_select_rejects_nonpositive_budget() -> None:
    with pytest.raises(ValueError):
        select_context_files([], {}, budget_bytes=0)


def selection_oracle(items, contents, budget):
    """Independent greedy reimplementation of the documented rule."""
    from repodistill.analysis import excerpt_text as _excerpt

    def depth_key(c):
        p = c.file.relative_path
        return (p.count("/"), len(p), p)

    readmes = [c for c in items if c.fine_class == "readme"]
    if not readmes:
        readmes = [
            c for c in items if c.file.relative_path.rsplit("/", 1)[-1].rsplit(".", 1)[0].lower() == "readme"
        ]
    readme = min(readmes, key=depth_key) if readmes else None
    chosen = []
    total = 0
    if readme is not None:
        text = _excerpt(contents.get(readme.file.relative_path, ""), budget)
        chosen.append((readme.file.relative_path, text))
        total += len(text.encode("utf-8"))
    rest = sorted(
        (c for c in items if c is not readme),
        key=lambda c: (-c.relevance, c.file.relative_path),
    )
    for c in rest:
        text = contents.get(c.file.relative_path, "")
        size = len(text.encode("utf-8"))
        remaining = budget - total
        if size <= remaining:
            chosen.append((c.file.relative_path, text))
            total += size
        elif c.relevance == 5 and remaining > 0:
            cut = _excerpt(text, remaining)
            chosen.append((c.file.relative_path, cut))
            total += len(cut.encode("utf-8"))
    return chosen, total


@settings(max_examples=120, deadline=None)
@given(
    spec=st.lists(
        st.tuples(st.integers(1, 5), st.integers(0, 600), st.booleans()),
        min_size=1,
        max_size=12,
    ),
    budget=st.integers(min_value=1, max_value=1200),
)
def test_select_matches_independent_oracle(spec, budget) -> None:
    items = []
    for i, (relevance, size, is_readme) in enumerate(spec):
        if is_readme and i == 0:
            items.append(
                classification(
                    "README.md", relevance, coarse="documentation", fine="readme", size=size
                )
            )
        else:
            items.append(classification(f"f{i:02d}.py", relevance, size=size))
    contents = contents_for(items)
    selection = select_context_files(items, contents, budget_bytes=budget)
    oracle_chosen, oracle_total = selection_oracle(items, contents, budget)
    assert [(c.file.relative_path, t) for c, t in selection.chosen] == oracle_chosen
    assert selection.total_bytes == oracle_total
    assert selection.total_bytes <= budget


# --- sidecar persistence ----------------------------------------------------------

def test_classification_sidecar_round_trip(tmp_path) -> None:
    items = [
        classification("src/a.py", 4),
        FileClassification(
            record("notes.bin", is_text=False), "data", None, 1,
            special_compute=True, critical_info="gpu hints",
        ),
    ]
    path = tmp_path / "side.jsonl"
    save_classifications(items, path)
    loaded = load_classifications(path)
    assert loaded == items
