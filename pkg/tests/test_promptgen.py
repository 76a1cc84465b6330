import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import image_refs, make_normals

from mirage.backends import MockProposer
from mirage.errors import ParseError, TransportError, ValidationError
from mirage.promptgen import (DefectDescription, ProposalRequest,
                              build_proposal_prompt, load_defects,
                              parse_defect_list, propose_defects, save_defects)


def _req(category="bottle", k=2, count=10):
    refs = image_refs([f"/nonexistent/{i}.png" for i in range(k)], category)
    return ProposalRequest(category=category, reference_images=refs, count=count)


class TestProposalPrompt:
    def test_bottle_prompt_contains_category(self):
        text = build_proposal_prompt(_req("bottle"))
        assert "defect-free bottle" in text
        assert "list 10 realistic defects" in text
        assert "two images" in text

    def test_count_substitution(self):
        text = build_proposal_prompt(_req("pcb4", count=10))
        assert "list 10 realistic defects" in text
        assert "defect-free pcb4" in text

    def test_k_five_uses_digits(self):
        text = build_proposal_prompt(_req("cable", k=5))
        assert "5 images" in text

    def test_deterministic(self):
        assert build_proposal_prompt(_req()) == build_proposal_prompt(_req())

    def test_empty_category_rejected(self):
        with pytest.raises(ValidationError):
            _req(category="  ")

    def test_request_invariants(self):
        with pytest.raises(ValidationError):
            ProposalRequest(category="x", reference_images=(), count=10)
        with pytest.raises(ValidationError):
            _req(count=0)


class TestParseDefectList:
    def test_colon_item(self):
        raw = ("surface scratch: a thin shallow linear mark across the top "
               "surface, exposing a lighter layer underneath")
        items = parse_defect_list(raw, "bottle")
        assert len(items) == 1
        d = items[0]
        assert d.name == "surface scratch"
        assert d.category == "bottle"
        assert "scratch" in d.keywords
        assert 1 <= len(d.keywords) <= 4

    def test_table_row_ampersand(self):
        raw = "Vertical Split & A deep crack runs parallel to the grain, forming a dark gap"
        items = parse_defect_list(raw, "wood")
        assert items[0].name == "Vertical Split"
        assert "crack" in items[0].description

    def test_markdown_table_row(self):
        raw = "| Tape Discoloration | The black surface fades to gray near the edge |"
        items = parse_defect_list(raw, "zipper")
        assert items[0].name == "Tape Discoloration"

    def test_numbered_items(self):
        raw = "1. dent: a shallow depression\n2) burn mark: a dark charred smudge"
        items = parse_defect_list(raw, "cap")
        assert [d.name for d in items] == ["dent", "burn mark"]

    def test_whitespace_only_raises(self):
        with pytest.raises(ParseError):
            parse_defect_list("   \n  ", "bottle")

    def test_garbage_raises_with_raw_attached(self):
        with pytest.raises(ParseError) as err:
            parse_defect_list("no separators here at all", "bottle")
        assert "separators" in err.value.raw_text

    def test_max_items_truncation(self):
        raw = "\n".join(f"{i}. defect {i}: description number {i}" for i in range(12))
        items = parse_defect_list(raw, "c", max_items=10)
        assert len(items) == 10

    def test_long_names_truncated_to_four_words(self):
        raw = "very long defect name with extra words: some description here"
        items = parse_defect_list(raw, "c")
        assert len(items[0].name.split()) == 4

    def test_idempotent_on_own_serialization(self):
        raw = MockProposer().propose(
            build_proposal_prompt(_req("widget", count=8)), [])
        items = parse_defect_list(raw, "widget")
        rendered = "\n".join(f"{d.name}: {d.description}" for d in items)
        again = parse_defect_list(rendered, "widget")
        assert [(d.name, d.description) for d in items] == \
               [(d.name, d.description) for d in again]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(
        st.tuples(
            st.text(alphabet="abcdefghij ", min_size=1, max_size=25),
            st.text(alphabet="abcdefghij ,", min_size=1, max_size=60)),
        min_size=1, max_size=12),
        st.sampled_from(["{i}. {n}: {d}", "{n}: {d}", "| {n} | {d} |", "{n} & {d}"]))
    def test_fuzzed_formats_yield_valid_records(self, pairs, fmt):
        lines = [fmt.format(i=i + 1, n=n, d=d) for i, (n, d) in enumerate(pairs)]
        try:
            items = parse_defect_list("\n".join(lines), "cat")
        except ParseError:
            return  # nothing parseable is a legal outcome for junk input
        for item in items:
            assert item.name.strip()
            assert 1 <= len(item.name.split()) <= 4
            assert item.description.strip()
            assert item.keywords


class TestProposeDefects:
    def test_mock_backend_end_to_end(self, tmp_path):
        paths = make_normals(tmp_path, "widget", 2)
        req = ProposalRequest(category="widget",
                              reference_images=image_refs(paths, "widget"),
                              count=10)
        out = tmp_path / "defects.json"
        defects = propose_defects(req, MockProposer(), out_path=out)
        assert len(defects) == 10
        assert all(d.category == "widget" for d in defects)
        assert load_defects(out) == defects

    def test_truncation_to_requested_count(self, tmp_path):
        paths = make_normals(tmp_path, "widget", 1)

        class TwelveItems:
            def propose(self, prompt, images):
                return "\n".join(f"{i}. defect {i}: item number {i}" for i in range(12))

        req = ProposalRequest(category="widget",
                              reference_images=image_refs(paths, "widget"),
                              count=10)
        defects = propose_defects(req, TwelveItems())
        assert len(defects) == 10

    def test_transport_error_propagates(self, tmp_path):
        paths = make_normals(tmp_path, "widget", 1)

        class Down:
            def propose(self, prompt, images):
                raise TransportError("backend unreachable after 4 attempts")

        req = ProposalRequest(category="widget",
                              reference_images=image_refs(paths, "widget"))
        with pytest.raises(TransportError):
            propose_defects(req, Down())

    def test_canned_responses_directory(self, tmp_path):
        paths = make_normals(tmp_path, "widget", 2)
        canned = tmp_path / "responses"
        canned.mkdir()
        (canned / "widget.txt").write_text("rust spot: a small orange stain\n")
        req = ProposalRequest(category="widget",
                              reference_images=image_refs(paths, "widget"))
        defects = propose_defects(req, MockProposer(responses_dir=canned))
        assert [d.name for d in defects] == ["rust spot"]

    def test_defects_file_round_trip(self, tmp_path):
        d = DefectDescription(name="edge chip", description="a pale notch",
                              keywords=("edge chip", "chip", "pale notch"),
                              category="cap")
        path = tmp_path / "d.json"
        save_defects([d], path)
        assert load_defects(path) == [d]
        data = json.loads(path.read_text())
        assert data[0]["category"] == "cap"


class TestHttpProposerRetries:
    def test_timeout_exhausts_retries(self):
        import requests

        from mirage.backends import HttpProposer

        calls = []

        class FailingSession:
            def post(self, *a, **k):
                calls.append(1)
                raise requests.ConnectionError("boom")

        proposer = HttpProposer("http://example.invalid/propose", auth_env=None,
                                max_retries=3, sleep=lambda _s: None,
                                session=FailingSession())
        with pytest.raises(TransportError, match="4 attempts"):
            proposer.propose("prompt", [])
        assert len(calls) == 4
