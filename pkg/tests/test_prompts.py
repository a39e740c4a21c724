import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from divergen.dataset import CategoryRecord
from divergen.prompts import (
    LLM_REQUIREMENTS,
    PromptError,
    PromptPool,
    PromptTemplate,
    allocate_generation_budget,
    build_llm_instruction,
    build_prompt_pool,
    load_prompt_pools,
    parse_llm_prompts,
    render_manual_prompt,
    save_prompt_pools,
)


def cat(name, definition=None, cid=1):
    return CategoryRecord(id=cid, name=name, definition=definition)


class TestRenderManualPrompt:
    def test_with_definition(self):
        prompt = render_manual_prompt(cat("banana", "an elongated curved fruit"))
        assert prompt == ("a photo of a single banana, an elongated curved fruit, "
                          "in a white background")

    def test_without_definition(self):
        assert render_manual_prompt(cat("banana")) == \
            "a photo of a single banana, in a white background"

    def test_spaces_kept_verbatim(self):
        prompt = render_manual_prompt(cat("fire hose"))
        assert "fire hose" in prompt
        assert prompt.count("fire hose") == 1

    def test_name_appears_exactly_once(self):
        prompt = render_manual_prompt(cat("dolphin", "a marine mammal"))
        assert prompt.count("dolphin") == 1

    def test_empty_name_rejected(self):
        with pytest.raises(PromptError):
            render_manual_prompt(cat(""))

    def test_pattern_must_contain_name_slot(self):
        with pytest.raises(PromptError):
            PromptTemplate(pattern="no slots at all")


class TestBuildLlmInstruction:
    def test_contains_all_requirements_and_count(self):
        instruction = build_llm_instruction(cat("dolphin"), 32)
        text = instruction.text()
        for requirement in LLM_REQUIREMENTS:
            assert requirement in text
        assert "32" in text

    def test_degenerate_count(self):
        text = build_llm_instruction(cat("acorn"), 1).text()
        for requirement in LLM_REQUIREMENTS:
            assert requirement in text

    def test_differs_only_in_category(self):
        a = build_llm_instruction(cat("zebra"), 8).text()
        b = build_llm_instruction(cat("yak"), 8).text()
        assert a.replace("zebra", "yak") == b

    def test_bad_count(self):
        with pytest.raises(PromptError):
            build_llm_instruction(cat("x"), 0)


class TestParseLlmPrompts:
    def test_enumeration_and_suffix(self):
        out = parse_llm_prompts("1. A ripe banana with brown spots", 4)
        assert out == ["A ripe banana with brown spots, in a white background"]

    def test_no_double_suffix(self):
        line = "A ripe banana, in a white background"
        assert parse_llm_prompts(line, 4) == [line]

    def test_duplicates_collapse(self):
        response = "1. A red apple\n2. A red apple\n3.  A red  apple"
        assert parse_llm_prompts(response, 4) == ["A red apple, in a white background"]

    def test_quotes_and_bullets_stripped(self):
        response = '- "A spotted dog"\n* A striped cat'
        out = parse_llm_prompts(response, 4)
        assert out == ["A spotted dog, in a white background",
                       "A striped cat, in a white background"]

    def test_truncates_to_expected(self):
        response = "\n".join(f"{i}. prompt number {i}" for i in range(1, 11))
        assert len(parse_llm_prompts(response, 5)) == 5

    def test_reparse_is_identity(self):
        response = "1. A ripe banana\n2. A green banana\n3. Bunch of text"
        once = parse_llm_prompts(response, 10)
        again = parse_llm_prompts("\n".join(once), 10)
        assert once == again

    def test_zero_parseable_error(self):
        with pytest.raises(PromptError):
            parse_llm_prompts("\n\n   \n", 4)


class TestAllocateGenerationBudget:
    def test_prompt_ablation_32(self):
        assert allocate_generation_budget(32, 256) == [8] * 32

    def test_prompt_ablation_128(self):
        assert allocate_generation_budget(128, 256) == [2] * 128

    def test_remainder_rule(self):
        assert allocate_generation_budget(3, 10) == [4, 3, 3]

    @given(st.integers(1, 200), st.integers(0, 5000))
    @settings(max_examples=200, deadline=None)
    def test_sum_and_fairness(self, prompts, budget):
        split = allocate_generation_budget(prompts, budget)
        assert sum(split) == budget
        assert max(split) - min(split) <= 1
        assert split == allocate_generation_budget(prompts, budget)


class TestPromptPool:
    def test_invariants(self):
        with pytest.raises(PromptError):
            PromptPool(category_id=1, prompts=("a", "b"), images_per_prompt=(1,))
        with pytest.raises(PromptError):
            PromptPool(category_id=1, prompts=("a", "b"), images_per_prompt=(5, 3))

    def test_json_round_trip(self, tmp_path):
        pools = [
            build_prompt_pool(cat("banana", cid=1), budget=10),
            build_prompt_pool(cat("dolphin", cid=2), budget=7,
                              llm_response="1. a\n2. b\n3. c", expected_llm_prompts=3),
        ]
        path = tmp_path / "pools.json"
        save_prompt_pools(pools, path)
        assert load_prompt_pools(path) == pools

    def test_shortfall_reallocates_over_actual_count(self):
        pool = build_prompt_pool(cat("owl"), budget=9,
                                 llm_response="1. just one prompt",
                                 expected_llm_prompts=5)
        assert len(pool.prompts) == 2  # manual + the single parsed prompt
        assert sum(pool.images_per_prompt) == 9
        assert max(pool.images_per_prompt) - min(pool.images_per_prompt) <= 1
