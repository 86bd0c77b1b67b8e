"""Tests for the toy environments: task generation, verification and teacher contexts."""
import json
from collections import Counter

import numpy as np
import pytest

from core.env.tasks import (
    EnvKind,
    EnvSpec,
    TeacherContext,
    build_group_contexts,
    build_teacher_context,
    correct_siblings,
    dump_tasks,
    eval_prompts,
    gen_task,
    is_correct,
    solve,
    verify,
)
from core.types import EOS, SEP, TEACH, Rollout, RolloutGroup

COPY_SORT = EnvSpec(kind=EnvKind.COPY_SORT, min_len=3, max_len=5)
MOD_ARITH = EnvSpec(kind=EnvKind.MOD_ARITH)
PROMPT = (3, 1, 2, SEP)


def make_group(rewards, prompt=PROMPT, group_id=0):
    rollouts = tuple(
        Rollout(prompt, (1, 2, 3, EOS) if r >= 0.5 else (9, EOS), (-0.1,) * (4 if r >= 0.5 else 2), r)
        for r in rewards
    )
    return RolloutGroup(prompt, rollouts, group_id)


class TestTasks:
    """Test task generation and the exact verifier."""

    def test_copy_sort_solution(self):
        assert solve(COPY_SORT, (3, 1, 2, SEP)) == (1, 2, 3, EOS)

    def test_mod_arith_solution(self):
        assert solve(MOD_ARITH, (7, 8, SEP)) == (5, EOS)

    def test_single_digit_copy_sort(self):
        single = EnvSpec(kind=EnvKind.COPY_SORT, min_len=1, max_len=1)
        prompt, solution = gen_task(single, np.random.default_rng(0))
        assert len(prompt) == 2 and prompt[-1] == SEP
        assert solution == (prompt[0], EOS)

    def test_generated_copy_sort_shape(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            prompt, solution = gen_task(COPY_SORT, rng)
            digits = list(prompt[:-1])
            assert prompt[-1] == SEP and 3 <= len(digits) <= 5
            assert all(0 <= d <= 9 for d in digits)
            assert solution == tuple(sorted(digits)) + (EOS,)

    def test_generated_mod_arith_shape(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            (d1, d2, sep), solution = gen_task(MOD_ARITH, rng)
            assert sep == SEP
            assert solution == ((d1 + d2) % 10, EOS)

    def test_seeded_generation_repeats(self):
        a = [gen_task(COPY_SORT, np.random.default_rng(9)) for _ in range(3)]
        b = [gen_task(COPY_SORT, np.random.default_rng(9)) for _ in range(3)]
        assert a == b

    def test_verify_exact_match(self):
        assert verify(COPY_SORT, PROMPT, (1, 2, 3, EOS)) == 1.0

    def test_verify_altered_digit(self):
        assert verify(COPY_SORT, PROMPT, (1, 2, 4, EOS)) == 0.0

    def test_verify_requires_eos(self):
        """A correct answer without the terminating EOS is wrong."""
        assert verify(COPY_SORT, PROMPT, (1, 2, 3)) == 0.0

    def test_verify_rejects_trailing_tokens(self):
        assert verify(COPY_SORT, PROMPT, (1, 2, 3, EOS, EOS)) == 0.0

    def test_verify_is_deterministic(self):
        results = {verify(COPY_SORT, PROMPT, (1, 2, 3, EOS)) for _ in range(10_000)}
        assert results == {1.0}

    def test_eval_prompts_fixed(self):
        assert eval_prompts(COPY_SORT, 5) == eval_prompts(COPY_SORT, 5)

    def test_dump_tasks(self, tmp_path):
        out = tmp_path / "tasks.jsonl"
        assert dump_tasks(COPY_SORT, 4, str(out), seed=3) == 4
        lines = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
        assert len(lines) == 4
        for line in lines:
            assert tuple(line["solution"]) == solve(COPY_SORT, line["prompt"])


class TestIsCorrect:
    """Test the reward threshold."""

    @pytest.mark.parametrize("reward, expected", [(1.0, True), (0.0, False), (0.5, True), (0.49, False)])
    def test_threshold(self, reward, expected):
        assert is_correct(reward) is expected


class TestTeacherContext:
    """Test sibling selection and the enriched teacher prefix."""

    def test_requires_single_marker(self):
        with pytest.raises(ValueError):
            TeacherContext(tokens=(1, 10, TEACH, TEACH), source_rollout=0)

    def test_only_self_correct(self):
        """A rollout never teaches itself."""
        group = make_group([1.0] + [0.0] * 7)
        assert build_teacher_context(group, 0, np.random.default_rng(0)) is None

    def test_all_incorrect(self):
        group = make_group([0.0] * 8)
        contexts = build_group_contexts(group, np.random.default_rng(0))
        assert contexts == [None] * 8

    def test_two_correct_siblings(self):
        """With rollouts 2 and 5 correct, rollout 0 learns from 2 or 5."""
        group = make_group([0, 0, 1, 0, 0, 1, 0, 0])
        rng = np.random.default_rng(1)
        sources = Counter(build_teacher_context(group, 0, rng).source_rollout for _ in range(400))
        assert set(sources) == {2, 5}
        assert 150 < sources[2] < 250

    def test_correct_rollout_gets_the_other_correct_sibling(self):
        group = make_group([0, 0, 1, 0, 0, 1, 0, 0])
        assert build_teacher_context(group, 2, np.random.default_rng(0)).source_rollout == 5
        assert build_teacher_context(group, 5, np.random.default_rng(0)).source_rollout == 2

    def test_context_layout(self):
        """prompt ⊕ TEACH ⊕ sibling response ⊕ SEP."""
        group = make_group([0, 1])
        context = build_teacher_context(group, 0, np.random.default_rng(0))
        assert context.tokens == PROMPT + (TEACH,) + (1, 2, 3, EOS) + (SEP,)
        assert context.tokens[: len(PROMPT)] == group.prompt

    def test_availability_matches_brute_force(self):
        """m_i is true iff some other rollout is correct, over random groups."""
        rng = np.random.default_rng(2)
        for _ in range(200):
            rewards = rng.integers(0, 2, size=8).astype(float).tolist()
            group = make_group(rewards)
            contexts = build_group_contexts(group, rng)
            for i, context in enumerate(contexts):
                expected = any(r >= 0.5 for j, r in enumerate(rewards) if j != i)
                assert (context is not None) == expected
                assert (context is not None) == bool(correct_siblings(group, i))
                if context is not None:
                    assert context.source_rollout != i
                    assert rewards[context.source_rollout] >= 0.5

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            build_teacher_context(make_group([0, 1]), 2, np.random.default_rng(0))
